"""Command-line entry point: ``ovsg <command> [--config FILE] [--section.key VALUE ...]``.

Logs are JSON lines on stdout; short human-readable summaries go to stderr.
Exit codes: 0 success, 1 validation error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
from dataclasses import asdict, fields
from importlib import resources
from pathlib import Path
from typing import Any, Optional, Sequence

import jsonschema

from . import __version__
from .autograd import CheckpointError, NonFiniteError, ShapeError, load_checkpoint, save_checkpoint
from .benchmark import DEFAULT_KS, SLICES, SplitSpec, SyntheticSpec, build_split, generate_synthetic_dataset
from .concepts import ConceptSource, load_alias_file
from .features import FEATURE_BLOB, FEATURE_INDEX, FeatureStore, write_feature_store
from .losses import TrainConfig
from .model import ModelConfig, write_prediction_dump
from .pipeline import EmptyPseudoLabels, evaluate, finetune, pretrain
from .types import Dataset, Record, dataset_to_json, load_dataset, save_dataset
from .weak import parse_caption

logger = logging.getLogger("ovsg")


class ValidationFailure(Exception):
    """Bad configuration or input artifact (exit code 1)."""


DEFAULTS: dict[str, dict[str, Any]] = {
    "data": {f.name: f.default for f in fields(SyntheticSpec)},
    "split": {"setting": "ovr", "base_object_fraction": 0.7, "novel_relation_count": None},
    "model": {f.name: f.default for f in fields(ModelConfig)},
    "train": {k: v for k, v in asdict(TrainConfig()).items()},
    "pretrain": {"detector_steps": 1000, "threshold": 0.25, "score_mode": "matched"},
    "eval": {"ks": list(DEFAULT_KS), "iou_threshold": 0.5, "graph_constraint": None, "slice": None,
             "plot": True, "aliases": None},
    "concepts": {"mode": "fixture", "path": None},
    "seed": 0,
    "workers": 1,
}
# user-facing spellings of config keys
KEY_ALIASES = {("train", "lambda"): ("train", "lam")}


def _merge(base: dict, override: dict, where: str = "") -> dict:
    out = dict(base)
    for k, v in override.items():
        path = f"{where}.{k}" if where else k
        if k not in base:
            raise ValidationFailure(f"unknown config key {path!r}")
        if isinstance(base[k], dict) and k != "match":
            if not isinstance(v, dict):
                raise ValidationFailure(f"config key {path!r} must be an object")
            out[k] = _merge(base[k], v, path)
        else:
            out[k] = v
    return out


def _canonical(section: str, key: str) -> tuple[str, str]:
    return KEY_ALIASES.get((section, key), (section, key))


def _normalize(cfg: dict) -> dict:
    for section, value in list(cfg.items()):
        if isinstance(value, dict):
            for key in list(value):
                s2, k2 = _canonical(section, key)
                if (s2, k2) != (section, key):
                    value[k2] = value.pop(key)
    return cfg


def _parse_value(raw: str) -> Any:
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def load_config(path: Optional[str], overrides: Sequence[str]) -> dict:
    """Defaults, then the JSON file, then ``--section.key value`` overrides."""
    cfg = json.loads(json.dumps(DEFAULTS))
    if path:
        p = Path(path)
        if not p.is_file():
            raise ValidationFailure(f"config file {path} does not exist")
        try:
            user = json.loads(p.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ValidationFailure(f"config file {path} is not valid JSON: {exc}") from exc
        cfg = _merge(cfg, _normalize(user))
    it = iter(overrides)
    for tok in it:
        if not tok.startswith("--") or "." not in tok:
            raise ValidationFailure(f"unrecognized argument {tok!r}")
        key, eq, raw = tok[2:].partition("=")
        if not eq:
            try:
                raw = next(it)
            except StopIteration:
                raise ValidationFailure(f"override {tok} needs a value") from None
        section, _, name = key.partition(".")
        section, name = _canonical(section, name)
        if section not in cfg or not isinstance(cfg[section], dict) or name not in cfg[section]:
            raise ValidationFailure(f"unknown config key {key!r}")
        cfg[section][name] = _parse_value(raw)
    env_seed = os.environ.get("OVSG_SEED")
    if env_seed is not None:
        try:
            cfg["seed"] = int(env_seed)
        except ValueError:
            raise ValidationFailure(f"OVSG_SEED must be an integer, got {env_seed!r}") from None
    return cfg


def _model_cfg(cfg: dict) -> ModelConfig:
    try:
        return ModelConfig(**cfg["model"])
    except (TypeError, ValueError) as exc:
        raise ValidationFailure(f"model config: {exc}") from exc


def _train_cfg(cfg: dict, **extra) -> TrainConfig:
    try:
        return TrainConfig(**{**cfg["train"], "seed": cfg["seed"], **extra})
    except (TypeError, ValueError) as exc:
        raise ValidationFailure(f"train config: {exc}") from exc


def _source(cfg: dict, model: ModelConfig) -> ConceptSource:
    c = cfg["concepts"]
    try:
        return ConceptSource(c["mode"], c["path"], model.text_dim)
    except ValueError as exc:
        raise ValidationFailure(f"concepts config: {exc}") from exc


# io helpers ---------------------------------------------------------------


def schema(name: str) -> dict:
    text = resources.files("ovsg.data").joinpath("schemas", f"{name}.schema.json").read_text(encoding="utf-8")
    return json.loads(text)


def validate_json(obj: Any, name: str) -> None:
    try:
        jsonschema.validate(obj, schema(name))
    except jsonschema.ValidationError as exc:
        raise ValidationFailure(f"{name} schema violation: {exc.message}") from exc


class Emitter:
    """Single writer for stdout JSON lines and an optional log file."""

    def __init__(self, log_path: Optional[Path] = None):
        self._fh = log_path.open("w", encoding="utf-8") if log_path else None
        self.last: Optional[dict] = None

    def __call__(self, entry: dict) -> None:
        self.last = entry
        line = json.dumps(entry)
        sys.stdout.write(line + "\n")
        sys.stdout.flush()
        if self._fh:
            self._fh.write(line + "\n")
            self._fh.flush()

    def close(self):
        if self._fh:
            self._fh.close()


def _say(msg: str) -> None:
    print(msg, file=sys.stderr)


def _load_dataset(path: str) -> tuple[Dataset, FeatureStore]:
    p = Path(path)
    if p.is_dir():
        p = p / "dataset.json"
    if not p.is_file():
        raise ValidationFailure(f"dataset file {p} does not exist")
    try:
        raw = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ValidationFailure(f"dataset {p} is not valid JSON: {exc}") from exc
    validate_json(raw, "dataset")
    try:
        ds = load_dataset(p)
    except (ValueError, KeyError) as exc:
        raise ValidationFailure(f"dataset {p}: {exc}") from exc
    errors = [v for v in ds.validate() if v.severity == "error"]
    if errors:
        raise ValidationFailure(f"dataset {p}: {len(errors)} validation errors, first: {errors[0].message}")
    if not (p.parent / FEATURE_INDEX).is_file():
        raise ValidationFailure(f"no feature store next to {p}")
    store = FeatureStore(p.parent)
    missing = [r.features for r in ds.records if r.features not in store]
    if missing:
        raise ValidationFailure(f"feature refs missing from store: {missing[:5]}")
    return ds, store


def _write_dataset(ds: Dataset, path: Path) -> None:
    obj = dataset_to_json(ds)
    validate_json(obj, "dataset")
    save_dataset(ds, path)


def _copy_features(src_dir: Path, dst_dir: Path) -> None:
    if src_dir.resolve() == dst_dir.resolve():
        return
    for name in (FEATURE_INDEX, FEATURE_BLOB):
        shutil.copyfile(src_dir / name, dst_dir / name)


def _prepare_out(path: str) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_probe"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise ValidationFailure(f"output directory {out} is not writable: {exc}") from exc
    return out


def _load_ckpt(path: str):
    try:
        return load_checkpoint(path)
    except CheckpointError as exc:
        raise ValidationFailure(f"checkpoint {path}: {exc}") from exc


# commands -------------------------------------------------------------------


def cmd_gen(args, cfg: dict) -> int:
    out = _prepare_out(args.out)
    try:
        spec = SyntheticSpec(**{**cfg["data"], "seed": cfg["seed"]})
    except (TypeError, ValueError) as exc:
        raise ValidationFailure(f"data config: {exc}") from exc
    data = generate_synthetic_dataset(spec)
    refs = write_feature_store(out, {r.image_id: data.features[r.features] for r in data.dataset.records})
    records = [Record(r.image_id, refs[r.image_id], r.graph, r.caption, r.provenance) for r in data.dataset.records]
    ds = Dataset(data.dataset.vocabulary, records, out)
    _write_dataset(ds, out / "dataset.json")
    manifest = {"generator": spec.to_json(), "n_records": len(records), "version": __version__}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1))
    n_edges = sum(len(r.graph.edges) for r in records)
    _say(f"wrote {len(records)} scenes ({n_edges} triplets) to {out}")
    return 0


def cmd_split(args, cfg: dict) -> int:
    ds, _ = _load_dataset(args.dataset)
    out = _prepare_out(args.out)
    s = cfg["split"]
    setting = args.setting or s["setting"]
    try:
        spec = SplitSpec(setting, s["base_object_fraction"], s["novel_relation_count"], cfg["seed"])
        train_ds, eval_ds, manifest = build_split(ds, spec)
    except ValueError as exc:
        raise ValidationFailure(f"split: {exc}") from exc
    validate_json(manifest, "split_manifest")
    _write_dataset(train_ds, out / "train.json")
    _write_dataset(eval_ds, out / "eval.json")
    _copy_features(Path(ds.root), out)
    (out / "split_manifest.json").write_text(json.dumps(manifest, indent=1))
    _say(f"{setting}: {manifest['n_train_images']} training / {manifest['n_eval_images']} evaluation images; "
         f"novel objects {manifest['novel_objects']}, novel relations {manifest['novel_relations']}")
    return 0


def cmd_pretrain(args, cfg: dict) -> int:
    ds, store = _load_dataset(args.captions)
    out = _prepare_out(args.out)
    model = _model_cfg(cfg)
    tcfg = _train_cfg(cfg, lam=0.0)
    source = _source(cfg, model)
    p = cfg["pretrain"]
    if not 0.0 <= float(p["threshold"]) <= 1.0:
        raise ValidationFailure("pretrain.threshold must lie in [0, 1]")
    emit = Emitter(out / "loss_log.jsonl")
    try:
        params, records, stats = pretrain(ds, store, model, tcfg, int(p["detector_steps"]), float(p["threshold"]),
                                          p["score_mode"], source, on_log=emit)
    finally:
        emit.close()
    pseudo = Dataset(ds.vocabulary, records, ds.root)
    relation_names = sorted({e.predicate for r in records for e in r.graph.edges})
    object_names = sorted({n.concept for r in records for n in r.graph.nodes} | set(ds.vocabulary.object_names))
    _write_dataset(pseudo, out / "pseudo_labels.json")
    meta = {"stage": "pretrain", "model": model.to_json(), "train": tcfg.to_json(), "concepts": source.to_json(),
            "object_names": object_names, "relation_names": relation_names, "seed": cfg["seed"],
            "pseudo_labels": asdict(stats), "final_loss": emit.last["total"] if emit.last else None}
    save_checkpoint(params, out, meta)
    _say(f"pretrained on {stats.n_images_kept} captioned images, {stats.n_kept_triplets} pseudo triplets; "
         f"relations: {relation_names}")
    return 0


def cmd_finetune(args, cfg: dict) -> int:
    ds, store = _load_dataset(args.dataset)
    teacher, tmeta = _load_ckpt(args.teacher)
    out = _prepare_out(args.out)
    try:
        model = ModelConfig.from_json(tmeta["model"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ValidationFailure(f"teacher checkpoint metadata lacks a valid model config: {exc}") from exc
    tcfg = _train_cfg(cfg)
    source = ConceptSource.from_json(tmeta.get("concepts", {"dim": model.text_dim}))
    student = teacher.copy()
    emit = Emitter(out / "loss_log.jsonl")
    try:
        finetune(student, ds, store, model, tcfg, teacher, source, on_log=emit)
    finally:
        emit.close()
    meta = {"stage": "finetune", "model": model.to_json(), "train": tcfg.to_json(), "concepts": source.to_json(),
            "object_names": list(ds.vocabulary.object_names), "relation_names": list(ds.vocabulary.base_relations),
            "teacher": str(Path(args.teacher)), "seed": cfg["seed"],
            "final_loss": emit.last["total"] if emit.last else None}
    save_checkpoint(student, out, meta)
    _say(f"fine-tuned {tcfg.steps} steps with lambda={tcfg.lam}; checkpoint in {out}")
    return 0


def _check_vocabulary(source: ConceptSource, names: Sequence[str]) -> None:
    if source.mode != "file":
        return
    from .concepts import load_embedding_file
    table = load_embedding_file(source.path)
    aliases = dict(source.aliases or ())
    missing = [n for n in names if aliases.get(n, n) not in table]
    if missing:
        raise ValidationFailure(f"vocabulary mismatch: checkpoint concept source lacks {missing}")


def _plot(report, path: Path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    ks = list(report.ks)
    for s in ("all", "base", "novel_object", "novel_relation"):
        vals = [report.r(k, s) for k in ks]
        if all(v is not None for v in vals):
            ax.plot(ks, vals, marker="o", label=s)
    ax.set_xlabel("K")
    ax.set_ylabel("Recall@K")
    ax.set_ylim(0, 1.02)
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)


def cmd_eval(args, cfg: dict) -> int:
    ds, store = _load_dataset(args.dataset)
    params, meta = _load_ckpt(args.checkpoint)
    out = _prepare_out(args.out)
    try:
        model = ModelConfig.from_json(meta["model"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ValidationFailure(f"checkpoint metadata lacks a valid model config: {exc}") from exc
    e = cfg["eval"]
    source = ConceptSource.from_json(meta.get("concepts", {"dim": model.text_dim}))
    if e["aliases"]:
        source = source.with_aliases(load_alias_file(e["aliases"]))
    v = ds.vocabulary
    _check_vocabulary(source, list(v.object_names) + list(v.relation_names))
    if ds.records and store.get(ds.records[0].features).dim != model.feat_dim:
        raise ValidationFailure("feature dimension of the dataset does not match the checkpoint model")
    slice_ = args.slice or e["slice"]
    if slice_ is not None:
        slice_ = slice_.replace("-", "_")
        if slice_ not in SLICES:
            raise ValidationFailure(f"unknown slice {slice_!r}; expected one of {SLICES}")
    ks = [int(k) for k in e["ks"]]
    setting = args.setting or "closed"
    split_manifest = Path(ds.root) / "split_manifest.json"
    if args.setting is None and split_manifest.is_file():
        setting = json.loads(split_manifest.read_text())["setting"]
    report, preds = evaluate(params, model, ds, store, ks, e["graph_constraint"], float(e["iou_threshold"]),
                             setting, source, int(cfg["workers"]))
    dump_meta = {"objectness": model.objectness, "graph_constraint": report.graph_constraint,
                 "top_n_detections": model.n_detections, "checkpoint": str(Path(args.checkpoint))}
    write_prediction_dump(out / "predictions.jsonl", preds, dump_meta)
    rj = report.to_json()
    validate_json(rj, "eval_report")
    (out / "eval_report.json").write_text(json.dumps(rj, indent=1))
    with (out / "per_image.csv").open("w", encoding="utf-8") as fh:
        fh.write("image_id,slice,k,recall\n")
        for entry in report.per_image:
            for s, by_k in entry["recall"].items():
                for k, r in by_k.items():
                    fh.write(f"{entry['image_id']},{s},{k},{'' if r is None else r}\n")
    if e["plot"]:
        _plot(report, out / "recall_vs_k.png")
    shown = [slice_] if slice_ else ["all", "base", "novel_object", "novel_relation"]
    for s in shown:
        vals = {k: report.r(k, s) for k in ks}
        if all(val is None for val in vals.values()):
            logger.warning("slice %s is empty on this dataset; recall not applicable", s)
            _say(f"{s}: n/a (empty slice)")
        else:
            _say(f"{s}: " + "  ".join(f"R@{k}={'n/a' if r is None else f'{r:.4f}'}" for k, r in vals.items()))
        print(json.dumps({"event": "recall", "slice": s, "recall": {str(k): r for k, r in vals.items()}}))
    return 0


def cmd_parse_captions(args, cfg: dict) -> int:
    nouns, relations = [], []
    if args.vocabulary:
        ds, _ = _load_dataset(args.vocabulary)
        nouns, relations = list(ds.vocabulary.object_names), list(ds.vocabulary.relation_names)
    texts = list(args.text or [])
    if args.file:
        texts += [line.strip() for line in Path(args.file).read_text(encoding="utf-8").splitlines() if line.strip()]
    if not texts:
        raise ValidationFailure("no captions given (use --text or --file)")
    for t in texts:
        trips = parse_caption(t, nouns, relations)
        print(json.dumps({"caption": t, "triplets": [list(x.key()) for x in trips]}))
    return 0


COMMANDS = {"gen": cmd_gen, "split": cmd_split, "pretrain": cmd_pretrain, "finetune": cmd_finetune,
            "eval": cmd_eval, "parse-captions": cmd_parse_captions}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ovsg", description="Open-vocabulary scene graph toolkit")
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    def add(name, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int, help="overrides the config seed")
        return p

    p = add("gen", "generate a synthetic dataset with feature fixtures")
    p.add_argument("--out", required=True)
    p = add("split", "build a base/novel split")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--setting", choices=("closed", "ovd", "ovr", "ovd_r"))
    p = add("pretrain", "caption pseudo-label pretraining")
    p.add_argument("--captions", required=True, help="dataset with captions")
    p.add_argument("--out", required=True)
    p = add("finetune", "fine-tune from a teacher checkpoint")
    p.add_argument("--dataset", required=True)
    p.add_argument("--teacher", required=True)
    p.add_argument("--out", required=True)
    p = add("eval", "predict and score SGDET recall")
    p.add_argument("--dataset", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--slice", help="report only this slice, e.g. novel-relation")
    p.add_argument("--setting", choices=("closed", "ovd", "ovr", "ovd_r"))
    p = add("parse-captions", "print caption triplets as JSON lines")
    p.add_argument("--text", action="append")
    p.add_argument("--file")
    p.add_argument("--vocabulary", help="dataset whose vocabulary seeds the noun lexicon")
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    parser = build_parser()
    try:
        args, extra = parser.parse_known_args(argv)
    except SystemExit as exc:
        return 1 if exc.code else 0
    try:
        cfg = load_config(args.config, extra)
        if args.seed is not None and "OVSG_SEED" not in os.environ:
            cfg["seed"] = args.seed
        return COMMANDS[args.command](args, cfg)
    except ValidationFailure as exc:
        _say(f"error: {exc}")
        return 1
    except EmptyPseudoLabels as exc:
        _say(f"error: {exc}")
        return 2
    except (ShapeError, NonFiniteError, RuntimeError, OSError, ValueError, KeyError) as exc:
        _say(f"error: {type(exc).__name__}: {exc}")
        return 2


if __name__ == "__main__":
    sys.exit(main())
