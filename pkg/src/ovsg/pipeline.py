"""Stage orchestration: detector warm-up, caption pseudo-labelling,
relation pretraining, fine-tuning with distillation, and evaluation."""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Callable, Optional, Sequence

import numpy as np

from .autograd import ParamStore
from .benchmark import DEFAULT_KS, EvalReport, evaluate_sgdet
from .concepts import ConceptSource, ConceptTable
from .losses import TrainConfig
from .model import ModelConfig, forward_nodes, init_params
from .train import Teacher, Vocab, predict_dataset, train
from .types import Dataset, Record, names_in
from .weak import merge_pseudo_labels, parse_caption, ground_triplets

logger = logging.getLogger(__name__)

Log = Optional[Callable[[dict], None]]


class EmptyPseudoLabels(RuntimeError):
    pass


def _source(source: Optional[ConceptSource], cfg: ModelConfig) -> ConceptSource:
    source = source or ConceptSource(dim=cfg.text_dim)
    if source.dim != cfg.text_dim:
        raise ValueError(f"concept dim {source.dim} != model text dim {cfg.text_dim}")
    return source


def concept_tables(source: ConceptSource, object_names: Sequence[str],
                   relation_names: Sequence[str]) -> tuple[ConceptTable, ConceptTable]:
    return source.table(list(object_names)), source.table(list(relation_names))


def _tagged(on_log: Log, stage: str) -> Log:
    if on_log is None:
        return None
    return lambda entry: on_log({"stage": stage, **entry})


def train_detector(ds: Dataset, features, cfg: ModelConfig, tcfg: TrainConfig, params: Optional[ParamStore] = None,
                   source: Optional[ConceptSource] = None, on_log: Log = None) -> ParamStore:
    """Fit decoder and box head on annotated nodes only (no relation term)."""
    params = params if params is not None else init_params(cfg, tcfg.seed)
    objs = _source(source, cfg).table(list(ds.vocabulary.object_names))
    vocab = Vocab(list(ds.vocabulary.object_names), [], objs.matrix(list(ds.vocabulary.object_names)),
                  np.zeros((0, cfg.text_dim)))
    train(params, ds.records, features, cfg, replace(tcfg, w_rel=0.0, lam=0.0), vocab,
          on_log=_tagged(on_log, "detector"))
    return params


@dataclass
class PseudoLabelStats:
    n_captions: int = 0
    n_parsed_triplets: int = 0
    n_kept_triplets: int = 0
    n_images_kept: int = 0


def pseudo_label(params: ParamStore, cfg: ModelConfig, ds: Dataset, features, threshold: float = 0.25,
                 score_mode: str = "matched",
                 source: Optional[ConceptSource] = None) -> tuple[list[Record], PseudoLabelStats]:
    """Parse every caption, ground its phrases on the detector's nodes, and gate by node score."""
    nouns = list(ds.vocabulary.object_names)
    stats = PseudoLabelStats()
    out = []
    objs = _source(source, cfg).table(nouns)
    vocab_matrix = objs.matrix(nouns)
    for rec in ds.records:
        if not rec.caption:
            continue
        stats.n_captions += 1
        triplets = parse_caption(rec.caption, nouns)
        stats.n_parsed_triplets += len(triplets)
        if not triplets:
            continue
        fm = features.get(rec.features) if hasattr(features, "get") else features[rec.features]
        nodes = forward_nodes(fm, params, cfg, vocab_matrix)
        label = ground_triplets(triplets, nodes.features.data, nodes.boxes.data, objs, threshold,
                                score_mode=score_mode, image_id=rec.image_id, vocab_matrix=vocab_matrix)
        label = merge_pseudo_labels([label])
        stats.n_kept_triplets += len(label.graph.edges)
        if label.graph.edges:
            out.append(Record(rec.image_id, rec.features, label.graph, rec.caption, provenance="caption"))
    stats.n_images_kept = len(out)
    return out, stats


def pretrain(ds: Dataset, features, cfg: ModelConfig, tcfg: TrainConfig, detector_steps: int,
             threshold: float = 0.25, score_mode: str = "matched", source: Optional[ConceptSource] = None,
             on_log: Log = None) -> tuple[ParamStore, list[Record], PseudoLabelStats]:
    """Detector warm-up on annotated nodes, then relation training on caption pseudo-labels."""
    source = _source(source, cfg)
    params = train_detector(ds, features, cfg, replace(tcfg, steps=detector_steps), source=source, on_log=on_log)
    records, stats = pseudo_label(params, cfg, ds, features, threshold, score_mode, source)
    if not records:
        raise EmptyPseudoLabels("empty pseudo-label set: no caption triplet survived the grounding gate")
    obj_names, rel_names = names_in(r.graph for r in records)
    obj_names = list(dict.fromkeys(list(ds.vocabulary.object_names) + sorted(obj_names)))
    objs, rels = concept_tables(source, obj_names, sorted(rel_names))
    vocab = Vocab.build(objs, rels, obj_names, sorted(rel_names))
    train(params, records, features, cfg, replace(tcfg, lam=0.0), vocab, on_log=_tagged(on_log, "pretrain"))
    return params, records, stats


def finetune(params: ParamStore, train_ds: Dataset, features, cfg: ModelConfig, tcfg: TrainConfig,
             teacher_params: Optional[ParamStore] = None, source: Optional[ConceptSource] = None,
             on_log: Log = None) -> ParamStore:
    """Train on base annotations; with ``lam > 0`` a frozen teacher anchors background edge features."""
    v = train_ds.vocabulary
    objs, rels = concept_tables(_source(source, cfg), v.object_names, v.base_relations)
    vocab = Vocab.build(objs, rels, v.object_names, v.base_relations)
    teacher = None
    if tcfg.lam > 0:
        if teacher_params is None:
            raise ValueError("distillation requires teacher parameters")
        teacher = Teacher(teacher_params, cfg, vocab.obj_matrix)
    train(params, train_ds.records, features, cfg, tcfg, vocab, teacher, on_log=_tagged(on_log, "finetune"))
    return params


def evaluate(params: ParamStore, cfg: ModelConfig, eval_ds: Dataset, features, ks: Sequence[int] = DEFAULT_KS,
             graph_constraint: Optional[bool] = None, iou_threshold: float = 0.5,
             setting: str = "closed", source: Optional[ConceptSource] = None,
             workers: int = 1) -> tuple[EvalReport, dict[str, list]]:
    """Predict over the full vocabulary and score SGDET recall."""
    v = eval_ds.vocabulary
    objs, rels = concept_tables(_source(source, cfg), v.object_names, v.relation_names)
    gc = cfg.graph_constraint if graph_constraint is None else graph_constraint
    preds = predict_dataset(params, eval_ds.records, features, cfg, v, objs, rels, gc, workers)
    dumped = {k: [t.to_json() for t in ts] for k, ts in preds.items()}
    report = evaluate_sgdet(dumped, eval_ds, iou_threshold, ks, gc, setting)
    return report, preds
