"""Frozen concept embeddings, prompt rendering and the text projection layer."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from types import MappingProxyType
from typing import Mapping, Optional, Sequence

import numpy as np

from .autograd import Tensor, as_tensor, matmul, ShapeError
from .types import Vocabulary

DEFAULT_TEXT_DIM = 64


def fixture_vector(name: str, dim: int = DEFAULT_TEXT_DIM) -> np.ndarray:
    """Deterministic unit vector seeded from the UTF-8 bytes of ``name``."""
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
    v = rng.standard_normal(dim)
    return v / np.linalg.norm(v)


class ConceptTable:
    """Immutable name -> unit embedding map standing in for a frozen text encoder."""

    def __init__(self, vectors: Mapping[str, np.ndarray], provenance: str = "fixture", aliases: Optional[Mapping[str, str]] = None):
        table = {}
        dim = None
        for name, vec in vectors.items():
            v = np.array(vec, dtype=np.float64)
            v.setflags(write=False)
            if dim is None:
                dim = v.shape[0]
            elif v.shape != (dim,):
                raise ValueError(f"embedding for {name!r} has shape {v.shape}, expected ({dim},)")
            if abs(np.linalg.norm(v) - 1.0) > 1e-9:
                raise ValueError(f"embedding for {name!r} is not unit norm")
            table[name] = v
        self._vectors = MappingProxyType(table)
        self._aliases = MappingProxyType(dict(aliases or {}))
        for alias, target in self._aliases.items():
            if target not in table:
                raise KeyError(f"alias {alias!r} points at unknown name {target!r}")
        self.dim = dim or 0
        self.provenance = provenance

    def __contains__(self, name: str) -> bool:
        return name in self._vectors or name in self._aliases

    def __getitem__(self, name: str) -> np.ndarray:
        if name in self._aliases:
            name = self._aliases[name]
        return self._vectors[name]

    def names(self) -> list[str]:
        return list(self._vectors) + list(self._aliases)

    def matrix(self, names: Sequence[str]) -> np.ndarray:
        missing = [n for n in names if n not in self]
        if missing:
            raise KeyError(f"names not in concept table: {missing}")
        if not names:
            return np.zeros((0, self.dim))
        return np.stack([self[n] for n in names])

    def with_aliases(self, aliases: Mapping[str, str]) -> "ConceptTable":
        merged = dict(self._aliases)
        merged.update(aliases)
        return ConceptTable(self._vectors, self.provenance, merged)

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self._vectors):
            h.update(name.encode("utf-8"))
            h.update(self._vectors[name].tobytes())
        return h.hexdigest()


class FixtureEncoder:
    """Callable embedder: any name resolves, aliases share their target's vector."""

    def __init__(self, dim: int = DEFAULT_TEXT_DIM, aliases: Optional[Mapping[str, str]] = None):
        self.dim = dim
        self.aliases = dict(aliases or {})

    def table(self, names: Sequence[str]) -> ConceptTable:
        vecs = {}
        for n in names:
            vecs[n] = fixture_vector(self.aliases.get(n, n), self.dim)
        return ConceptTable(vecs, "fixture")


def embed_concepts(names: Sequence[str], mode: str = "fixture", path=None, dim: int = DEFAULT_TEXT_DIM,
                   aliases: Optional[Mapping[str, str]] = None) -> ConceptTable:
    """Embed concept names.

    ``fixture`` mode hashes each name to a seeded unit vector; ``file`` mode
    reads the embedding file format (``<path>.json`` manifest + raw blob).
    Registered aliases resolve to their canonical name's vector.
    """
    if not names:
        raise ValueError("no names to embed")
    aliases = dict(aliases or {})
    if mode == "fixture":
        table = {n: fixture_vector(aliases.get(n, n), dim) for n in names}
        return ConceptTable(table, "fixture")
    if mode == "file":
        if path is None:
            raise ValueError("file mode needs an embedding file path")
        loaded = load_embedding_file(path)
        if dim and loaded.dim != dim:
            raise ValueError(f"embedding file dim {loaded.dim} != requested {dim}")
        missing = [n for n in names if aliases.get(n, n) not in loaded]
        if missing:
            raise KeyError(f"embedding file lacks names: {missing}")
        return ConceptTable({n: loaded[aliases.get(n, n)] for n in names}, "file")
    raise ValueError(f"unknown embedding mode {mode!r}")


def save_embedding_file(table: ConceptTable, path) -> Path:
    path = Path(path)
    names = [n for n in table.names() if n in table._vectors]
    blob = np.stack([table[n] for n in names]).astype("<f8").tobytes()
    path.with_suffix(".bin").write_bytes(blob)
    path.with_suffix(".json").write_text(json.dumps({"names": names, "dim": table.dim, "blob": path.with_suffix(".bin").name}))
    return path.with_suffix(".json")


def load_embedding_file(path) -> ConceptTable:
    path = Path(path).with_suffix(".json")
    manifest = json.loads(path.read_text(encoding="utf-8"))
    names, dim = manifest["names"], int(manifest["dim"])
    raw = (path.parent / manifest.get("blob", path.with_suffix(".bin").name)).read_bytes()
    if len(raw) != 8 * len(names) * dim:
        raise ValueError(f"embedding blob holds {len(raw)} bytes, expected {8 * len(names) * dim}")
    mat = np.frombuffer(raw, dtype="<f8").reshape(len(names), dim)
    mat = mat / np.linalg.norm(mat, axis=1, keepdims=True)
    return ConceptTable(dict(zip(names, mat)), "file")


def load_alias_file(path) -> dict[str, str]:
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(data, dict):
        raise ValueError("alias file must be a JSON object alias -> canonical name")
    return {str(k): str(v) for k, v in data.items()}


# prompts -------------------------------------------------------------------


@dataclass(frozen=True)
class Prompt:
    text: str
    spans: Mapping[str, tuple[int, int]]
    separators: tuple[int, ...]
    object_names: tuple[str, ...] = ()
    relation_names: tuple[str, ...] = ()
    n_tokens: int = 0


def build_prompt(v: Vocabulary, sample: Optional[Sequence[str]] = None, pad_to: Optional[int] = None) -> Prompt:
    """Render ``[CLS] o1. o2. [SEP] r1. r2. [SEP]`` with character spans per name.

    ``sample`` restricts the prompt to a subset of names (objects and
    relations alike). Tokens are whitespace-separated; names count one token
    per word plus one for the trailing period. ``pad_to`` appends ``[PAD]``
    tokens until that token count is reached.
    """
    objects = list(v.object_names)
    relations = list(v.relation_names)
    if sample is not None:
        keep = set(sample)
        objects = [n for n in objects if n in keep]
        relations = [n for n in relations if n in keep]
        if not objects and not relations:
            raise ValueError("sampled subset is empty")
    if not objects and not relations:
        raise ValueError("vocabulary is empty")

    parts: list[str] = ["[CLS]"]
    spans: dict[str, tuple[int, int]] = {}
    separators = []
    pos = len("[CLS]")

    def emit(name: str):
        nonlocal pos
        start = pos + 1
        parts.append(name + ".")
        spans[name] = (start, start + len(name))
        pos = start + len(name) + 1

    def sep():
        nonlocal pos
        parts.append("[SEP]")
        separators.append(pos + 1)
        pos += 1 + len("[SEP]")

    for n in objects:
        emit(n)
    sep()
    for n in relations:
        emit(n)
    sep()
    n_tokens = sum(len(p.split()) for p in parts)
    if pad_to is not None and pad_to > n_tokens:
        parts.extend(["[PAD]"] * (pad_to - n_tokens))
        n_tokens = pad_to
    return Prompt(" ".join(parts), MappingProxyType(spans), tuple(separators), tuple(objects), tuple(relations), n_tokens)


# text projection -------------------------------------------------------------


@dataclass
class TextProjection:
    """One fully connected layer mapping text space (d_t) into edge space (d_e)."""

    weight: np.ndarray
    bias: np.ndarray = field(default=None)

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        if self.bias is None:
            self.bias = np.zeros(self.weight.shape[1])
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.bias.shape != (self.weight.shape[1],):
            raise ShapeError("bias length must equal projection output dim")

    @property
    def out_dim(self) -> int:
        return self.weight.shape[1]


def project_text(w, weight, bias) -> Tensor:
    """Affine map ``w @ weight + bias``; rows of ``w`` are concept embeddings."""
    w = as_tensor(w)
    weight = as_tensor(weight)
    single = w.data.ndim == 1
    if single:
        w = Tensor(w.data[None, :]) if not w.requires_grad else w[None, :]
    if w.shape[1] != weight.shape[0]:
        raise ShapeError(f"text embedding dim {w.shape[1]} != projection input dim {weight.shape[0]}")
    out = matmul(w, weight) + bias
    return out[0] if single else out


@dataclass(frozen=True)
class ConceptSource:
    """Where concept embeddings come from; serialized into checkpoints."""

    mode: str = "fixture"
    path: Optional[str] = None
    dim: int = DEFAULT_TEXT_DIM
    aliases: Optional[tuple] = None

    def __post_init__(self):
        if self.mode not in ("fixture", "file"):
            raise ValueError(f"unknown embedding mode {self.mode!r}")
        if self.mode == "file" and not self.path:
            raise ValueError("file mode needs an embedding file path")

    def table(self, names: Sequence[str]) -> ConceptTable:
        return embed_concepts(list(names), self.mode, self.path, self.dim, dict(self.aliases or ()))

    def with_aliases(self, aliases: Mapping[str, str]) -> "ConceptSource":
        merged = dict(self.aliases or ())
        merged.update(aliases)
        return ConceptSource(self.mode, self.path, self.dim, tuple(sorted(merged.items())))

    def to_json(self) -> dict:
        return {"mode": self.mode, "path": self.path, "dim": self.dim, "aliases": dict(self.aliases or ())}

    @classmethod
    def from_json(cls, d: dict) -> "ConceptSource":
        return cls(d.get("mode", "fixture"), d.get("path"), int(d.get("dim", DEFAULT_TEXT_DIM)),
                   tuple(sorted((d.get("aliases") or {}).items())) or None)
