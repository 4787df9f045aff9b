"""Frozen visual feature fixtures and their on-disk store."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np


@dataclass(frozen=True)
class FeatureMap:
    """Per-image token grid: ``tokens`` (T x d_f) and positional encodings (T x d_p)."""

    tokens: np.ndarray
    pos: np.ndarray

    def __post_init__(self):
        t = np.array(self.tokens, dtype=np.float64)
        p = np.array(self.pos, dtype=np.float64)
        if t.ndim != 2 or p.ndim != 2 or t.shape[0] != p.shape[0]:
            raise ValueError(f"feature map shapes {t.shape} / {p.shape} do not conform")
        if not (np.all(np.isfinite(t)) and np.all(np.isfinite(p))):
            raise ValueError("feature map contains non-finite values")
        t.setflags(write=False)
        p.setflags(write=False)
        object.__setattr__(self, "tokens", t)
        object.__setattr__(self, "pos", p)

    @property
    def n_tokens(self) -> int:
        return self.tokens.shape[0]

    @property
    def dim(self) -> int:
        return self.tokens.shape[1]

    @property
    def pos_dim(self) -> int:
        return self.pos.shape[1]

    def permuted(self, order) -> "FeatureMap":
        order = np.asarray(order)
        return FeatureMap(self.tokens[order], self.pos[order])


def positional_encoding(centers: np.ndarray, n_freq: int = 4) -> np.ndarray:
    """Sinusoidal encoding of (cx, cy) pairs: 4 * n_freq values per row."""
    c = np.atleast_2d(np.asarray(centers, dtype=np.float64))
    freqs = np.pi * (2.0 ** np.arange(n_freq))
    ang = c[:, :, None] * freqs[None, None, :]
    return np.concatenate([np.sin(ang).reshape(len(c), -1), np.cos(ang).reshape(len(c), -1)], axis=1)


FEATURE_INDEX = "features.json"
FEATURE_BLOB = "features.bin"


def write_feature_store(directory, maps: dict[str, FeatureMap]) -> dict[str, str]:
    """Write all maps to one little-endian float64 blob; return image_id -> ref."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    index = {}
    chunks = []
    offset = 0
    for image_id, fm in maps.items():
        raw = np.concatenate([fm.tokens.ravel(), fm.pos.ravel()]).astype("<f8").tobytes()
        index[image_id] = {"offset": offset, "n_tokens": fm.n_tokens, "dim": fm.dim, "pos_dim": fm.pos_dim}
        chunks.append(raw)
        offset += len(raw)
    (directory / FEATURE_BLOB).write_bytes(b"".join(chunks))
    (directory / FEATURE_INDEX).write_text(json.dumps({"blob": FEATURE_BLOB, "maps": index}, indent=0))
    return {k: f"{FEATURE_BLOB}#{k}" for k in maps}


class FeatureStore:
    """Lazy reader for feature refs of the form ``features.bin#<image_id>``."""

    def __init__(self, directory):
        self.directory = Path(directory)
        meta = json.loads((self.directory / FEATURE_INDEX).read_text())
        self._index = meta["maps"]
        self._blob = (self.directory / meta.get("blob", FEATURE_BLOB)).read_bytes()
        self._cache: dict[str, FeatureMap] = {}

    def __contains__(self, ref: str) -> bool:
        return ref.split("#", 1)[-1] in self._index

    def get(self, ref: str) -> FeatureMap:
        key = ref.split("#", 1)[-1]
        if key not in self._cache:
            e = self._index[key]
            n, d, dp = e["n_tokens"], e["dim"], e["pos_dim"]
            count = n * (d + dp)
            vals = np.frombuffer(self._blob, dtype="<f8", count=count, offset=e["offset"])
            self._cache[key] = FeatureMap(vals[: n * d].reshape(n, d), vals[n * d:].reshape(n, dp))
        return self._cache[key]
