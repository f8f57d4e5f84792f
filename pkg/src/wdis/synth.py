"""Synthetic factored data: observations mixed from a foreground and a background factor.

``x = U[f] + V[b] + gamma * (U[f] * V[b]) + sigma * noise`` with fixed random
unit-norm dictionaries ``U`` (foreground) and ``V`` (background). The joint law
of ``(f, b)`` is a :class:`CorrelationSpec` table: unbiased, perfectly
correlated through a bijection, or its anti-correlated complement.
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .sampling import MISSING

SENTINEL = 0xFFFFFFFF


@dataclass(frozen=True)
class FactorSpec:
    n_fg: int = 16
    n_bg: int = 8
    d_x: int = 32
    gamma: float = 0.5
    sigma: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.n_fg < 1 or self.n_bg < 1 or self.d_x < 1:
            raise ValueError("class counts and d_x must be positive")
        if self.sigma < 0:
            raise ValueError("sigma must be non-negative")

    def dictionaries(self) -> tuple[np.ndarray, np.ndarray]:
        rng = np.random.default_rng(np.random.SeedSequence(self.seed, spawn_key=(7,)))
        u = rng.normal(size=(self.n_fg, self.d_x))
        v = rng.normal(size=(self.n_bg, self.d_x))
        u /= np.linalg.norm(u, axis=1, keepdims=True)
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        return u, v

    def identifiable(self) -> bool:
        """True when the rows of U and V together are linearly independent."""
        u, v = self.dictionaries()
        stacked = np.vstack([u, v])
        return np.linalg.matrix_rank(stacked) == stacked.shape[0]

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class CorrelationSpec:
    """Joint probability table over (foreground, background) label pairs."""

    table: np.ndarray
    name: str = "custom"
    pairing: dict[int, int] | None = None

    def __post_init__(self):
        self.table = np.asarray(self.table, dtype=np.float64)
        if self.table.ndim != 2:
            raise ValueError("joint table must be 2-D")
        if (self.table < 0).any():
            raise ValueError("joint table entries must be non-negative")
        if abs(self.table.sum() - 1.0) > 1e-12:
            raise ValueError("joint table must sum to 1")

    @property
    def support(self) -> set[tuple[int, int]]:
        return {(int(f), int(b)) for f, b in zip(*np.nonzero(self.table))}

    @classmethod
    def unbiased(cls, n_fg: int, n_bg: int) -> "CorrelationSpec":
        return cls(np.full((n_fg, n_bg), 1.0 / (n_fg * n_bg)), "unbiased")

    @classmethod
    def corr(cls, pairing: dict[int, int], n_fg: int, n_bg: int) -> "CorrelationSpec":
        _check_bijection(pairing, n_fg, n_bg)
        table = np.zeros((n_fg, n_bg))
        for f, b in pairing.items():
            table[f, b] = 1.0
        return cls(table / table.sum(), "corr", dict(pairing))

    @classmethod
    def anticorr(cls, pairing: dict[int, int], n_fg: int, n_bg: int) -> "CorrelationSpec":
        """Every pair over the paired foreground classes except the paired one."""
        _check_bijection(pairing, n_fg, n_bg)
        table = np.zeros((n_fg, n_bg))
        for f, b in pairing.items():
            table[f, :] = 1.0
            table[f, b] = 0.0
        return cls(table / table.sum(), "anticorr", dict(pairing))

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "table": self.table.tolist(),
            "pairing": None if self.pairing is None else {str(k): v for k, v in self.pairing.items()},
        }


def _check_bijection(pairing: dict[int, int], n_fg: int, n_bg: int) -> None:
    if not pairing:
        raise ValueError("pairing is empty")
    fgs, bgs = list(pairing), list(pairing.values())
    if len(set(bgs)) != len(bgs):
        raise ValueError("pairing is not a bijection: background classes repeat")
    if min(fgs) < 0 or max(fgs) >= n_fg or min(bgs) < 0 or max(bgs) >= n_bg:
        raise ValueError("pairing refers to out-of-range classes")


def default_pairing(n_fg: int, n_bg: int) -> dict[int, int]:
    """``f -> f mod n_bg`` on the first ``min(n_fg, n_bg)`` foreground classes."""
    return {f: f % n_bg for f in range(min(n_fg, n_bg))}


@dataclass
class SynthDataset:
    x: np.ndarray
    fg: np.ndarray
    bg: np.ndarray  # MISSING where withheld
    provenance: dict = field(default_factory=dict)

    def __len__(self):
        return self.x.shape[0]

    @property
    def labels(self) -> np.ndarray:
        return np.stack([self.fg, self.bg], axis=1)

    def save(self, path: str | os.PathLike) -> None:
        """Columnar little-endian binary plus a JSON sidecar (``<path>.json``)."""
        path = Path(path)
        n, d = self.x.shape
        bg = np.where(self.bg == MISSING, SENTINEL, self.bg).astype("<u4")
        payload = (
            np.ascontiguousarray(self.x, dtype="<f8").tobytes()
            + self.fg.astype("<u4").tobytes()
            + bg.tobytes()
        )
        meta = {
            "format": "wdis-dataset",
            "version": 1,
            "n": n,
            "d_x": d,
            "sha256": hashlib.sha256(payload).hexdigest(),
            "provenance": self.provenance,
        }
        _atomic_write(path, payload)
        _atomic_write(Path(str(path) + ".json"), json.dumps(meta, indent=2, sort_keys=True).encode())

    @classmethod
    def load(cls, path: str | os.PathLike) -> "SynthDataset":
        path = Path(path)
        meta = json.loads(Path(str(path) + ".json").read_text())
        payload = path.read_bytes()
        if hashlib.sha256(payload).hexdigest() != meta["sha256"]:
            raise ValueError(f"dataset checksum mismatch for {path}")
        n, d = meta["n"], meta["d_x"]
        x = np.frombuffer(payload, dtype="<f8", count=n * d).reshape(n, d).astype(np.float64)
        off = 8 * n * d
        fg = np.frombuffer(payload, dtype="<u4", count=n, offset=off).astype(np.int64)
        bg = np.frombuffer(payload, dtype="<u4", count=n, offset=off + 4 * n).astype(np.int64)
        bg = np.where(bg == SENTINEL, MISSING, bg)
        return cls(x, fg, bg, meta.get("provenance", {}))


def _atomic_write(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    with os.fdopen(fd, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def sample_example(spec: FactorSpec, f: int, b: int, rng: np.random.Generator, dicts=None) -> np.ndarray:
    if not 0 <= f < spec.n_fg or not 0 <= b < spec.n_bg:
        raise ValueError(f"labels ({f}, {b}) out of range")
    u, v = dicts if dicts is not None else spec.dictionaries()
    return _mix(u[f], v[b], spec, rng.normal(size=spec.d_x))


def _mix(u, v, spec: FactorSpec, noise):
    return u + v + spec.gamma * (u * v) + spec.sigma * noise


def make_dataset(
    spec: FactorSpec,
    corr: CorrelationSpec,
    n: int,
    rng: np.random.Generator,
    missing_bg_fraction: float = 0.0,
) -> SynthDataset:
    """Draw ``n`` i.i.d. labelled observations with label pairs from ``corr``."""
    if n <= 0:
        raise ValueError("n must be positive")
    if corr.table.shape != (spec.n_fg, spec.n_bg):
        raise ValueError(f"joint table shape {corr.table.shape} does not match ({spec.n_fg}, {spec.n_bg})")
    flat = rng.choice(corr.table.size, size=n, p=corr.table.ravel())
    fg, bg = np.divmod(flat, spec.n_bg)
    u, v = spec.dictionaries()
    noise = rng.normal(size=(n, spec.d_x))
    x = _mix(u[fg], v[bg], spec, noise)
    if missing_bg_fraction > 0:
        withheld = rng.random(n) < missing_bg_fraction
        bg = np.where(withheld, MISSING, bg)
    provenance = {
        "factor_spec": spec.to_dict(),
        "correlation": corr.to_dict(),
        "n": n,
        "missing_bg_fraction": missing_bg_fraction,
    }
    return SynthDataset(x, fg.astype(np.int64), bg.astype(np.int64), provenance)


def bayes_rates(corr: CorrelationSpec) -> dict[str, float]:
    """Best accuracy for predicting one label from the other, from the joint table alone."""
    p = corr.table
    return {
        "bg_from_fg": float(p.max(axis=1).sum()),
        "fg_from_bg": float(p.max(axis=0).sum()),
        "bg_chance": float(p.sum(axis=0).max()),
        "fg_chance": float(p.sum(axis=1).max()),
    }
