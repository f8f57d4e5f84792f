"""Parameterized networks: partitioned extractor, linear heads, label-conditioned critics.

Parameters live in a flat :class:`ParamStore` keyed by dotted names
(``extractor.W0``, ``head_fg.b``, ``critic_bg.W2`` ...). Every network has two
forward paths: a numpy path for evaluation and a tape path for training. Both
use the same arithmetic (``x @ W + ones @ b``) so their outputs agree bit for
bit.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .autodiff import Tape, Var

GROUPS = ("extractor", "head_fg", "head_bg", "critic_fg", "critic_bg")


@dataclass(frozen=True)
class Architecture:
    """Layer sizes shared by every network in a run."""

    d_x: int = 32
    hidden: tuple[int, ...] = (64, 64)
    d_z: int = 24
    split: int = 16
    n_fg: int = 16
    n_bg: int = 8
    critic_hidden: tuple[int, ...] = (64, 64)
    slope: float = 0.2

    def __post_init__(self):
        for name in ("d_x", "d_z", "n_fg", "n_bg"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if any(h <= 0 for h in self.hidden + self.critic_hidden):
            raise ValueError("layer widths must be positive")
        if not 0 < self.split < self.d_z:
            raise ValueError(f"split must satisfy 0 < split < d_z, got {self.split} (d_z={self.d_z})")
        if not 0.0 < self.slope < 1.0:
            raise ValueError("leaky_relu slope must lie in (0, 1)")

    @property
    def d_fg(self) -> int:
        return self.split

    @property
    def d_bg(self) -> int:
        return self.d_z - self.split

    def layer_sizes(self, group: str) -> list[int]:
        if group == "extractor":
            return [self.d_x, *self.hidden, self.d_z]
        if group == "head_fg":
            return [self.d_fg, self.n_fg]
        if group == "head_bg":
            return [self.d_bg, self.n_bg]
        if group == "critic_fg":
            # D_fg sees (z_fg, one-hot l_bg)
            return [self.d_fg + self.n_bg, *self.critic_hidden, 1]
        if group == "critic_bg":
            return [self.d_bg + self.n_fg, *self.critic_hidden, 1]
        raise KeyError(group)


@dataclass
class ParamStore:
    """Named float64 parameter arrays with a version counter."""

    arrays: dict[str, np.ndarray] = field(default_factory=dict)
    version: int = 0

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    def __contains__(self, name: str) -> bool:
        return name in self.arrays

    def __iter__(self):
        return iter(self.arrays)

    def names(self, group: str | None = None) -> list[str]:
        if group is None:
            return list(self.arrays)
        return [n for n in self.arrays if n.split(".", 1)[0] == group]

    def group(self, group: str) -> dict[str, np.ndarray]:
        return {n: self.arrays[n] for n in self.names(group)}

    def update(self, new_values: Mapping[str, np.ndarray]) -> None:
        for name, value in new_values.items():
            if self.arrays[name].shape != value.shape:
                raise ValueError(f"shape of {name} is immutable")
            self.arrays[name] = value
        self.version += 1

    def copy(self) -> "ParamStore":
        return ParamStore({k: v.copy() for k, v in self.arrays.items()}, self.version)

    def digest(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.arrays):
            arr = np.ascontiguousarray(self.arrays[name], dtype="<f8")
            h.update(name.encode())
            h.update(repr(arr.shape).encode())
            h.update(arr.tobytes())
        return h.hexdigest()

    def equals(self, other: "ParamStore") -> bool:
        if set(self.arrays) != set(other.arrays):
            return False
        return all(
            self.arrays[k].shape == other.arrays[k].shape
            and self.arrays[k].tobytes() == other.arrays[k].tobytes()
            for k in self.arrays
        )


def init_params(arch: Architecture, seed: int) -> ParamStore:
    """Kaiming-style uniform weights, zero biases; deterministic in ``seed``."""
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    gain = np.sqrt(2.0 / (1.0 + arch.slope**2))
    store = ParamStore()
    for group in GROUPS:
        sizes = arch.layer_sizes(group)
        for k, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            bound = gain * np.sqrt(3.0 / fan_in)
            suffix = "" if group.startswith("head") else str(k)
            store.arrays[f"{group}.W{suffix}"] = rng.uniform(-bound, bound, (fan_in, fan_out))
            store.arrays[f"{group}.b{suffix}"] = np.zeros((1, fan_out))
    return store


def _layer_names(params: Mapping[str, np.ndarray] | ParamStore, group: str):
    arrays = params.arrays if isinstance(params, ParamStore) else params
    if f"{group}.W" in arrays:
        return [(f"{group}.W", f"{group}.b")]
    names = []
    k = 0
    while f"{group}.W{k}" in arrays:
        names.append((f"{group}.W{k}", f"{group}.b{k}"))
        k += 1
    if not names:
        raise KeyError(f"no parameters for group {group!r}")
    return names


def _arrays(params):
    return params.arrays if isinstance(params, ParamStore) else params


# --------------------------------------------------------------------------
# numpy forward paths


def mlp_forward(params, group: str, x: np.ndarray, slope: float) -> np.ndarray:
    """Leaky-ReLU MLP; the last layer is linear."""
    arrays = _arrays(params)
    layers = _layer_names(arrays, group)
    ones = np.ones((x.shape[0], 1))
    h = x
    for k, (wn, bn) in enumerate(layers):
        h = h @ arrays[wn] + ones @ arrays[bn]
        if k < len(layers) - 1:
            h = np.maximum(h, slope * h)
    return h


def extract(params, x: np.ndarray, arch: Architecture) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(z_fg, z_bg)`` for a batch of observations."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != arch.d_x:
        raise ValueError(f"expected observations of width {arch.d_x}, got shape {x.shape}")
    z = mlp_forward(params, "extractor", x, arch.slope)
    return z[:, : arch.split], z[:, arch.split :]


def head_logits(params, group: str, z: np.ndarray) -> np.ndarray:
    arrays = _arrays(params)
    ones = np.ones((z.shape[0], 1))
    return z @ arrays[f"{group}.W"] + ones @ arrays[f"{group}.b"]


def check_label_simplex(labels: np.ndarray, tol: float = 1e-9) -> None:
    labels = np.asarray(labels, dtype=np.float64)
    if labels.ndim != 2:
        raise ValueError("labels must be a 2-D array of per-row distributions")
    if (labels < -tol).any() or (labels > 1.0 + tol).any():
        raise ValueError("label entries must lie in [0, 1]")
    if labels.shape[0] and np.abs(labels.sum(axis=1) - 1.0).max() > tol:
        raise ValueError("label rows must sum to 1")


def critic_score(params, group: str, features: np.ndarray, labels: np.ndarray, slope: float) -> np.ndarray:
    """Scalar critic output per row, shape ``(n,)``."""
    check_label_simplex(labels)
    inp = np.concatenate([features, labels], axis=1)
    return mlp_forward(params, group, inp, slope)[:, 0]


# --------------------------------------------------------------------------
# tape forward paths


def tape_params(tape: Tape, params, groups, trainable: bool = True) -> dict[str, Var]:
    """Put the named parameter groups on ``tape`` as params or constants."""
    arrays = _arrays(params)
    out = {}
    for name, value in arrays.items():
        if name.split(".", 1)[0] in groups:
            out[name] = tape.param(value, name) if trainable else tape.constant(value, name)
    return out


def tape_mlp(tape: Tape, pvars: Mapping[str, Var], group: str, x: Var, slope: float) -> Var:
    layers = _layer_names({k: None for k in pvars}, group)
    ones = tape.constant(np.ones((x.shape[0], 1)))
    h = x
    for k, (wn, bn) in enumerate(layers):
        h = tape.matmul(h, pvars[wn]) + tape.matmul(ones, pvars[bn])
        if k < len(layers) - 1:
            h = tape.leaky_relu(h, slope)
    return h


def tape_extract(tape: Tape, pvars, x: Var, arch: Architecture) -> tuple[Var, Var]:
    z = tape_mlp(tape, pvars, "extractor", x, arch.slope)
    return tape.slice(z, 0, arch.split), tape.slice(z, arch.split, arch.d_z)


def tape_head(tape: Tape, pvars, group: str, z: Var) -> Var:
    ones = tape.constant(np.ones((z.shape[0], 1)))
    return tape.matmul(z, pvars[f"{group}.W"]) + tape.matmul(ones, pvars[f"{group}.b"])


def tape_critic(tape: Tape, pvars, group: str, features: Var, labels: Var, slope: float) -> Var:
    inp = tape.concat([features, labels])
    return tape_mlp(tape, pvars, group, inp, slope)
