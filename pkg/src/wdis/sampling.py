"""Batch construction for joint, product-of-marginals, and interpolated samples."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

MISSING = -1


def one_hot(labels: np.ndarray, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError(f"label index out of range for {n_classes} classes")
    out = np.zeros((labels.shape[0], n_classes))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


@dataclass
class JointBatch:
    features: np.ndarray
    labels: np.ndarray  # one-hot rows
    origin: str = "joint"  # or "product"

    def __post_init__(self):
        if self.features.shape[0] != self.labels.shape[0]:
            raise ValueError("features and labels must have equal row counts")
        if self.origin not in ("joint", "product"):
            raise ValueError(f"unknown origin {self.origin!r}")

    def __len__(self):
        return self.features.shape[0]

    def stacked(self) -> np.ndarray:
        return np.concatenate([self.features, self.labels], axis=1)


@dataclass
class InterpolatedBatch:
    features: np.ndarray
    labels: np.ndarray
    eps: np.ndarray

    def stacked(self) -> np.ndarray:
        return np.concatenate([self.features, self.labels], axis=1)


def sample_joint(n_examples: int, batch_size: int, rng: np.random.Generator, replace: bool = True) -> np.ndarray:
    """Row indices of a batch drawn uniformly from a dataset of ``n_examples``."""
    if n_examples <= 0:
        raise ValueError("cannot sample from an empty dataset")
    if not replace and batch_size > n_examples:
        raise ValueError("batch larger than dataset without replacement")
    if replace:
        return rng.integers(0, n_examples, size=batch_size)
    return rng.permutation(n_examples)[:batch_size]


def shuffle_to_product(labels: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Permute label rows uniformly so they become independent of the features."""
    return labels[rng.permutation(labels.shape[0])]


def product_batch(joint: JointBatch, rng: np.random.Generator) -> JointBatch:
    return JointBatch(joint.features, shuffle_to_product(joint.labels, rng), origin="product")


def make_interpolates(
    joint: JointBatch,
    product: JointBatch,
    rng: np.random.Generator,
    eps: np.ndarray | None = None,
) -> InterpolatedBatch:
    """Mix product and joint rows; feature and label of a row share one epsilon."""
    if len(joint) != len(product):
        raise ValueError(f"row counts differ: joint {len(joint)} vs product {len(product)}")
    if eps is None:
        eps = rng.random(len(joint))
    eps = np.asarray(eps, dtype=np.float64).reshape(-1)
    e = eps[:, None]
    feats = e * product.features + (1.0 - e) * joint.features
    labels = e * product.labels + (1.0 - e) * joint.labels
    return InterpolatedBatch(feats, labels, eps)
