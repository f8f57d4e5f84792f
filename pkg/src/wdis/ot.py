"""Ground truth for the dual machinery: exact W1, dual gaps, and a binned MI diagnostic."""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment, linprog
from scipy.spatial.distance import cdist

from . import models
from .autodiff import Tape, grad
from .objectives import critic_loss
from .sampling import JointBatch, make_interpolates
from .trainer import AdamState, adam_step

MAX_SUPPORT = 64


@dataclass
class DiscreteDistribution:
    points: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        self.points = np.atleast_2d(np.asarray(self.points, dtype=np.float64))
        self.weights = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        if self.points.shape[0] != self.weights.shape[0]:
            raise ValueError("one weight per support point is required")
        if (self.weights < 0).any():
            raise ValueError("weights must be non-negative")
        if abs(self.weights.sum() - 1.0) > 1e-12:
            raise ValueError("weights must sum to 1")
        if not np.isfinite(self.points).all():
            raise ValueError("support points must be finite")

    @classmethod
    def uniform(cls, points) -> "DiscreteDistribution":
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        return cls(points, np.full(points.shape[0], 1.0 / points.shape[0]))

    def __len__(self):
        return self.points.shape[0]

    @property
    def is_uniform(self) -> bool:
        return bool(np.all(self.weights == self.weights[0]))


def _cost(p: DiscreteDistribution, q: DiscreteDistribution) -> np.ndarray:
    if p.points.shape[1] != q.points.shape[1]:
        raise ValueError("support points live in different dimensions")
    return cdist(p.points, q.points)


def _assignment_cost(cost: np.ndarray, perm) -> float:
    n = cost.shape[0]
    total = 0.0
    for i in range(n):
        total += cost[i, perm[i]]
    return total / n


def exact_w1(p: DiscreteDistribution, q: DiscreteDistribution) -> float:
    """Exact W1 with Euclidean ground cost.

    Equal-size uniform supports go through the assignment solver (a min-cost
    flow on the bipartite graph); anything else is solved as a transportation
    linear program with HiGHS.
    """
    if abs(p.weights.sum() - q.weights.sum()) > 1e-12:
        raise ValueError("total masses differ")
    if max(len(p), len(q)) > MAX_SUPPORT:
        raise ValueError(f"support larger than {MAX_SUPPORT} points")
    cost = _cost(p, q)
    if len(p) == len(q) and p.is_uniform and q.is_uniform:
        rows, cols = linear_sum_assignment(cost)
        return _assignment_cost(cost, cols[np.argsort(rows)])
    return transport_lp(p, q, cost)


def transport_lp(p: DiscreteDistribution, q: DiscreteDistribution, cost: np.ndarray | None = None) -> float:
    """Solve the transportation problem as a linear program."""
    cost = _cost(p, q) if cost is None else cost
    n, m = cost.shape
    a_eq = np.zeros((n + m, n * m))
    for i in range(n):
        a_eq[i, i * m : (i + 1) * m] = 1.0
    for j in range(m):
        a_eq[n + j, j::m] = 1.0
    b_eq = np.concatenate([p.weights, q.weights])
    res = linprog(cost.ravel(), A_eq=a_eq, b_eq=b_eq, bounds=(0, None), method="highs")
    if not res.success:
        raise RuntimeError(f"transport LP failed: {res.message}")
    return float(res.fun)


def brute_force_w1(p: DiscreteDistribution, q: DiscreteDistribution) -> float:
    """Minimum over all assignments; equal-size uniform supports with n <= 6 only."""
    n = len(p)
    if n != len(q) or not (p.is_uniform and q.is_uniform):
        raise ValueError("exhaustive matching needs equal-size uniform supports")
    if n > 6:
        raise ValueError("exhaustive matching is limited to n <= 6")
    cost = _cost(p, q)
    return min(_assignment_cost(cost, perm) for perm in itertools.permutations(range(n)))


@dataclass
class DualGap:
    dual: float
    exact: float
    gap: float
    max_lipschitz_ratio: float

    def to_dict(self) -> dict:
        return {
            "dual": self.dual,
            "exact": self.exact,
            "gap": self.gap,
            "max_lipschitz_ratio": self.max_lipschitz_ratio,
        }


def dual_gap(critic, p: DiscreteDistribution, q: DiscreteDistribution) -> DualGap:
    """Compare the critic's dual estimate ``E_p[D] - E_q[D]`` with the exact W1.

    ``critic`` maps an ``(n, d)`` array of support points to ``n`` scores.
    """
    dp = np.asarray(critic(p.points), dtype=np.float64).reshape(-1)
    dq = np.asarray(critic(q.points), dtype=np.float64).reshape(-1)
    dual = float(p.weights @ dp - q.weights @ dq)
    exact = exact_w1(p, q)
    pts = np.vstack([p.points, q.points])
    scores = np.concatenate([dp, dq])
    dist = cdist(pts, pts)
    diff = np.abs(scores[:, None] - scores[None, :])
    off = dist > 0
    ratio = float((diff[off] / dist[off]).max()) if off.any() else 0.0
    return DualGap(dual, exact, exact - dual, ratio)


def shifted_cloud_pair(
    rng: np.random.Generator, n_points: int = 8, dim: int = 2, separation: float = 1.0
) -> tuple[DiscreteDistribution, DiscreteDistribution]:
    """Two standard-normal clouds whose centres differ by ``separation`` in a random direction.

    A gradient-penalty critic overshoots W1 by roughly ``W1 / (2 lam)`` in
    relative terms, so checks against ``exact_w1`` keep the separation modest.
    """
    direction = rng.normal(size=(1, dim))
    direction /= np.linalg.norm(direction)
    p = DiscreteDistribution.uniform(rng.normal(size=(n_points, dim)))
    q = DiscreteDistribution.uniform(rng.normal(size=(n_points, dim)) + separation * direction)
    return p, q


def fit_dual_critic(
    p: DiscreteDistribution,
    q: DiscreteDistribution,
    steps: int = 2000,
    lam: float = 10.0,
    hidden: tuple[int, ...] = (64, 64),
    lr: float = 3e-4,
    beta1: float = 0.0,
    beta2: float = 0.9,
    slope: float = 0.2,
    seed: int = 0,
):
    """Train a gradient-penalty critic to separate two uniform point clouds.

    Uses the same loss as the disentanglement critics with ``p`` in the role of
    the joint sample and ``q`` in the role of the product sample. Returns the
    parameters and a scoring function.
    """
    if not (p.is_uniform and q.is_uniform):
        raise ValueError("critic fitting uses uniform supports")
    d = p.points.shape[1]
    sizes = [d, *hidden, 1]
    rng = np.random.default_rng(seed)
    gain = np.sqrt(2.0 / (1.0 + slope**2))
    params = models.ParamStore()
    for k, (fi, fo) in enumerate(zip(sizes[:-1], sizes[1:])):
        bound = gain * np.sqrt(3.0 / fi)
        params.arrays[f"critic.W{k}"] = rng.uniform(-bound, bound, (fi, fo))
        params.arrays[f"critic.b{k}"] = np.zeros((1, fo))
    state = AdamState.zeros_like(params.arrays)
    empty_p = np.zeros((len(p), 0))
    empty_q = np.zeros((len(q), 0))
    joint = JointBatch(p.points, empty_p)
    product = JointBatch(q.points, empty_q, origin="product")
    # every (p, q) pair gets an interpolate each step: the full product coupling
    ip, iq = (a.ravel() for a in np.meshgrid(np.arange(len(p)), np.arange(len(q)), indexing="ij"))
    ends_p = JointBatch(p.points[ip], np.zeros((ip.size, 0)))
    ends_q = JointBatch(q.points[iq], np.zeros((iq.size, 0)), origin="product")
    for _ in range(steps):
        interp = make_interpolates(ends_p, ends_q, rng)
        tape = Tape(check_finite=False)
        pvars = models.tape_params(tape, params, ("critic",))
        loss, _, _, _ = critic_loss(tape, pvars, "critic", joint, product, interp, lam, slope)
        names = list(pvars)
        grads = grad(tape, loss, [pvars[k] for k in names])
        adam_step(params, dict(zip(names, grads)), state, lr, beta1, beta2, 1e-8)

    def score(points):
        return models.mlp_forward(params, "critic", np.asarray(points, dtype=np.float64), slope)[:, 0]

    return params, score


def binned_mi(features: np.ndarray, labels: np.ndarray, n_anchors: int = 32) -> float:
    """Plug-in mutual information (nats) between nearest-anchor buckets and labels.

    Anchors are every ``n // n_anchors``-th feature row, so the estimate is
    deterministic given the data order.
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels).reshape(-1)
    n = features.shape[0]
    if n == 0:
        raise ValueError("binned_mi needs at least one sample")
    if n_anchors < 2:
        raise ValueError("at least two anchors are required")
    if labels.shape[0] != n:
        raise ValueError("features and labels differ in length")
    stride = max(1, n // n_anchors)
    anchors = features[::stride][:n_anchors]
    buckets = np.argmin(cdist(features, anchors), axis=1)
    _, label_ids = np.unique(labels, return_inverse=True)
    counts = np.zeros((anchors.shape[0], label_ids.max() + 1))
    np.add.at(counts, (buckets, label_ids), 1.0)
    return mi_from_table(counts)


def mi_from_table(counts: np.ndarray) -> float:
    """Plug-in MI of a contingency table of counts (or probabilities)."""
    p = np.asarray(counts, dtype=np.float64)
    p = p / p.sum()
    pr = p.sum(axis=1, keepdims=True)
    pc = p.sum(axis=0, keepdims=True)
    nz = p > 0
    mi = float((p[nz] * np.log(p[nz] / (pr @ pc)[nz])).sum())
    return max(mi, 0.0)
