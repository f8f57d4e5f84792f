"""Linear probes on frozen features, the four-probe grid, and the corr/anticorr experiment."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .trainer import AdamState, adam_step
from .models import ParamStore


def accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    """Top-1 accuracy; ``argmax`` breaks ties toward the lowest class index."""
    if labels.shape[0] == 0:
        return float("nan")
    return float(np.mean(np.argmax(logits, axis=1) == labels))


def top_k_accuracy(logits: np.ndarray, labels: np.ndarray, k: int) -> float:
    """Fraction of rows whose label is among the ``k`` largest logits.

    Ties are ranked by lowest class index, consistent with :func:`accuracy`.
    """
    k = min(k, logits.shape[1])
    # stable sort on -logits keeps lower indices first among equal values
    order = np.argsort(-logits, axis=1, kind="stable")[:, :k]
    return float(np.mean((order == labels[:, None]).any(axis=1)))


class LinearProbe(ClassifierMixin, BaseEstimator):
    """Softmax linear classifier trained by Adam on mini-batches.

    Parameters
    ----------
    n_classes : int or None
        Number of output classes. Inferred from ``y`` when None.
    lr : float, default=1e-2
    steps : int, default=2000
    batch_size : int, default=128
    beta1, beta2, eps : float
        Adam settings.
    random_state : int, default=0
    """

    def __init__(
        self,
        n_classes=None,
        lr=1e-2,
        steps=2000,
        batch_size=128,
        beta1=0.9,
        beta2=0.999,
        eps=1e-8,
        random_state=0,
    ):
        self.n_classes = n_classes
        self.lr = lr
        self.steps = steps
        self.batch_size = batch_size
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.random_state = random_state

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        y = y.astype(np.int64)
        if y.min() < 0:
            raise ValueError("probe targets must be non-negative class indices")
        k = int(self.n_classes) if self.n_classes is not None else int(y.max()) + 1
        if y.max() >= k:
            raise ValueError(f"target {y.max()} out of range for {k} classes")
        n, d = X.shape
        rng = np.random.default_rng(self.random_state)
        params = ParamStore({"probe.W": np.zeros((d, k)), "probe.b": np.zeros((1, k))})
        state = AdamState.zeros_like(params.arrays)
        onehot = np.eye(k)[y]
        for _ in range(self.steps):
            idx = rng.integers(0, n, size=min(self.batch_size, n))
            xb, tb = X[idx], onehot[idx]
            logits = xb @ params["probe.W"] + params["probe.b"]
            logits -= logits.max(axis=1, keepdims=True)
            probs = np.exp(logits)
            probs /= probs.sum(axis=1, keepdims=True)
            delta = (probs - tb) / xb.shape[0]
            grads = {"probe.W": xb.T @ delta, "probe.b": delta.sum(axis=0, keepdims=True)}
            adam_step(params, grads, state, self.lr, self.beta1, self.beta2, self.eps)
        self.coef_ = params["probe.W"]
        self.intercept_ = params["probe.b"][0]
        self.classes_ = np.arange(k)
        self.n_features_in_ = d
        return self

    def decision_function(self, X):
        check_is_fitted(self, "coef_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        return X @ self.coef_ + self.intercept_

    def predict_proba(self, X):
        logits = self.decision_function(X)
        logits = logits - logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        return p / p.sum(axis=1, keepdims=True)

    def predict(self, X):
        return np.argmax(self.decision_function(X), axis=1)

    def score(self, X, y, sample_weight=None):
        return accuracy(self.decision_function(X), np.asarray(y))

    def top_k_score(self, X, y, k=5):
        return top_k_accuracy(self.decision_function(X), np.asarray(y), k)


# --------------------------------------------------------------------------
# probe tasks


SLICES = ("z_fg", "z_bg", "all")
TARGETS = ("l_fg", "l_bg")

# report key -> (input slice, target)
GRID = {
    "fg_from_fg": ("z_fg", "l_fg"),
    "fg_from_bg": ("z_bg", "l_fg"),
    "bg_from_bg": ("z_bg", "l_bg"),
    "bg_from_fg": ("z_fg", "l_bg"),
}


@dataclass(frozen=True)
class ProbeTask:
    input_slice: str
    target: str

    def __post_init__(self):
        if self.input_slice not in SLICES:
            raise ValueError(f"unknown input slice {self.input_slice!r}")
        if self.target not in TARGETS:
            raise ValueError(f"unknown target {self.target!r}")


def select(z: np.ndarray, split: int, input_slice: str) -> np.ndarray:
    if input_slice == "z_fg":
        return z[:, :split]
    if input_slice == "z_bg":
        return z[:, split:]
    return z


def _targets(fg, bg, target):
    return fg if target == "l_fg" else bg


def train_probe(
    z_train: np.ndarray,
    fg_train: np.ndarray,
    bg_train: np.ndarray,
    task: ProbeTask,
    split: int,
    n_classes: int,
    probe_params: dict | None = None,
    random_state: int = 0,
) -> LinearProbe:
    """Fit a probe for ``task`` on frozen features (rows with a missing target are dropped)."""
    y = _targets(fg_train, bg_train, task.target)
    keep = y >= 0
    feats = select(z_train, split, task.input_slice)[keep]
    probe = LinearProbe(n_classes=n_classes, random_state=random_state, **(probe_params or {}))
    return probe.fit(feats, y[keep])


@dataclass
class MetricsReport:
    """Probe accuracies keyed by task name plus free-form extras."""

    accuracies: dict[str, float] = field(default_factory=dict)
    top5: dict[str, float] = field(default_factory=dict)
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        for key, acc in {**self.accuracies, **self.top5}.items():
            if not 0.0 <= acc <= 1.0:
                raise ValueError(f"accuracy {key}={acc} outside [0, 1]")

    def to_dict(self) -> dict:
        return {"accuracies": dict(self.accuracies), "top5": dict(self.top5), **self.extras}


def probe_grid(
    z_train: np.ndarray,
    fg_train: np.ndarray,
    bg_train: np.ndarray,
    z_eval: np.ndarray,
    fg_eval: np.ndarray,
    bg_eval: np.ndarray,
    split: int,
    n_fg: int,
    n_bg: int,
    probe_params: dict | None = None,
    random_state: int = 0,
) -> MetricsReport:
    """The four cross/self probes on partitioned features."""
    if (bg_eval < 0).any():
        raise ValueError("evaluation split needs background labels on every row")
    report = MetricsReport()
    for key, (slc, target) in GRID.items():
        k = n_fg if target == "l_fg" else n_bg
        probe = train_probe(z_train, fg_train, bg_train, ProbeTask(slc, target), split, k, probe_params, random_state)
        feats = select(z_eval, split, slc)
        y = _targets(fg_eval, bg_eval, target)
        logits = probe.decision_function(feats)
        report.accuracies[key] = accuracy(logits, y)
        if key == "fg_from_fg" and k >= 5:
            report.top5[key] = top_k_accuracy(logits, y, 5)
    return report


# --------------------------------------------------------------------------
# spurious-correlation experiment

CORR_COLUMNS = ("corr_fg", "anticorr_fg", "corr_bg", "anticorr_bg", "unbiased_fg")
VARIANTS = ("correct", "all", "baseline")


@dataclass
class CorrRow:
    variant: str
    cells: dict[str, float]

    @property
    def average(self) -> float:
        # unweighted mean of the five cells
        return float(sum(self.cells[c] for c in CORR_COLUMNS) / len(CORR_COLUMNS))


@dataclass
class CorrTable:
    rows: list[CorrRow]

    def row(self, variant: str) -> CorrRow:
        for r in self.rows:
            if r.variant == variant:
                return r
        raise KeyError(variant)

    def to_dict(self) -> dict:
        return {r.variant: {**r.cells, "average": r.average} for r in self.rows}

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["model", *CORR_COLUMNS, "average"])
        for r in self.rows:
            writer.writerow([r.variant, *(repr(r.cells[c]) for c in CORR_COLUMNS), repr(r.average)])
        return buf.getvalue()


def corr_experiment(
    features: dict[str, tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]],
    labels: dict[str, tuple[np.ndarray, np.ndarray]],
    split: int,
    n_fg: int,
    n_bg: int,
    probe_params: dict | None = None,
    random_state: int = 0,
) -> CorrTable:
    """Train probes on the correlated split and evaluate under broken correlation.

    ``features[variant]`` holds ``(z_corr_train, z_corr_val, z_anticorr_val,
    z_unbiased_val)`` computed by that variant's frozen extractor (``correct``
    and ``all`` share the disentangled extractor, ``baseline`` uses the
    cross-entropy-only one). ``labels`` maps the same split names
    (``corr_train``, ``corr_val``, ``anticorr_val``, ``unbiased_val``) to
    ``(fg, bg)`` label arrays.
    """
    rows = []
    for variant in VARIANTS:
        z_tr, z_cv, z_av, z_uv = features[variant]
        fg_tr, bg_tr = labels["corr_train"]
        if variant == "correct":
            fg_slice, bg_slice = "z_fg", "z_bg"
        else:
            fg_slice = bg_slice = "all"
        fg_probe = train_probe(z_tr, fg_tr, bg_tr, ProbeTask(fg_slice, "l_fg"), split, n_fg, probe_params, random_state)
        bg_probe = train_probe(z_tr, fg_tr, bg_tr, ProbeTask(bg_slice, "l_bg"), split, n_bg, probe_params, random_state)
        cells = {
            "corr_fg": fg_probe.score(select(z_cv, split, fg_slice), labels["corr_val"][0]),
            "anticorr_fg": fg_probe.score(select(z_av, split, fg_slice), labels["anticorr_val"][0]),
            "corr_bg": bg_probe.score(select(z_cv, split, bg_slice), labels["corr_val"][1]),
            "anticorr_bg": bg_probe.score(select(z_av, split, bg_slice), labels["anticorr_val"][1]),
            "unbiased_fg": fg_probe.score(select(z_uv, split, fg_slice), labels["unbiased_val"][0]),
        }
        rows.append(CorrRow(variant, cells))
    return CorrTable(rows)
