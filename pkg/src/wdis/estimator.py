"""scikit-learn style front end for Wasserstein disentanglement."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from . import models
from .sampling import MISSING
from .trainer import TrainConfig, TrainState, run_training


def check_labels(y, n_samples: int, n_fg: int, n_bg: int) -> np.ndarray:
    """Validate a ``(n, 2)`` integer array of (foreground, background) labels.

    Background entries may be ``-1`` for rows without a background label.
    """
    y = check_array(y, dtype=None, ensure_2d=True)
    if y.shape != (n_samples, 2):
        raise ValueError(f"y must have shape ({n_samples}, 2), got {y.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(np.mod(y, 1) == 0):
            raise ValueError("labels must be integer class indices")
        y = y.astype(np.int64)
    y = y.astype(np.int64)
    fg, bg = y[:, 0], y[:, 1]
    if fg.min() < 0 or fg.max() >= n_fg:
        raise ValueError(f"foreground label out of range [0, {n_fg})")
    known = bg[bg != MISSING]
    if (bg < MISSING).any() or (known.size and known.max() >= n_bg):
        raise ValueError(f"background label out of range [0, {n_bg}) (use {MISSING} for missing)")
    return y


class WassersteinDisentangler(TransformerMixin, BaseEstimator):
    """Learn partitioned foreground/background features with label-conditioned critics.

    The extractor output is split into ``z_fg = z[:, :split]`` and
    ``z_bg = z[:, split:]``. Training alternates ``critic_ratio`` gradient-penalty
    critic updates with one update of extractor and linear heads; the critics
    estimate the Wasserstein dependency between ``z_fg`` and the background
    label, and between ``z_bg`` and the foreground label.

    With ``adversarial=False`` only the foreground cross-entropy is optimized,
    giving the plain supervised baseline with the same architecture.

    Parameters mirror :class:`~wdis.trainer.TrainConfig`.

    Attributes
    ----------
    params_ : ParamStore
    state_ : TrainState
    history_ : list of dict
        Metrics snapshots, one every ``snapshot_every`` iterations plus a final one.
    n_features_in_ : int
    """

    def __init__(
        self,
        hidden=(64, 64),
        d_z=24,
        split=16,
        critic_hidden=(64, 64),
        slope=0.2,
        n_fg=16,
        n_bg=8,
        lam=10.0,
        alpha=1.0,
        critic_ratio=5,
        lr=1e-4,
        beta1=0.0,
        beta2=0.9,
        eps=1e-8,
        iterations=5000,
        batch_size=64,
        random_state=0,
        snapshot_every=100,
        adversarial=True,
    ):
        self.hidden = hidden
        self.d_z = d_z
        self.split = split
        self.critic_hidden = critic_hidden
        self.slope = slope
        self.n_fg = n_fg
        self.n_bg = n_bg
        self.lam = lam
        self.alpha = alpha
        self.critic_ratio = critic_ratio
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.iterations = iterations
        self.batch_size = batch_size
        self.random_state = random_state
        self.snapshot_every = snapshot_every
        self.adversarial = adversarial

    def _config(self, d_x: int) -> TrainConfig:
        return TrainConfig(
            d_x=d_x,
            hidden=tuple(self.hidden),
            d_z=self.d_z,
            split=self.split,
            critic_hidden=tuple(self.critic_hidden),
            slope=self.slope,
            n_fg=self.n_fg,
            n_bg=self.n_bg,
            lam=self.lam,
            alpha=self.alpha,
            critic_ratio=self.critic_ratio,
            lr=self.lr,
            beta1=self.beta1,
            beta2=self.beta2,
            eps=self.eps,
            iterations=self.iterations,
            batch_size=self.batch_size,
            seed=self.random_state,
            snapshot_every=self.snapshot_every,
            adversarial=self.adversarial,
        )

    def fit(self, X, y):
        """Train on observations ``X`` with labels ``y[:, 0]`` (fg) and ``y[:, 1]`` (bg, -1 if missing)."""
        X = check_array(X, dtype=np.float64)
        y = check_labels(y, X.shape[0], self.n_fg, self.n_bg)
        self.config_ = self._config(X.shape[1])
        self.state_ = run_training(self.config_, X, y)
        self.n_features_in_ = X.shape[1]
        return self

    @classmethod
    def from_state(cls, config: TrainConfig, state: TrainState) -> "WassersteinDisentangler":
        est = cls(
            hidden=config.hidden,
            d_z=config.d_z,
            split=config.split,
            critic_hidden=config.critic_hidden,
            slope=config.slope,
            n_fg=config.n_fg,
            n_bg=config.n_bg,
            lam=config.lam,
            alpha=config.alpha,
            critic_ratio=config.critic_ratio,
            lr=config.lr,
            beta1=config.beta1,
            beta2=config.beta2,
            eps=config.eps,
            iterations=config.iterations,
            batch_size=config.batch_size,
            random_state=config.seed,
            snapshot_every=config.snapshot_every,
            adversarial=config.adversarial,
        )
        est.config_ = config
        est.state_ = state
        est.n_features_in_ = config.d_x
        return est

    @property
    def params_(self) -> models.ParamStore:
        check_is_fitted(self, "state_")
        return self.state_.params

    @property
    def history_(self) -> list[dict]:
        check_is_fitted(self, "state_")
        return self.state_.history

    def _extract(self, X):
        check_is_fitted(self, "state_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return models.extract(self.state_.params, X, self.config_.architecture())

    def transform(self, X):
        """Full feature vector ``concat(z_fg, z_bg)``."""
        z_fg, z_bg = self._extract(X)
        return np.concatenate([z_fg, z_bg], axis=1)

    def transform_fg(self, X):
        return self._extract(X)[0]

    def transform_bg(self, X):
        return self._extract(X)[1]

    def predict(self, X):
        """Foreground and background predictions of the jointly trained heads, shape ``(n, 2)``."""
        z_fg, z_bg = self._extract(X)
        params = self.state_.params
        fg = np.argmax(models.head_logits(params, "head_fg", z_fg), axis=1)
        bg = np.argmax(models.head_logits(params, "head_bg", z_bg), axis=1)
        return np.stack([fg, bg], axis=1)

    def get_feature_names_out(self, input_features=None):
        check_is_fitted(self, "state_")
        return np.array(
            [f"z_fg{i}" for i in range(self.split)] + [f"z_bg{i}" for i in range(self.d_z - self.split)],
            dtype=object,
        )
