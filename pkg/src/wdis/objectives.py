"""Critic loss with gradient penalty, extractor/head loss, and cross-entropy."""

from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass

import numpy as np

from . import models
from .autodiff import Tape, Var, input_gradient
from .sampling import InterpolatedBatch, JointBatch


@dataclass
class LossBreakdown:
    """Scalar parts of one loss evaluation.

    ``wasserstein_*`` are dual estimates ``E_joint[D] - E_product[D]``.
    For critic updates ``total = -(w_fg + w_bg) + lam * (gp_fg + gp_bg)``; for
    extractor updates ``total = w_fg + w_bg + alpha * (ce_fg + ce_bg)``.
    """

    kind: str
    wasserstein_fg: float = 0.0
    wasserstein_bg: float = 0.0
    gp_fg: float = 0.0
    gp_bg: float = 0.0
    ce_fg: float = 0.0
    ce_bg: float = 0.0
    total: float = 0.0
    lam: float = 0.0
    alpha: float = 0.0
    zero_grad_events: int = 0

    def recompute_total(self) -> float:
        if self.kind == "critic":
            return -(self.wasserstein_fg + self.wasserstein_bg) + self.lam * (self.gp_fg + self.gp_bg)
        return self.wasserstein_fg + self.wasserstein_bg + self.alpha * (self.ce_fg + self.ce_bg)

    def to_dict(self) -> dict:
        return asdict(self)


def ce_loss(logits: np.ndarray, targets: np.ndarray) -> float:
    """Mean softmax cross-entropy against one-hot (or soft) target rows."""
    logits = np.asarray(logits, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if logits.shape != targets.shape:
        raise ValueError(f"logits {logits.shape} and targets {targets.shape} differ")
    if logits.shape[0] == 0:
        warnings.warn("cross-entropy of an empty batch is defined as 0", RuntimeWarning, stacklevel=2)
        return 0.0
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    return float(-(targets * log_probs).sum() / logits.shape[0])


def critic_loss(
    tape: Tape,
    pvars: dict[str, Var],
    group: str,
    joint: JointBatch,
    product: JointBatch,
    interp: InterpolatedBatch,
    lam: float,
    slope: float,
) -> tuple[Var, float, float, int]:
    """Record ``mean_product[D] - mean_joint[D] + lam * mean((|grad D| - 1)^2)``.

    Returns the loss node, the dual estimate ``mean_joint - mean_product``, the
    penalty value (before scaling by ``lam``) and the number of interpolates
    whose input-gradient was exactly zero.
    """
    if lam < 0:
        raise ValueError("lam must be non-negative")
    # joint and product get separate passes: identical batches then produce
    # bit-identical means and gradient contributions that cancel exactly
    d_joint = models.tape_mlp(tape, pvars, group, tape.constant(joint.stacked()), slope)
    d_prod = models.tape_mlp(tape, pvars, group, tape.constant(product.stacked()), slope)
    v = tape.input(interp.stacked(), "interpolates")
    d_interp = models.tape_mlp(tape, pvars, group, v, slope)
    for d in (d_joint, d_prod, d_interp):
        if not np.isfinite(d.value).all():
            raise FloatingPointError(f"non-finite output from {group}")
    w = tape.mean(d_joint) - tape.mean(d_prod)
    # rows are independent, so the input-gradient of sum(D) holds each row's own gradient
    norms = tape.l2_norm(input_gradient(tape, d_interp, v))
    penalty = tape.mean(tape.square(norms - np.ones(norms.shape)))
    loss = -w + penalty * lam
    events = int(np.count_nonzero(norms.value[:, 0] == 0.0))
    return loss, float(w.value[0, 0]), float(penalty.value[0, 0]), events


def _selection(rows: np.ndarray, n: int) -> np.ndarray:
    sel = np.zeros((rows.shape[0], n))
    sel[np.arange(rows.shape[0]), rows] = 1.0
    return sel


def extractor_loss(
    tape: Tape,
    pvars: dict[str, Var],
    x: np.ndarray,
    fg_onehot: np.ndarray,
    bg_onehot: np.ndarray,
    bg_rows: np.ndarray,
    fg_perm: np.ndarray,
    bg_perm: np.ndarray,
    arch: models.Architecture,
    alpha: float,
    adversarial: bool = True,
) -> tuple[Var, LossBreakdown]:
    """Record the extractor + heads objective on ``tape``.

    ``bg_onehot`` holds only the rows listed in ``bg_rows`` (rows with a known
    background label); the other rows feed the foreground cross-entropy and the
    background critic only. ``fg_perm`` / ``bg_perm`` shuffle the label rows
    used for the product-of-marginals samples. Critic parameters in ``pvars``
    should be tape constants.
    """
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    n = x.shape[0]
    if fg_onehot.shape != (n, arch.n_fg):
        raise ValueError(f"foreground targets must have shape ({n}, {arch.n_fg}), got {fg_onehot.shape}")
    if bg_onehot.shape != (bg_rows.shape[0], arch.n_bg):
        raise ValueError(f"background targets must have shape ({bg_rows.shape[0]}, {arch.n_bg}), got {bg_onehot.shape}")
    z_fg, z_bg = models.tape_extract(tape, pvars, tape.constant(x), arch)
    parts = LossBreakdown(kind="extractor", alpha=alpha)

    logits_fg = models.tape_head(tape, pvars, "head_fg", z_fg)
    ce_fg = tape.softmax_cross_entropy(logits_fg, tape.constant(fg_onehot))
    parts.ce_fg = float(ce_fg.value[0, 0])
    total = ce_fg * alpha

    if not adversarial:
        parts.total = parts.recompute_total()
        return total, parts

    slope = arch.slope
    if bg_rows.shape[0] == n:
        z_fg_b, z_bg_b = z_fg, z_bg
    else:
        sel = tape.constant(_selection(bg_rows, n))
        z_fg_b = tape.matmul(sel, z_fg)
        z_bg_b = tape.matmul(sel, z_bg)

    if bg_rows.shape[0] > 0:
        logits_bg = models.tape_head(tape, pvars, "head_bg", z_bg_b)
        ce_bg = tape.softmax_cross_entropy(logits_bg, tape.constant(bg_onehot))
        parts.ce_bg = float(ce_bg.value[0, 0])
        total = total + ce_bg * alpha

        d_joint = models.tape_critic(tape, pvars, "critic_fg", z_fg_b, tape.constant(bg_onehot), slope)
        d_prod = models.tape_critic(tape, pvars, "critic_fg", z_fg_b, tape.constant(bg_onehot[bg_perm]), slope)
        w_fg = tape.mean(d_joint) - tape.mean(d_prod)
        parts.wasserstein_fg = float(w_fg.value[0, 0])
        total = total + w_fg
    else:
        warnings.warn("no background labels in batch; background terms skipped", RuntimeWarning, stacklevel=2)

    d_joint = models.tape_critic(tape, pvars, "critic_bg", z_bg, tape.constant(fg_onehot), slope)
    d_prod = models.tape_critic(tape, pvars, "critic_bg", z_bg, tape.constant(fg_onehot[fg_perm]), slope)
    w_bg = tape.mean(d_joint) - tape.mean(d_prod)
    parts.wasserstein_bg = float(w_bg.value[0, 0])
    total = total + w_bg

    parts.total = float(total.value[0, 0])
    return total, parts
