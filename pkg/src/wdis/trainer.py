"""Alternating min-max training: critic updates interleaved with extractor + head updates."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, fields
from typing import Callable

import numpy as np

from . import models
from .autodiff import Tape, grad
from .objectives import LossBreakdown, critic_loss, extractor_loss
from .sampling import MISSING, JointBatch, make_interpolates, one_hot, product_batch, sample_joint

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    d_x: int = 32
    hidden: tuple[int, ...] = (64, 64)
    d_z: int = 24
    split: int = 16
    critic_hidden: tuple[int, ...] = (64, 64)
    slope: float = 0.2
    n_fg: int = 16
    n_bg: int = 8
    lam: float = 10.0
    alpha: float = 1.0
    critic_ratio: int = 5
    lr: float = 1e-4
    beta1: float = 0.0
    beta2: float = 0.9
    eps: float = 1e-8
    iterations: int = 5000
    batch_size: int = 64
    seed: int = 0
    missing_bg_fraction: float = 0.0
    snapshot_every: int = 100
    adversarial: bool = True

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        self.critic_hidden = tuple(int(h) for h in self.critic_hidden)
        self.validate()

    def validate(self) -> None:
        for name in ("beta1", "beta2"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ValueError(f"{name} must lie in [0, 1)")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        if self.critic_ratio < 1:
            raise ValueError("critic_ratio must be at least 1")
        if self.lam < 0:
            raise ValueError("lam must be non-negative")
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")
        if self.iterations < 0:
            raise ValueError("iterations must be non-negative")
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2")
        if self.snapshot_every < 1:
            raise ValueError("snapshot_every must be at least 1")
        if not 0.0 <= self.missing_bg_fraction < 1.0:
            raise ValueError("missing_bg_fraction must lie in [0, 1)")
        self.architecture()  # split / width checks

    def architecture(self) -> models.Architecture:
        return models.Architecture(
            d_x=self.d_x,
            hidden=self.hidden,
            d_z=self.d_z,
            split=self.split,
            n_fg=self.n_fg,
            n_bg=self.n_bg,
            critic_hidden=self.critic_hidden,
            slope=self.slope,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        d["critic_hidden"] = list(self.critic_hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise KeyError(f"unknown key: {sorted(unknown)[0]}")
        return cls(**d)


# --------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    @classmethod
    def zeros_like(cls, arrays: dict[str, np.ndarray]) -> "AdamState":
        return cls({k: np.zeros_like(a) for k, a in arrays.items()}, {k: np.zeros_like(a) for k, a in arrays.items()})

    def copy(self) -> "AdamState":
        return AdamState({k: a.copy() for k, a in self.m.items()}, {k: a.copy() for k, a in self.v.items()}, self.step)


def adam_step(
    params: models.ParamStore,
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float,
    beta2: float,
    eps: float,
) -> None:
    """Bias-corrected Adam update of the named parameters, in place."""
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient for {name}")
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    new = {}
    for name, g in grads.items():
        if params[name].shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} does not match {name} {params[name].shape}")
        m = beta1 * state.m[name] + (1.0 - beta1) * g
        v = beta2 * state.v[name] + (1.0 - beta2) * (g * g)
        state.m[name] = m
        state.v[name] = v
        new[name] = params[name] - lr * (m / c1) / (np.sqrt(v / c2) + eps)
    params.update(new)


# --------------------------------------------------------------------------
# training state


@dataclass
class TrainState:
    params: models.ParamStore
    optim: dict[str, AdamState]
    rng: np.random.Generator
    iteration: int = 0
    history: list[dict] = field(default_factory=list)

    @classmethod
    def initial(cls, config: TrainConfig) -> "TrainState":
        params = models.init_params(config.architecture(), config.seed)
        optim = {
            "critic_fg": AdamState.zeros_like(params.group("critic_fg")),
            "critic_bg": AdamState.zeros_like(params.group("critic_bg")),
            "main": AdamState.zeros_like({**params.group("extractor"), **params.group("head_fg"), **params.group("head_bg")}),
        }
        # a separate stream from the weight init
        rng = np.random.default_rng(np.random.SeedSequence(config.seed, spawn_key=(1,)))
        return cls(params, optim, rng)


@dataclass
class Batch:
    x: np.ndarray
    fg: np.ndarray
    bg: np.ndarray  # MISSING where withheld

    @property
    def bg_rows(self) -> np.ndarray:
        return np.flatnonzero(self.bg != MISSING)


def draw_batch(x: np.ndarray, y: np.ndarray, batch_size: int, rng: np.random.Generator) -> Batch:
    idx = sample_joint(x.shape[0], batch_size, rng)
    return Batch(x[idx], y[idx, 0], y[idx, 1])


def critic_batches(batch: Batch, params, arch: models.Architecture, rng: np.random.Generator):
    """Joint / product / interpolate batches for both critics from current features."""
    z_fg, z_bg = models.extract(params, batch.x, arch)
    rows = batch.bg_rows
    out = {}
    joint = JointBatch(z_fg[rows], one_hot(batch.bg[rows], arch.n_bg))
    prod = product_batch(joint, rng)
    out["critic_fg"] = (joint, prod, make_interpolates(joint, prod, rng))
    joint = JointBatch(z_bg, one_hot(batch.fg, arch.n_fg))
    prod = product_batch(joint, rng)
    out["critic_bg"] = (joint, prod, make_interpolates(joint, prod, rng))
    return out


def critic_update(state: TrainState, config: TrainConfig, group: str, joint, prod, interp) -> tuple[float, float, int]:
    tape = Tape(check_finite=False)
    pvars = models.tape_params(tape, state.params, (group,))
    loss, w, gp, events = critic_loss(tape, pvars, group, joint, prod, interp, config.lam, config.slope)
    names = list(pvars)
    grads = grad(tape, loss, [pvars[n] for n in names])
    adam_step(state.params, dict(zip(names, grads)), state.optim[group], config.lr, config.beta1, config.beta2, config.eps)
    return w, gp, events


def train_critics(state: TrainState, x: np.ndarray, y: np.ndarray, config: TrainConfig) -> LossBreakdown:
    """One Adam step on each critic with features from the frozen current extractor."""
    arch = config.architecture()
    batch = draw_batch(x, y, config.batch_size, state.rng)
    batches = critic_batches(batch, state.params, arch, state.rng)
    parts = LossBreakdown(kind="critic", lam=config.lam)
    for group, suffix in (("critic_fg", "fg"), ("critic_bg", "bg")):
        joint, prod, interp = batches[group]
        if len(joint) == 0:
            continue
        w, gp, events = critic_update(state, config, group, joint, prod, interp)
        setattr(parts, f"wasserstein_{suffix}", w)
        setattr(parts, f"gp_{suffix}", gp)
        parts.zero_grad_events += events
    parts.total = parts.recompute_total()
    return parts


def extractor_update(state: TrainState, x: np.ndarray, y: np.ndarray, config: TrainConfig) -> LossBreakdown:
    """One Adam step on extractor and heads with the critics held fixed."""
    arch = config.architecture()
    batch = draw_batch(x, y, config.batch_size, state.rng)
    rows = batch.bg_rows
    fg_perm = state.rng.permutation(batch.x.shape[0])
    bg_perm = state.rng.permutation(rows.shape[0])
    tape = Tape(check_finite=False)
    train_groups = ("extractor", "head_fg", "head_bg") if config.adversarial else ("extractor", "head_fg")
    pvars = models.tape_params(tape, state.params, train_groups)
    if config.adversarial:
        pvars.update(models.tape_params(tape, state.params, ("critic_fg", "critic_bg"), trainable=False))
    loss, parts = extractor_loss(
        tape,
        pvars,
        batch.x,
        one_hot(batch.fg, arch.n_fg),
        one_hot(batch.bg[rows], arch.n_bg),
        rows,
        fg_perm,
        bg_perm,
        arch,
        config.alpha,
        adversarial=config.adversarial,
    )
    if not np.isfinite(parts.total):
        raise FloatingPointError("non-finite extractor loss")
    names = [n for n in pvars if n.split(".", 1)[0] in train_groups]
    grads = grad(tape, loss, [pvars[n] for n in names])
    adam_step(state.params, dict(zip(names, grads)), state.optim["main"], config.lr, config.beta1, config.beta2, config.eps)
    return parts


class TrainingAborted(RuntimeError):
    def __init__(self, message: str, last_good: TrainState | None):
        super().__init__(message)
        self.last_good = last_good


def _snapshot(state: TrainState) -> TrainState:
    return TrainState(
        state.params.copy(),
        {k: s.copy() for k, s in state.optim.items()},
        np.random.Generator(type(state.rng.bit_generator)()),
        state.iteration,
        list(state.history),
    )


def run_training(
    config: TrainConfig,
    x: np.ndarray,
    y: np.ndarray,
    state: TrainState | None = None,
    iterations: int | None = None,
    on_record: Callable[[dict], None] | None = None,
) -> TrainState:
    """Run ``critic_ratio`` critic steps then one extractor step, ``iterations`` times.

    ``y`` has two integer columns (foreground, background) with ``MISSING`` for
    withheld background labels. Passing a ``state`` resumes from it.
    """
    if x.shape[0] == 0:
        raise ValueError("dataset is empty")
    if state is None:
        state = TrainState.initial(config)
    target = config.iterations if iterations is None else state.iteration + iterations
    last_good = _snapshot(state)
    last_good.rng.bit_generator.state = state.rng.bit_generator.state
    critic_parts = LossBreakdown(kind="critic", lam=config.lam)
    main_parts = LossBreakdown(kind="extractor", alpha=config.alpha)
    try:
        while state.iteration < target:
            if config.adversarial:
                for _ in range(config.critic_ratio):
                    critic_parts = train_critics(state, x, y, config)
            main_parts = extractor_update(state, x, y, config)
            state.iteration += 1
            if state.iteration % config.snapshot_every == 0:
                rec = _record(state, critic_parts, main_parts)
                state.history.append(rec)
                if on_record:
                    on_record(rec)
                log.debug("iter %d: %s", state.iteration, rec["extractor"])
                last_good = _snapshot(state)
                last_good.rng.bit_generator.state = state.rng.bit_generator.state
    except (FloatingPointError, ValueError) as exc:
        raise TrainingAborted(f"training aborted at iteration {state.iteration}: {exc}", last_good) from exc
    if iterations is None or state.iteration == config.iterations:
        rec = _record(state, critic_parts, main_parts, final=True)
        state.history.append(rec)
        if on_record:
            on_record(rec)
    return state


def _record(state: TrainState, critic_parts: LossBreakdown, main_parts: LossBreakdown, final: bool = False) -> dict:
    return {
        "iteration": state.iteration,
        "final": final,
        "critic": critic_parts.to_dict(),
        "extractor": main_parts.to_dict(),
    }
