"""Randomized sliding-window training with three gradient granularities.

Within a window of ``l`` consecutive slices the parameters take a plain
gradient step per slice (instantaneous gradients). Each next slice's loss is
also differentiated at the current slice's parameters (cumulative gradients);
those are rescaled by an adaptive decay factor ``-tau / sqrt(delta + r)``
with ``r`` a running mean of squared gradients, masked entrywise at random
and summed into the window gradient. Between windows the last slice's
instantaneous gradient and the window gradient are combined into one update.

The loop is model-agnostic: it only sees ``grad_fn(theta, slice_index, key)``
returning ``(loss, grads)`` or ``None`` for a slice without supervision.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import ndcore as nd
from .errors import TrainingError, ValidationError

log = logging.getLogger(__name__)

GradFn = Callable[[nd.ParamSet, int, tuple], Optional[tuple]]


@dataclass
class WindowSchedule:
    windows: list  # (start, length)
    steps: list    # steps[i] moves windows[i] to windows[i + 1]
    num_slices: int

    def __iter__(self):
        return iter(self.windows)

    def __len__(self):
        return len(self.windows)


def make_schedule(num_slices: int, length: int, seed) -> WindowSchedule:
    """Windows of ``length`` slices advancing by a random step in [1, length - 1].

    ``length == 1`` degenerates to one window per slice with step 1.
    """
    if length < 1:
        raise ValidationError(f"window length must be >= 1, got {length}")
    if length > num_slices:
        raise ValidationError(f"window length {length} exceeds {num_slices} slices")
    rng = np.random.default_rng(seed)
    windows, steps = [], []
    start = 0
    while start + length <= num_slices:
        windows.append((start, length))
        step = 1 if length == 1 else int(rng.integers(1, length))
        if start + step + length <= num_slices:
            steps.append(step)
        start += step
    return WindowSchedule(windows, steps, num_slices)


def schedule_violations(s: WindowSchedule) -> list:
    """Human-readable list of broken schedule invariants (empty when valid)."""
    bad = []
    if len(s.steps) != max(len(s.windows) - 1, 0):
        bad.append("step count does not match window count")
    for n, (start, length) in enumerate(s.windows):
        if length < 1:
            bad.append(f"window {n}: length {length} < 1")
        if start + length > s.num_slices:
            bad.append(f"window {n}: runs past slice {s.num_slices - 1}")
    for n, step in enumerate(s.steps):
        (a, la), (b, _) = s.windows[n], s.windows[n + 1]
        if b != a + step:
            bad.append(f"window {n + 1}: start {b} != {a} + {step}")
        if la == 1:
            if step != 1:
                bad.append(f"window {n + 1}: unit windows must step by 1")
            continue
        if not 1 <= step < la:
            bad.append(f"step {n}: {step} outside [1, {la})")
        if not b < a + la:
            bad.append(f"window {n + 1}: starts outside the previous window")
        if not b + la > a + la:
            bad.append(f"window {n + 1}: does not end beyond the previous window")
    return bad


@dataclass
class OptState:
    r: nd.GradSet
    rho: float = 0.9
    delta: float = 1e-8
    lr: float = 0.02
    meta_lr: float = 0.008
    keep_prob: float = 0.5
    combine: str = "meta"

    @classmethod
    def fresh(cls, like: nd.ParamSet, **kw) -> "OptState":
        return cls(r=nd.zeros_like(like), **kw)


def intra_step(theta: nd.ParamSet, g: nd.GradSet, lr: float) -> nd.ParamSet:
    return nd.axpy(-lr, g, theta)


def decay_scale(g: nd.GradSet, state: OptState) -> nd.GradSet:
    """Advance ``r`` and return ``F * g`` with ``F = -lr / sqrt(delta + r)``."""
    out = {}
    for k, gk in g.items():
        r = state.rho * state.r[k] + (1.0 - state.rho) * gk * gk
        state.r[k] = r
        out[k] = -state.lr / np.sqrt(state.delta + r) * gk
    return out


def window_gradient(scaled: list, rng, keep_prob: float) -> nd.GradSet | None:
    """Sum of Bernoulli(keep_prob)-masked scaled gradients; ``None`` if empty."""
    if not scaled:
        return None
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    total = nd.zeros_like(scaled[0])
    for g in scaled:
        for k, gk in g.items():
            total[k] += (rng.random(gk.shape) < keep_prob) * gk
    return total


def window_coefficient(state: OptState) -> float:
    """Outer weight on the window gradient.

    ``"ratio"``: ``meta_lr / lr``; the window gradient already carries ``-lr``
    through the decay factor, so its effective step size becomes ``meta_lr``.
    ``"meta"``: plain ``meta_lr``.
    """
    if state.combine == "ratio":
        return state.meta_lr / state.lr if state.lr else 0.0
    if state.combine == "meta":
        return state.meta_lr
    raise ValidationError(f"combine: unknown mode {state.combine!r}")


def inter_window_update(theta: nd.ParamSet, g_last: nd.GradSet | None, g_window: nd.GradSet | None,
                        state: OptState) -> nd.ParamSet:
    """``theta - lr * g_last + c * g_window`` with ``c`` from :func:`window_coefficient`."""
    out = nd.copy_params(theta)
    if g_last is not None:
        out = nd.axpy(-state.lr, g_last, out)
    if g_window is not None:
        out = nd.axpy(window_coefficient(state), g_window, out)
    return out


@dataclass
class WindowStats:
    instantaneous: list = field(default_factory=list)  # losses
    cumulative: int = 0
    window_gradients: int = 0


@dataclass
class TrainConfig:
    window: int = 5
    epochs: int = 50
    lr: float = 0.02
    meta_lr: float = 0.008
    rho: float = 0.9
    delta: float = 1e-8
    keep_prob: float = 0.5
    combine: str = "meta"
    intra_window: bool = True
    patience: int = 10
    seed: int = 0


def run_window(theta: nd.ParamSet, start: int, length: int, grad_fn: GradFn, cfg: TrainConfig,
               key: tuple) -> tuple:
    """One window. Returns (new theta, WindowStats)."""
    state = OptState.fresh(theta, rho=cfg.rho, delta=cfg.delta, lr=cfg.lr,
                           meta_lr=cfg.meta_lr, keep_prob=cfg.keep_prob, combine=cfg.combine)
    stats = WindowStats()
    scaled = []
    current = theta
    last = start + length - 1
    for k in range(start, last):
        inst = grad_fn(current, k, key + (k, 0))
        if cfg.intra_window and length > 1:
            cum = grad_fn(current, k + 1, key + (k + 1, 1))
            if cum is not None:
                scaled.append(decay_scale(cum[1], state))
                stats.cumulative += 1
        if inst is not None:
            stats.instantaneous.append(inst[0])
            current = intra_step(current, inst[1], cfg.lr)
    final = grad_fn(current, last, key + (last, 0))
    g_last = None
    if final is not None:
        stats.instantaneous.append(final[0])
        g_last = final[1]
    g_window = None
    if cfg.intra_window and length > 1:
        mask_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, *key, 7]))
        g_window = window_gradient(scaled, mask_rng, cfg.keep_prob)
        stats.window_gradients = 1
    return inter_window_update(current, g_last, g_window, state), stats


@dataclass
class TrainResult:
    params: nd.ParamSet
    loss_trace: list          # epoch-mean instantaneous loss
    val_trace: list
    best_epoch: int
    epochs_run: int


def train(params: nd.ParamSet, num_slices: int, grad_fn: GradFn, cfg: TrainConfig,
          evaluate: Callable[[nd.ParamSet], float] | None = None, supervised=None) -> TrainResult:
    """Epochs over freshly drawn window schedules.

    ``evaluate`` (higher is better) drives early stopping; the best parameters
    seen are returned. ``supervised`` optionally lists slice indices with
    supervision so an empty problem fails fast.
    """
    if supervised is not None and not any(supervised):
        raise TrainingError("no slice has supervision")
    theta = nd.copy_params(params)
    length = cfg.window if cfg.window <= num_slices else num_slices
    best, best_score, best_epoch, stale = theta, -np.inf, -1, 0
    loss_trace, val_trace = [], []
    epoch = -1
    for epoch in range(cfg.epochs):
        schedule = make_schedule(num_slices, length, np.random.SeedSequence([cfg.seed, epoch, 1]))
        losses = []
        for w, (start, l) in enumerate(schedule):
            theta, stats = run_window(theta, start, l, grad_fn, cfg, (epoch, w))
            losses.extend(stats.instantaneous)
        if not losses:
            raise TrainingError("no supervised slice was visited")
        loss_trace.append(float(np.mean(losses)))
        if evaluate is None:
            best, best_epoch = theta, epoch
            continue
        score = float(evaluate(theta))
        val_trace.append(score)
        log.info("epoch %d loss %.5f val %.5f", epoch, loss_trace[-1], score)
        if score > best_score:
            best, best_score, best_epoch, stale = theta, score, epoch, 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    return TrainResult(best, loss_trace, val_trace, best_epoch, epoch + 1)
