"""Per-group parameter updates and the learning-rate range test.

The default update rule is adaptive-moment with decoupled weight decay
(beta1 0.9, beta2 0.99, eps 1e-5, decay 0.01); a plain momentum-SGD
variant exists for analytically checkable behaviour. Learning rates are
looked up per layer group, so the distribution across depth is entirely
described by an :class:`LrSchedule`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NoSignalError, NumericError, StateError
from .tensor import backward

DIRECTIONS = ("early_low", "early_high")


@dataclass(frozen=True)
class LrSchedule:
    """One positive learning rate per layer group, monotone in depth."""

    per_group_lrs: tuple
    direction: str = "early_low"

    def __post_init__(self):
        if self.direction not in DIRECTIONS:
            raise ConfigError(f"direction must be one of {DIRECTIONS}")
        if not self.per_group_lrs:
            raise ConfigError("schedule needs at least one group")
        if any(lr < 0 for lr in self.per_group_lrs):
            raise ConfigError("learning rates must be non-negative")

    def __len__(self):
        return len(self.per_group_lrs)

    def __getitem__(self, group):
        return self.per_group_lrs[group]


def constant_schedule(lr, num_groups):
    """The same rate for every group (a degenerate slice)."""
    if lr < 0:
        raise ConfigError(f"learning rate must be non-negative, got {lr}")
    return LrSchedule((float(lr),) * num_groups)


def discriminative_lrs(lr_min, lr_max, num_groups, direction="early_low"):
    """Geometrically interpolate ``num_groups`` rates between two bounds.

    Group i receives ``lr_min * (lr_max / lr_min) ** (i / (G - 1))`` so the
    ratio between consecutive groups is constant. ``early_low`` hands the
    smallest rate to group 0 (the input end); ``early_high`` reverses
    that. A single group collapses to ``lr_max``.
    """
    if lr_min <= 0 or lr_max <= 0:
        raise ConfigError(f"learning rates must be positive, got {lr_min}, {lr_max}")
    if lr_min > lr_max:
        raise ConfigError(f"lr_min {lr_min} exceeds lr_max {lr_max}")
    if num_groups < 1:
        raise ConfigError(f"need at least one group, got {num_groups}")
    if direction not in DIRECTIONS:
        raise ConfigError(f"direction must be one of {DIRECTIONS}")
    if num_groups == 1:
        return LrSchedule((float(lr_max),), direction)
    ratio = lr_max / lr_min
    values = [lr_min * ratio ** (i / (num_groups - 1)) for i in range(num_groups)]
    if direction == "early_high":
        values.reverse()
    return LrSchedule(tuple(values), direction)


class OptimizerState:
    """Moment tensors and hyperparameters for one training run.

    Moment entries are created lazily per parameter name, so freshly
    unfrozen parameters start from zero moments. ``variant`` is "adam"
    (adaptive moments, decoupled weight decay) or "sgd" (momentum buffer,
    coupled decay).
    """

    def __init__(self, variant="adam", beta1=0.9, beta2=0.99, eps=1e-5,
                 weight_decay=0.01, momentum=0.0):
        if variant not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer variant {variant!r}")
        self.variant = variant
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.momentum = momentum
        self.step_count = 0
        self.m = {}
        self.v = {}
        self.buf = {}

    def hyper_dict(self):
        return {"variant": self.variant, "beta1": self.beta1, "beta2": self.beta2,
                "eps": self.eps, "weight_decay": self.weight_decay,
                "momentum": self.momentum, "step_count": self.step_count}

    @classmethod
    def from_hyper_dict(cls, d):
        state = cls(variant=d["variant"], beta1=d["beta1"], beta2=d["beta2"],
                    eps=d["eps"], weight_decay=d["weight_decay"],
                    momentum=d["momentum"])
        state.step_count = int(d["step_count"])
        return state


def step(model, state, schedule):
    """Apply one update to every trainable parameter, then clear grads.

    Group g uses ``schedule[g]``. Frozen parameters are never touched; a
    trainable parameter without a gradient is a ``StateError``.
    """
    params = model.parameters()
    groups = {p.group for p in params}
    if len(schedule) <= max(groups):
        raise ConfigError(
            f"schedule has {len(schedule)} rates but groups go up to {max(groups)}")
    state.step_count += 1
    t = state.step_count
    for p in params:
        if not p.trainable:
            continue
        g = p.value.grad
        if g is None:
            raise StateError(f"trainable parameter {p.name} has no gradient")
        lr = schedule[p.group]
        data = p.value.data
        if state.variant == "adam":
            m = state.m.get(p.name)
            if m is None:
                m = state.m[p.name] = np.zeros_like(data)
                state.v[p.name] = np.zeros_like(data)
            v = state.v[p.name]
            m *= state.beta1
            m += (1.0 - state.beta1) * g
            v *= state.beta2
            v += (1.0 - state.beta2) * (g * g)
            m_hat = m / (1.0 - state.beta1 ** t)
            v_hat = v / (1.0 - state.beta2 ** t)
            upd = m_hat / (np.sqrt(v_hat) + state.eps)
            if state.weight_decay:
                upd = upd + state.weight_decay * data
            data -= lr * upd
        else:
            d = g
            if state.momentum:
                buf = state.buf.get(p.name)
                if buf is None:
                    buf = state.buf[p.name] = np.zeros_like(data)
                buf *= state.momentum
                buf += g
                d = buf
            if state.weight_decay:
                d = d + state.weight_decay * data
            data -= lr * d
    for p in params:
        p.value.zero_grad()


# ---------------------------------------------------------------------------
# learning-rate range test

@dataclass
class LrFinderResult:
    """Record of an exponential learning-rate sweep."""

    lrs: list
    losses: list
    smoothed: list
    stop_index: int
    suggested_lr: float = None
    suggested_lr_steepest: float = None

    def rows(self):
        return zip(self.lrs, self.losses, self.smoothed)

    def to_csv(self, path):
        from .reports import write_lr_finder_csv
        write_lr_finder_csv(self, path)


def lr_range_test(model, data, lr_start=1e-7, lr_end=10.0, max_iters=100,
                  smoothing=0.98, stop_factor=4.0, optimizer=None):
    """Sweep an exponentially growing learning rate on a throwaway copy.

    Iteration i trains one batch (cycling through ``data``) at
    ``lr_start * (lr_end / lr_start) ** (i / (max_iters - 1))`` and records
    the raw and bias-corrected smoothed loss. The sweep stops early once
    the smoothed loss exceeds ``stop_factor`` times its best value. The
    input model and optimizer are never mutated.
    """
    if lr_start >= lr_end:
        raise ConfigError(f"lr_start {lr_start} must be below lr_end {lr_end}")
    if lr_start <= 0:
        raise ConfigError(f"lr_start must be positive, got {lr_start}")
    if max_iters < 10:
        raise ConfigError(f"max_iters must be at least 10, got {max_iters}")
    if not len(data):
        raise ConfigError("lr_range_test needs at least one batch")

    work = model.copy()
    state = optimizer if optimizer is not None else OptimizerState()
    ratio = lr_end / lr_start
    num_groups = getattr(work, "num_groups", 1)

    lrs, losses, smoothed = [], [], []
    avg = 0.0
    best = math.inf
    stop_index = None
    for i in range(max_iters):
        lr = lr_start * ratio ** (i / (max_iters - 1))
        batch = data[i % len(data)]
        loss = work.loss_on_batch(batch, training=True)
        value = loss.item()
        if i == 0 and not math.isfinite(value):
            raise NumericError("loss was non-finite on the first sweep iteration")
        avg = smoothing * avg + (1.0 - smoothing) * value
        debias = avg / (1.0 - smoothing ** (i + 1)) if smoothing else value
        lrs.append(lr)
        losses.append(value)
        smoothed.append(debias)
        if not math.isfinite(debias) or debias > stop_factor * best:
            stop_index = i
            break
        best = min(best, debias)
        backward(loss)
        step(work, state, constant_schedule(lr, num_groups))
    if stop_index is None:
        stop_index = len(lrs) - 1

    result = LrFinderResult(lrs, losses, smoothed, stop_index)
    try:
        result.suggested_lr = suggest_lr(result)
        result.suggested_lr_steepest = suggest_lr(result, heuristic="steepest")
    except (NoSignalError, ConfigError):
        pass
    return result


def suggest_lr(result, heuristic="min_over_10"):
    """Pick a training rate from a finished sweep.

    ``min_over_10`` (default) returns the rate at the smoothed-loss
    minimum divided by ten; ``steepest`` returns the rate where the
    smoothed loss falls fastest before that minimum. Both are clamped
    into the recorded range. A sweep whose loss only ever rose carries no
    signal.
    """
    n = len(result.smoothed)
    if n < 10:
        raise ConfigError(f"need at least 10 recorded points, got {n}")
    s = np.asarray(result.smoothed)
    i_min = int(np.argmin(s))
    if i_min == 0:
        raise NoSignalError("smoothed loss increases from the first iteration")
    if heuristic == "min_over_10":
        candidate = result.lrs[i_min] / 10.0
    elif heuristic == "steepest":
        drops = np.diff(s[:i_min + 1])
        candidate = result.lrs[int(np.argmin(drops))]
    else:
        raise ConfigError(f"unknown heuristic {heuristic!r}")
    return min(max(candidate, result.lrs[0]), result.lrs[result.stop_index])
