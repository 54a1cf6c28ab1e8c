"""AdamW with decoupled weight decay and a cosine-annealed learning rate."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from ..errors import DimensionError, NumericalError


@dataclass
class AdamWState:
    weight_decay: float = 0.02
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    no_decay: frozenset = frozenset()


def adamw_step(params, grads, state, lr):
    """Apply one AdamW update in place.

    ``params`` and ``grads`` map names to arrays (or Tensors). Weight decay is
    applied first, directly to the parameter, then the bias-corrected Adam step.
    """
    for name, g in grads.items():
        g = getattr(g, "values", g)
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for {name!r} at step {state.step + 1}")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        pv = getattr(p, "values", p)
        g = grads.get(name)
        g = np.zeros_like(pv) if g is None else np.asarray(getattr(g, "values", g))
        if g.shape != pv.shape:
            raise DimensionError(f"gradient shape {g.shape} != parameter {name!r} shape {pv.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(pv)
            state.v[name] = np.zeros_like(pv)
        v = state.v[name]
        if state.weight_decay and name not in state.no_decay:
            pv -= lr * state.weight_decay * pv
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        pv -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


@dataclass(frozen=True)
class CosineSchedule:
    lr_max: float = 1e-4
    lr_min: float = 5e-6
    total_steps: int = 1


def cosine_lr(schedule, step):
    total = schedule.total_steps
    if step < 0 or step > total:
        warnings.warn(f"schedule step {step} outside [0, {total}], clamping", stacklevel=2)
        step = min(max(step, 0), total)
    if total == 0:
        return schedule.lr_max
    frac = step / total
    return schedule.lr_min + 0.5 * (schedule.lr_max - schedule.lr_min) * (1.0 + math.cos(math.pi * frac))
