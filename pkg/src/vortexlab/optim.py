"""Adam with bias correction, cosine learning-rate decay, and gradient checking."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .tensor import Tape, Tensor, backward, precision


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(
    params: dict[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> None:
    """Apply one bias-corrected Adam update to ``params`` in place.

    Only parameters present in ``grads`` are updated, so frozen parameters can
    simply be left out.
    """
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name!r}")
        if name in state.m and state.m[name].shape != p.shape:
            raise ValueError(f"optimizer state shape mismatch for {name!r}")
    b1, b2 = betas
    state.step += 1
    t = state.step
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, g in grads.items():
        p = params[name]
        g = g.astype(p.dtype, copy=False)
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype, copy=False)


def cosine_lr(step: int, total_steps: int, lr0: float) -> float:
    if total_steps <= 0:
        raise ValueError("total_steps must be positive")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return 0.5 * lr0 * (1.0 + math.cos(math.pi * step / total_steps))


def finite_diff_check(
    fn: Callable[[dict[str, Tensor]], Tensor],
    point: Mapping[str, np.ndarray],
    eps: float = 1e-6,
    max_coords: int | None = None,
    seed: int = 0,
) -> float:
    """Max relative error between tape gradients and central differences.

    ``fn`` maps a dict of named tensors to a scalar tensor. The error per
    coordinate is ``|analytic - numeric| / max(1, |analytic|)``. With
    ``max_coords`` only that many coordinates (chosen by ``seed``) per input
    are probed, which keeps checks on large networks affordable.
    """
    with precision(np.float64):
        point = {k: np.array(v, dtype=np.float64) for k, v in point.items()}
        with Tape() as tape:
            leaves = {k: tape.watch(k, v) for k, v in point.items()}
            loss = fn(leaves)
        analytic = backward(tape, loss)

        def evaluate(values):
            out = fn({k: Tensor(v) for k, v in values.items()}).data
            if not np.all(np.isfinite(out)):
                raise FloatingPointError("non-finite value in finite-difference probe")
            return float(out)

        rng = np.random.default_rng(seed)
        worst = 0.0
        for name, base in point.items():
            flat = base.reshape(-1)
            coords = np.arange(flat.size)
            if max_coords is not None and flat.size > max_coords:
                coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
            grad = analytic[name].reshape(-1)
            if not np.all(np.isfinite(grad)):
                raise FloatingPointError(f"non-finite analytic gradient for {name!r}")
            for i in coords:
                keep = flat[i]
                flat[i] = keep + eps
                up = evaluate(point)
                flat[i] = keep - eps
                down = evaluate(point)
                flat[i] = keep
                numeric = (up - down) / (2.0 * eps)
                err = abs(grad[i] - numeric) / max(1.0, abs(grad[i]))
                worst = max(worst, err)
        return worst
