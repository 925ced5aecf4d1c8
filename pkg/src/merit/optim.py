"""Optimizer kernels: AdamW, LAMB, maxLAMB, and MERIT, plus schedule and clipping.

All four optimizers share the same exponential-moving-average moment update
(``update_moments``) and differ only in how they scale the resulting update
direction d = u + lambda*w:

- AdamW: no trust ratio; bias-corrected moments; decoupled decay.
- LAMB: one scalar l2-norm trust ratio per parameter tensor.
- maxLAMB: LAMB with the max norm in place of the l2 norm.
- MERIT: element-wise trust ratios s[i,j] = max(max(row_i, col_j), whole),
  all max-norm based, followed by clipping each update element to [-1, 1].

A deliberate asymmetry, stated here because it is easy to miss: AdamW applies
standard bias correction, while LAMB, maxLAMB, and MERIT use the raw moments.
The trust ratio largely absorbs the early-step moment shrinkage, and the raw
form is what the update rules define.

Step functions never mutate weights in place; they return the new tensor.
Each parameter tensor owns one OptimState with a single writer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from merit.tensor import (
    Tensor,
    clip_elementwise,
    col_max_norms,
    l2_norm,
    max_norm,
    row_max_norms,
)


@dataclass
class HyperParams:
    """Shared optimizer settings; defaults mirror the training recipe."""

    peak_lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.1
    clip_threshold: float = 1.0
    global_grad_clip: float = 1.0

    def __post_init__(self):
        if self.peak_lr <= 0:
            raise ValueError(f"peak_lr must be > 0, got {self.peak_lr}")
        if not (0 <= self.beta1 < 1):
            raise ValueError(f"beta1 must be in [0, 1), got {self.beta1}")
        if not (0 <= self.beta2 < 1):
            raise ValueError(f"beta2 must be in [0, 1), got {self.beta2}")
        if self.eps <= 0:
            raise ValueError(f"eps must be > 0, got {self.eps}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.clip_threshold <= 0:
            raise ValueError(f"clip_threshold must be > 0, got {self.clip_threshold}")
        if self.global_grad_clip <= 0:
            raise ValueError(
                f"global_grad_clip must be > 0, got {self.global_grad_clip}"
            )


@dataclass
class OptimState:
    """First/second moment accumulators for one parameter tensor.

    ``t`` is the 1-indexed number of the next step to be applied; it is what
    AdamW's bias correction reads.
    """

    m: Tensor
    v: Tensor
    t: int = 1

    @classmethod
    def zeros_like(cls, w: Tensor) -> "OptimState":
        return cls(m=np.zeros_like(w), v=np.zeros_like(w), t=1)


@dataclass
class TrustRatios:
    """Weight-, row-, column-, and element-wise ratios for one 2-D tensor."""

    b: float
    r: Tensor
    c: Tensor
    s: Tensor


@dataclass
class StepDiagnostics:
    """Per-step observables a MERIT update exposes for logging.

    ``pre_clip`` is s*(u + lambda*w) before clipping; ``ratios`` is the full
    quadruple for 2-D parameters and None for vectors/scalars, which only
    carry the weight-wise ratio ``b``.
    """

    pre_clip: Tensor
    b: float
    ratios: TrustRatios | None = None


@dataclass
class Schedule:
    """Cosine decay with linear warmup and a floor at a fraction of peak."""

    total_steps: int
    warmup_ratio: float = 0.02
    floor_fraction: float = 0.1

    def __post_init__(self):
        if self.total_steps < 0:
            raise ValueError(f"total_steps must be >= 0, got {self.total_steps}")
        if not (0 <= self.warmup_ratio < 1):
            raise ValueError(f"warmup_ratio must be in [0, 1), got {self.warmup_ratio}")
        if not (0 <= self.floor_fraction <= 1):
            raise ValueError(
                f"floor_fraction must be in [0, 1], got {self.floor_fraction}"
            )

    @property
    def warmup_steps(self) -> int:
        return math.ceil(self.warmup_ratio * self.total_steps)


def update_moments(state: OptimState, g: Tensor, hp: HyperParams) -> Tensor:
    """EMA moment update; returns the raw direction u = m/(sqrt(v)+eps).

    No bias correction: callers that want it (AdamW) apply it to state.m and
    state.v themselves.  Advances the state's step counter.
    """
    if state.m.shape != g.shape:
        raise ValueError(f"moment/gradient shape mismatch: {state.m.shape} vs {g.shape}")
    state.m = hp.beta1 * state.m + (1.0 - hp.beta1) * g
    state.v = hp.beta2 * state.v + (1.0 - hp.beta2) * (g * g)
    state.t += 1
    return state.m / (np.sqrt(state.v) + hp.eps)


def adamw_step(
    w: Tensor, g: Tensor, state: OptimState, hp: HyperParams, lr: float
) -> Tensor:
    """Bias-corrected Adam update with decoupled weight decay."""
    if w.shape != g.shape:
        raise ValueError(f"weight/gradient shape mismatch: {w.shape} vs {g.shape}")
    t = state.t
    update_moments(state, g, hp)
    m_hat = state.m / (1.0 - hp.beta1**t)
    v_hat = state.v / (1.0 - hp.beta2**t)
    update = m_hat / (np.sqrt(v_hat) + hp.eps) + hp.weight_decay * w
    return w - lr * update


# subnormal norms must not overflow a ratio to inf: inf * 0 makes NaN updates
_RATIO_MIN = np.finfo(np.float64).tiny
_RATIO_MAX = np.finfo(np.float64).max


def _safe_ratio(num: float, den: float) -> float:
    """Norm ratio with the degenerate-case convention: 0/any or any/0 -> 1.

    Nonzero ratios are clamped to the finite positive float range; the
    clamp only binds when a norm is subnormal.
    """
    if num == 0.0 or den == 0.0:
        return 1.0
    with np.errstate(over="ignore"):
        return float(min(max(np.float64(num) / np.float64(den), _RATIO_MIN), _RATIO_MAX))


def lamb_trust_ratio(w: Tensor, d: Tensor) -> float:
    """Scalar l2-norm trust ratio ||w|| / ||d||, falling back to 1 when
    either norm is zero so that zero-initialized weights stay trainable."""
    return _safe_ratio(l2_norm(w), l2_norm(d))


def merit_trust_ratios(w: Tensor, d: Tensor) -> TrustRatios:
    """Max-norm ratio quadruple (b, r, c, s) for a 2-D weight and direction.

    b compares whole tensors, r[i] compares row i, c[j] compares column j,
    and s[i,j] = max(max(r[i], c[j]), b): the weight-wise ratio is a lower
    bound on every element's scale.  Any ratio with a zero numerator or
    denominator is set to 1 before the max combination.
    """
    w = np.asarray(w)
    d = np.asarray(d)
    if w.ndim != 2 or w.shape != d.shape:
        raise ValueError(f"expected matching 2-D tensors, got {w.shape} vs {d.shape}")
    b = _safe_ratio(max_norm(w), max_norm(d))
    w_rows, d_rows = row_max_norms(w), row_max_norms(d)
    w_cols, d_cols = col_max_norms(w), col_max_norms(d)
    degenerate_r = (w_rows == 0.0) | (d_rows == 0.0)
    degenerate_c = (w_cols == 0.0) | (d_cols == 0.0)
    with np.errstate(over="ignore"):
        raw_r = np.clip(w_rows / np.where(d_rows == 0.0, 1.0, d_rows),
                        _RATIO_MIN, _RATIO_MAX)
        raw_c = np.clip(w_cols / np.where(d_cols == 0.0, 1.0, d_cols),
                        _RATIO_MIN, _RATIO_MAX)
    r = np.where(degenerate_r, 1.0, raw_r)
    c = np.where(degenerate_c, 1.0, raw_c)
    s = np.maximum(np.maximum(r[:, None], c[None, :]), b)
    return TrustRatios(b=b, r=r, c=c, s=s)


def merit_step(
    w: Tensor,
    g: Tensor,
    state: OptimState,
    hp: HyperParams,
    lr: float,
    *,
    elementwise: bool = True,
    clip: bool = True,
    exempt_vectors: bool = False,
) -> tuple[Tensor, StepDiagnostics]:
    """One MERIT update: w' = w - lr * clip(s * (u + lambda*w), 1).

    2-D parameters get the full element-wise ratio tensor; vectors and
    scalars use the weight-wise max-norm ratio alone (or ratio 1 when
    ``exempt_vectors`` is set, mirroring optimizers that skip trust scaling
    for normalization gains).  ``elementwise=False`` forces s to the
    weight-wise ratio everywhere and ``clip=False`` disables the final
    clamp; together they reduce MERIT to maxLAMB, which the test suite
    checks bit-for-bit.
    """
    if w.shape != g.shape:
        raise ValueError(f"weight/gradient shape mismatch: {w.shape} vs {g.shape}")
    u = update_moments(state, g, hp)
    d = u + hp.weight_decay * w
    ratios: TrustRatios | None = None
    if w.ndim == 2 and elementwise:
        ratios = merit_trust_ratios(w, d)
        s = ratios.s
        b = ratios.b
    elif w.ndim != 2 and exempt_vectors:
        s = 1.0
        b = 1.0
    else:
        b = _safe_ratio(max_norm(w), max_norm(d))
        s = b
    pre_clip = s * d
    update = clip_elementwise(pre_clip, hp.clip_threshold) if clip else pre_clip
    return w - lr * update, StepDiagnostics(pre_clip=pre_clip, b=b, ratios=ratios)


def maxlamb_step(
    w: Tensor,
    g: Tensor,
    state: OptimState,
    hp: HyperParams,
    lr: float,
    *,
    norm_fn=max_norm,
) -> Tensor:
    """LAMB-style update with a max-norm trust ratio, no clipping.

    ``norm_fn`` exists so tests can substitute the l2 norm and confirm the
    result coincides with ``lamb_step`` exactly.
    """
    if w.shape != g.shape:
        raise ValueError(f"weight/gradient shape mismatch: {w.shape} vs {g.shape}")
    u = update_moments(state, g, hp)
    d = u + hp.weight_decay * w
    ratio = _safe_ratio(norm_fn(w), norm_fn(d))
    return w - lr * (ratio * d)


def lamb_step(
    w: Tensor, g: Tensor, state: OptimState, hp: HyperParams, lr: float
) -> Tensor:
    """LAMB update: raw-moment direction scaled by the l2 trust ratio."""
    if w.shape != g.shape:
        raise ValueError(f"weight/gradient shape mismatch: {w.shape} vs {g.shape}")
    u = update_moments(state, g, hp)
    d = u + hp.weight_decay * w
    ratio = lamb_trust_ratio(w, d)
    return w - lr * (ratio * d)


OPTIMIZERS = ("adamw", "lamb", "maxlamb", "merit")


def apply_updates(
    optimizer: str,
    params: dict[str, Tensor],
    grads: dict[str, Tensor],
    states: dict[str, OptimState],
    hp: HyperParams,
    lr: float,
    *,
    exempt_vectors: bool = False,
) -> tuple[dict[str, Tensor], dict[str, StepDiagnostics] | None]:
    """Apply one optimizer step to every parameter tensor.

    Gradients are expected to be globally clipped already.  Returns the new
    parameter map plus per-parameter MERIT diagnostics (None for the other
    optimizers, which expose no trust-ratio internals).
    """
    if optimizer not in OPTIMIZERS:
        raise ValueError(f"unknown optimizer {optimizer!r}; expected one of {OPTIMIZERS}")
    new_params: dict[str, Tensor] = {}
    diags: dict[str, StepDiagnostics] | None = {} if optimizer == "merit" else None
    for name, w in params.items():
        g, st = grads[name], states[name]
        if optimizer == "adamw":
            new_params[name] = adamw_step(w, g, st, hp, lr)
        elif optimizer == "lamb":
            new_params[name] = lamb_step(w, g, st, hp, lr)
        elif optimizer == "maxlamb":
            new_params[name] = maxlamb_step(w, g, st, hp, lr)
        else:
            new_params[name], diags[name] = merit_step(
                w, g, st, hp, lr, exempt_vectors=exempt_vectors
            )
    return new_params, diags


def cosine_lr(step: int, sched: Schedule, peak: float) -> float:
    """LR at a 1-indexed step: linear warmup to peak, cosine decay to floor.

    The floor is ``floor_fraction * peak``, reached exactly at total_steps.
    """
    if step < 0 or step > sched.total_steps:
        raise ValueError(f"step {step} outside [0, {sched.total_steps}]")
    warmup = sched.warmup_steps
    if step <= warmup and warmup > 0:
        return peak * step / warmup
    floor = sched.floor_fraction * peak
    span = sched.total_steps - warmup
    if span == 0:
        return peak
    progress = (step - warmup) / span
    return floor + (peak - floor) * 0.5 * (1.0 + math.cos(math.pi * progress))


def global_grad_clip(
    grads: dict[str, Tensor], threshold: float
) -> tuple[dict[str, Tensor], float]:
    """Rescale the whole gradient map so its global l2 norm is <= threshold.

    Accumulation over tensors follows dict insertion order for determinism.
    Returns the (possibly rescaled) map and the pre-clip global norm.
    """
    if threshold <= 0:
        raise ValueError(f"threshold must be > 0, got {threshold}")
    total = 0.0
    for g in grads.values():
        total += float(np.sum(np.asarray(g) ** 2))
    global_norm = math.sqrt(total)
    if global_norm <= threshold:
        return {k: g for k, g in grads.items()}, global_norm
    scale = threshold / global_norm
    return {k: g * scale for k, g in grads.items()}, global_norm
