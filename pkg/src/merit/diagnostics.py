"""Measurement instruments for training dynamics.

Covers the quantities used to study why element-wise trust ratios stabilize
large-batch training: the attention-logit upper bound and its ingredients,
the gap between l2 and max norms of weight matrices, how often the update
clip and the weight-wise ratio lower bound fire, row/column magnitude
similarity, loss-surface curvature probes (top Hessian eigenvalue via power
iteration, trace via Hutchinson's estimator), and a learning-rate sweep that
tracks peak attention logits per layer.

Curvature probes work on any gradient oracle ``grad_fn(params) -> grads``
over a dict of tensors; thin wrappers bind them to the transformer.  The
Hessian-vector product is a central difference of the exact analytic
gradient, which keeps the gradient engine first-order while meeting 1e-6
accuracy on quadratic fixtures in 64-bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from merit.model import ModelConfig, init_params, loss_and_grads
from merit.optim import (
    HyperParams,
    OptimState,
    StepDiagnostics,
    TrustRatios,
    apply_updates,
    global_grad_clip,
)
from merit.tensor import SeededRng, Tensor, l2_norm, max_norm

GradFn = Callable[[dict[str, Tensor]], dict[str, Tensor]]


@dataclass
class CurvatureReport:
    """Top-eigenvalue and trace estimates for the loss Hessian."""

    top_eigenvalue: float
    trace_estimate: float
    probes_used: int
    power_iters: int
    residual: float


@dataclass
class TriggerStats:
    """How often the element-wise clip and the weight-wise bound fire."""

    clip_fraction: float
    bound_fraction: float
    per_layer: dict[str, tuple[float, float]] = field(default_factory=dict)


@dataclass
class SweepRow:
    """Peak per-layer max attention logit for one learning rate."""

    lr: float
    peak_mal: list[float]
    final_loss: float
    diverged: bool


def logit_upper_bound(m_q: float, m_k: float, c_x: float, d: int) -> float:
    """Worst-case attention logit sqrt(d) * M_Q * M_K * C_X^2.

    M_Q, M_K bound the max norms of the query/key weights; C_X bounds the
    row-wise absolute sum of the input; d is the dot-product (head) width.
    Zero norms are admissible and give a zero bound.
    """
    if m_q < 0 or m_k < 0 or c_x < 0:
        raise ValueError("norm bounds must be nonnegative")
    if d <= 0:
        raise ValueError(f"dimension must be positive, got {d}")
    return math.sqrt(d) * m_q * m_k * c_x * c_x


def norm_gap_ratio(w: Tensor) -> float:
    """Relative gap (||W||_2 - ||W||_max) / ||W||_2, in [0, 1).

    Near 1 for large dense matrices (the l2 norm aggregates many elements),
    exactly 0 only when a single element carries all the mass.
    """
    l2 = l2_norm(w)
    if l2 == 0.0:
        raise ValueError("norm gap undefined for an all-zero tensor")
    return (l2 - max_norm(w)) / l2


def clip_trigger_ratio(pre_clip: Tensor, threshold: float = 1.0) -> float:
    """Fraction of update elements whose magnitude strictly exceeds the
    clip threshold, i.e. the elements the clamp actually changes."""
    pre_clip = np.asarray(pre_clip)
    if pre_clip.size == 0:
        return 0.0
    return float(np.count_nonzero(np.abs(pre_clip) > threshold)) / pre_clip.size


def bound_trigger_ratio(tr: TrustRatios) -> float:
    """Fraction of positions where the weight-wise ratio b strictly beats
    both the row and column ratios (ties do not count as triggers)."""
    rc = np.maximum(tr.r[:, None], tr.c[None, :])
    return float(np.count_nonzero(tr.b > rc)) / rc.size


def trigger_stats(
    step_diags: dict[str, StepDiagnostics], threshold: float = 1.0
) -> TriggerStats:
    """Aggregate clip/bound trigger fractions over one step's parameters.

    The global fractions are element-weighted; the bound fraction counts
    only 2-D parameters since vectors carry no row/column ratios.
    """
    clip_hits = clip_total = 0
    bound_hits = bound_total = 0
    per_layer: dict[str, tuple[float, float]] = {}
    for name, diag in step_diags.items():
        pc = np.asarray(diag.pre_clip)
        hits = int(np.count_nonzero(np.abs(pc) > threshold))
        clip_hits += hits
        clip_total += pc.size
        if diag.ratios is not None:
            bf = bound_trigger_ratio(diag.ratios)
            bound_hits += int(round(bf * diag.ratios.s.size))
            bound_total += diag.ratios.s.size
            per_layer[name] = (hits / pc.size, bf)
        else:
            per_layer[name] = (hits / pc.size if pc.size else 0.0, 0.0)
    return TriggerStats(
        clip_fraction=clip_hits / clip_total if clip_total else 0.0,
        bound_fraction=bound_hits / bound_total if bound_total else 0.0,
        per_layer=per_layer,
    )


def _mean_pairwise_cosine(rows: Tensor) -> float:
    norms = np.sqrt((rows * rows).sum(axis=1))
    keep = norms > 0
    u = rows[keep] / norms[keep][:, None]
    k = u.shape[0]
    if k < 2:
        return 0.0
    gram = u @ u.T
    return float((gram.sum() - np.trace(gram)) / (k * (k - 1)))


def rowcol_similarity(w: Tensor) -> tuple[float, float]:
    """Mean pairwise cosine similarity of absolute row and column profiles.

    Magnitudes (absolute values) are compared, so sign patterns do not
    affect the result.  Zero rows/columns are excluded from the means.
    """
    w = np.asarray(w)
    if w.ndim != 2 or w.shape[0] < 2 or w.shape[1] < 2:
        raise ValueError(f"similarity needs an at least 2x2 matrix, got {w.shape}")
    if not np.any(w):
        raise ValueError("similarity undefined for an all-zero matrix")
    a = np.abs(w)
    return _mean_pairwise_cosine(a), _mean_pairwise_cosine(a.T)


def _tree_dot(a: dict[str, Tensor], b: dict[str, Tensor]) -> float:
    return sum(float(np.sum(a[k] * b[k])) for k in a)


def _tree_norm(a: dict[str, Tensor]) -> float:
    return math.sqrt(_tree_dot(a, a))


def hvp(
    grad_fn: GradFn,
    params: dict[str, Tensor],
    v: dict[str, Tensor],
    eps_scale: float = 1e-3,
) -> dict[str, Tensor]:
    """Hessian-vector product by central differences of the gradient:
    Hv = (grad(w + eps v) - grad(w - eps v)) / (2 eps), eps = eps_scale/||v||."""
    vnorm = _tree_norm(v)
    if vnorm == 0.0:
        raise ValueError("hvp direction must be nonzero")
    eps = eps_scale / vnorm
    plus = {k: params[k] + eps * v[k] for k in params}
    minus = {k: params[k] - eps * v[k] for k in params}
    gp = grad_fn(plus)
    gm = grad_fn(minus)
    return {k: (gp[k] - gm[k]) / (2.0 * eps) for k in params}


def curvature_report(
    grad_fn: GradFn,
    params: dict[str, Tensor],
    rng: SeededRng,
    power_iters: int = 50,
    tol: float = 1e-6,
    probes: int = 100,
) -> CurvatureReport:
    """Power-iterate the HVP for the top eigenvalue; Hutchinson for trace.

    The eigenvalue is the Rayleigh quotient of the final iterate; residual
    is ||Hv - lambda v|| for the unit iterate v, reported as-is when the
    iteration budget runs out (no exception on non-convergence).  The trace
    estimate averages z'Hz over Rademacher probe vectors z.
    """
    if power_iters < 1:
        raise ValueError(f"power_iters must be >= 1, got {power_iters}")
    if probes < 1:
        raise ValueError(f"probes must be >= 1, got {probes}")
    v = {k: rng.normal(p.shape) for k, p in params.items()}
    vn = _tree_norm(v)
    v = {k: t / vn for k, t in v.items()}
    lam = 0.0
    residual = math.inf
    iters_used = 0
    for i in range(power_iters):
        hv = hvp(grad_fn, params, v)
        lam = _tree_dot(v, hv)
        resid_vec = {k: hv[k] - lam * v[k] for k in hv}
        residual = _tree_norm(resid_vec)
        iters_used = i + 1
        hv_norm = _tree_norm(hv)
        if hv_norm == 0.0 or residual < tol:
            break
        v = {k: t / hv_norm for k, t in hv.items()}
    trace_acc = 0.0
    for _ in range(probes):
        z = {k: rng.rademacher(p.shape).astype(p.dtype) for k, p in params.items()}
        hz = hvp(grad_fn, params, z)
        trace_acc += _tree_dot(z, hz)
    return CurvatureReport(
        top_eigenvalue=lam,
        trace_estimate=trace_acc / probes,
        probes_used=probes,
        power_iters=iters_used,
        residual=residual,
    )


def model_grad_fn(cfg: ModelConfig, tokens, targets) -> GradFn:
    """Gradient oracle of the transformer loss on a fixed batch."""

    def grad_fn(params: dict[str, Tensor]) -> dict[str, Tensor]:
        return loss_and_grads(cfg, params, tokens, targets)[1]

    return grad_fn


def model_hvp(
    cfg: ModelConfig, params: dict[str, Tensor], tokens, targets, v: dict[str, Tensor]
) -> dict[str, Tensor]:
    return hvp(model_grad_fn(cfg, tokens, targets), params, v)


def model_curvature(
    cfg: ModelConfig,
    params: dict[str, Tensor],
    tokens,
    targets,
    rng: SeededRng,
    power_iters: int = 50,
    tol: float = 1e-6,
    probes: int = 100,
) -> CurvatureReport:
    return curvature_report(
        model_grad_fn(cfg, tokens, targets), params, rng, power_iters, tol, probes
    )


def lr_logit_sweep(
    cfg: ModelConfig,
    lr_list,
    steps: int,
    optimizer: str,
    seed: int = 0,
    batch_size: int = 8,
    hp: HyperParams | None = None,
    data: Tensor | None = None,
) -> list[SweepRow]:
    """Short training runs at each constant lr, tracking peak MAL per layer.

    Every run starts from the same seeded init and trains on one fixed
    batch, so the lr is the only thing that varies between rows and an
    lr of 0 reproduces the initial logits exactly.  Non-finite losses or
    logits flag the row as diverged and stop that run early.  Rows come
    back sorted by lr.
    """
    if len(lr_list) == 0:
        raise ValueError("lr_list must be nonempty")
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    hp = hp or HyperParams()
    rows = []
    for lr in sorted(float(x) for x in lr_list):
        root = SeededRng(seed)
        params = init_params(cfg, root.spawn("init"))
        states = {k: OptimState.zeros_like(w) for k, w in params.items()}
        batch_rng = root.spawn("sweep-batch")
        if data is None:
            seqs = batch_rng.integers(0, cfg.vocab_size, (batch_size, cfg.context_len + 1))
        else:
            data = np.asarray(data)
            if data.size < cfg.context_len + 1:
                raise ValueError("data shorter than context_len + 1")
            starts = batch_rng.integers(0, data.size - cfg.context_len - 1, batch_size)
            seqs = np.stack([data[s : s + cfg.context_len + 1] for s in starts])
        tokens, targets = seqs[:, :-1], seqs[:, 1:]
        peak = [-math.inf] * cfg.n_layer
        final_loss = math.nan
        diverged = False
        for _ in range(steps):
            # divergence is an expected, flagged outcome; keep numpy quiet
            with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
                loss, grads, probes = loss_and_grads(cfg, params, tokens, targets)
            mals = [p.max_logit for p in probes]
            if not math.isfinite(loss) or not all(math.isfinite(m) for m in mals):
                diverged = True
                break
            final_loss = loss
            peak = [max(a, b) for a, b in zip(peak, mals)]
            grads, _ = global_grad_clip(grads, hp.global_grad_clip)
            params, _ = apply_updates(optimizer, params, grads, states, hp, lr)
        rows.append(SweepRow(lr=lr, peak_mal=peak, final_loss=final_loss, diverged=diverged))
    return rows
