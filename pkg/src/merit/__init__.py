"""MERIT: max-normalized element-wise trust-ratio optimization.

A numpy library implementing the MERIT update rule alongside AdamW, LAMB,
and maxLAMB baselines, a small decoder-only transformer with exact manual
gradients for testing them, and diagnostics for attention-logit growth and
loss-surface curvature.
"""

from merit.tensor import (
    SeededRng,
    Tensor,
    as_tensor,
    clip_elementwise,
    col_max_norms,
    l2_norm,
    matmul,
    max_norm,
    row_max_norms,
    seeded_normal,
    softmax_rows,
)
from merit.optim import (
    HyperParams,
    OptimState,
    Schedule,
    StepDiagnostics,
    TrustRatios,
    adamw_step,
    cosine_lr,
    global_grad_clip,
    lamb_step,
    lamb_trust_ratio,
    maxlamb_step,
    merit_step,
    merit_trust_ratios,
    update_moments,
)

__version__ = "0.1.0"

__all__ = [
    "SeededRng",
    "Tensor",
    "as_tensor",
    "clip_elementwise",
    "col_max_norms",
    "l2_norm",
    "matmul",
    "max_norm",
    "row_max_norms",
    "seeded_normal",
    "softmax_rows",
    "HyperParams",
    "OptimState",
    "Schedule",
    "StepDiagnostics",
    "TrustRatios",
    "adamw_step",
    "cosine_lr",
    "global_grad_clip",
    "lamb_step",
    "lamb_trust_ratio",
    "maxlamb_step",
    "merit_step",
    "merit_trust_ratios",
    "update_moments",
]
