"""The optimizer family tree, verified bit for bit.

merit, maxlamb, lamb, and adamw share one moment engine and differ only in
how they scale the update.  Two substitutions collapse the family:

  merit with s := b and clipping off   ==  maxlamb      (exactly)
  maxlamb with the l2 norm             ==  lamb         (exactly)

The script proves both identities on random data, then races all four on a
convex quadratic to show the practical difference: trust-ratio methods keep
step sizes tied to weight scale, so they tolerate a much larger lr.
"""

import numpy as np

from merit.optim import (
    HyperParams,
    OptimState,
    adamw_step,
    apply_updates,
    lamb_step,
    maxlamb_step,
    merit_step,
)
from merit.tensor import SeededRng, l2_norm

rng = SeededRng(7)
hp = HyperParams(peak_lr=1.0, weight_decay=0.1)

print("identity checks on 100 random step sequences:")
exact_a = exact_b = True
for _ in range(100):
    w0 = rng.normal((4, 5))
    states = [OptimState.zeros_like(w0) for _ in range(4)]
    wa = wb = wc = wd = w0
    for _ in range(3):
        g = rng.normal((4, 5))
        wa = maxlamb_step(wa, g, states[0], hp, 0.01, norm_fn=l2_norm)
        wb = lamb_step(wb, g, states[1], hp, 0.01)
        wc, _ = merit_step(wc, g, states[2], hp, 0.01, elementwise=False, clip=False)
        wd = maxlamb_step(wd, g, states[3], hp, 0.01)
        exact_a &= np.array_equal(wa, wb)
        exact_b &= np.array_equal(wc, wd)
print("  maxlamb[l2 norm] == lamb bitwise:          ", exact_a)
print("  merit[s := b, no clip] == maxlamb bitwise: ", exact_b)

print("\nrace on f(w) = 0.5 w'Aw, A = diag(1..10), 800 steps:")
a = np.diag(np.arange(1.0, 11.0))
for lr in (0.01, 0.1):
    line = [f"  lr={lr:<5}"]
    for opt in ("adamw", "lamb", "maxlamb", "merit"):
        w = {"w": SeededRng(0).normal(10)}
        states = {"w": OptimState.zeros_like(w["w"])}
        run_hp = HyperParams(peak_lr=lr, weight_decay=0.0)
        for _ in range(800):
            g = {"w": a @ w["w"]}
            w, _ = apply_updates(opt, w, g, states, run_hp, lr)
        loss = 0.5 * float(w["w"] @ a @ w["w"])
        line.append(f"{opt}: {loss:9.2e}")
    print("  ".join(line))
print("\nat lr=0.1 the unscaled adamw steps orbit the minimum, while the")
print("trust-ratio members shrink their steps with the weights and converge.")
