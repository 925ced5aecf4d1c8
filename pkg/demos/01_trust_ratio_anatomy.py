"""Anatomy of the element-wise trust ratio.

Walks one 2x2 example through the ratio construction: row ratios, column
ratios, the weight-wise lower bound, and the element-wise combination
s[i,j] = max(max(r_i, c_j), b).  Then shows the two safety properties that
make the ratios usable on raw training signals: degenerate rows fall back
to a neutral ratio of 1, and rescaling weights and updates together leaves
every ratio unchanged.
"""

import numpy as np

from merit.optim import HyperParams, OptimState, merit_step, merit_trust_ratios

w = np.array([[2.0, -1.0], [0.5, 4.0]])
d = np.array([[1.0, 0.5], [2.0, 1.0]])

print("weights w:\n", w)
print("update direction d:\n", d)

ratios = merit_trust_ratios(w, d)
print("\nrow ratios   r_i = max|w_i.| / max|d_i.| =", ratios.r)
print("column ratios c_j = max|w_.j| / max|d_.j| =", ratios.c)
print("weight-wise  b = max|w| / max|d|          =", ratios.b)
print("combined s[i,j] = max(max(r_i, c_j), b):\n", ratios.s)

# a zero row in d would divide by zero; the ratio falls back to 1
d_degenerate = d.copy()
d_degenerate[0, :] = 0.0
fallback = merit_trust_ratios(w, d_degenerate)
print("\nwith d row 0 zeroed, r =", fallback.r, "(degenerate ratio -> 1)")

# ratios compare magnitudes of w against d, so joint rescaling cancels
for alpha in (0.5, 10.0):
    scaled = merit_trust_ratios(alpha * w, alpha * d)
    print(f"scale w, d by {alpha:>4}: max |s - s_scaled| =",
          float(np.max(np.abs(scaled.s - ratios.s))))

# the full step: scale d by s, clamp each element to 1, descend
hp = HyperParams(peak_lr=1.0, weight_decay=0.0)
state = OptimState.zeros_like(w)
g = np.array([[5.0, 0.1], [-0.2, 0.3]])
w_next, diag = merit_step(w, g, state, hp, lr=0.1)
print("\none optimizer step at lr=0.1 from gradient g:\n", g)
print("pre-clip scaled update s*d:\n", diag.pre_clip)
print("applied step w - w':\n", w - w_next)
print("note every applied element is at most lr =", 0.1)
