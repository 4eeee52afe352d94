"""How the weighted MMD reacts to a mean shift, and how reweighting closes it.

Run: python3 demos/mmd_shift.py
"""
import numpy as np

from rcfr.baselines import is_weights_gaussian
from rcfr.ipm import KernelConfig, weighted_mmd2
from rcfr.numerics import make_rng

rng = make_rng(0)
d, n = 2, 400
kernel = KernelConfig()
target = rng.standard_normal((n, d))

print("shift   mmd2 (uniform)   mmd2 (density-ratio weights)")
for shift in (0.0, 0.25, 0.5, 1.0):
    m_src = np.full(d, shift)
    source = m_src + rng.standard_normal((n, d))
    uniform = np.ones(n)
    w = is_weights_gaussian(source, m_src, np.zeros(d))
    a = weighted_mmd2(source, uniform, target, kernel).value
    b = weighted_mmd2(source, w, target, kernel).value
    print(f"{shift:5.2f}   {a:14.5f}   {b:14.5f}")
