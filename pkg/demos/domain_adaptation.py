"""Covariate-shift regression: learned weights against the usual baselines.

Trains every domain-adaptation method on one synthetic draw and prints the
risk on the shifted target sample.  Takes about a minute.

Run: python3 demos/domain_adaptation.py [n]
"""
import sys

from rcfr import experiments as ex

n = int(sys.argv[1]) if len(sys.argv) > 1 else 200
cfg = ex.da_config(max_epochs=2000)

print(f"n = m = {n}, d = 10")
for method in ex.DA_METHODS:
    rep = ex.run_da_cell(n, n, 10, seed=0, method=method, cfg=cfg)
    print(f"{method:10s} target risk {rep.target_risk:.5f}")
