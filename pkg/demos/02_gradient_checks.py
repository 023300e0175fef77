"""Finite-difference gradient checks, from one op up to the whole transfer model.

Run: python demos/02_gradient_checks.py
"""
import numpy as np

from art_transfer import art, gradcheck
from art_transfer import numcore as nc

# one op by hand: d/dx sum(tanh(W x)) against central differences
rng = np.random.default_rng(1)
err = nc.grad_check(lambda x, W: nc.sum(nc.tanh(nc.linear(x, W))),
                    [rng.normal(size=3), rng.normal(size=(2, 3))])
print(f"linear + tanh: worst relative error {err:.2e}")

# every registered component on a handful of seeds
for r in gradcheck.run_suite(seeds=5):
    print(f"{r.name:<12} {r.worst:.2e} {'PASS' if r.ok else 'FAIL'}")

# a corrupted gradient is caught, and only where it lives
art.FAULTS.add("fuse.C_z")
try:
    broken = gradcheck.run_suite(["context", "fuse"], seeds=2)
finally:
    art.FAULTS.discard("fuse.C_z")
print("with a corrupted C_z gradient:", {r.name: "PASS" if r.ok else "FAIL" for r in broken})
