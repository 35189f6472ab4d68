"""Iso-energetic slices of the center manifold and the error in the orbit.

Run with ``python demos/02_slices_and_error.py``. Takes about a minute.

A slice is the set of ``(s1, s2, s3, s4)`` with ``H(W~(s, 0)) = h``. For each
``(s1, s2, s4)`` column the code solves for ``s3``. The slice points seed the
fibers ``W~(s, delta)`` that leave the center manifold. The error in the orbit
compares the reduced flow mapped through ``W~`` with the RTBP flow of ``W~(s0)``.
"""
import time

import numpy as np

from heteroclinic import build_parameterization, libration_context
from heteroclinic.slicing import error_in_orbit, mesh_slice, slice_energy

p = build_parameterization(libration_context(1), 16)

# a coarse slice at h = -1.586; strategies 2, 3 and 4 give the same points
for strategy in (4, 3, 2):
    mesh_slice(-1.586, p, n_per_axis=3, strategy=strategy)  # compile
    t0 = time.perf_counter()
    mesh = mesh_slice(-1.586, p, n_per_axis=11, strategy=strategy)
    print(f"strategy {strategy}: {len(mesh)} points in {time.perf_counter() - t0:.2f} s")

energies = [slice_energy(p, s) for s in mesh.points]
print(f"energy spread on the slice: {np.ptp(energies):.1e} around {np.mean(energies):.6f}")
print(f"slice extent: |s1, s2| <= {np.abs(mesh.points[:, :2]).max():.4f}, "
      f"|s3, s4| <= {np.abs(mesh.points[:, 2:]).max():.4f}")

# error in the orbit along cs(L1): -delta, forward time
mesh = mesh_slice(-1.575, p, n_per_axis=5)
pts = mesh.points[:: max(1, len(mesh) // 6)]
delta, T = p.ctx.delta_sign * 1e-3, 3.0
print("order  max e_O")
for N in (8, 12, 16):
    q = p.truncated(N) if N < p.order else p
    e = max(error_in_orbit(q, np.r_[s, delta], T) for s in pts)
    print(f"{N:5d}  {e:.2e}")
