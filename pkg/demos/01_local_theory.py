"""Local theory around L1 and L2: libration points, eigen-frames, manifold expansions.

Run with ``python demos/01_local_theory.py``. Takes about half a minute,
most of it numba compilation.

The script walks through the first steps of the method:

1. locate the collinear points and read off their linear frequencies;
2. build the center-stable manifold of L1 and the center-unstable manifold
   of L2 as truncated power series;
3. check that the invariance residual shrinks at the expected rate;
4. compare the energy on the center manifold with its quadratic model.
"""
import numpy as np

from heteroclinic import build_parameterization, libration_context
from heteroclinic.parameterize import residual_series, truncation_residual
from heteroclinic.slicing import quadratic_energy, slice_energy

ORDER = 12

# 1. libration points and linear frequencies
ctx = {j: libration_context(j) for j in (1, 2)}
for j, c in ctx.items():
    print(f"L{j}: x = {c.x_L:.12f}  gamma = {c.gamma:.12f}  h0 = {c.h0:.12f}")
    print(f"    omega_p = {c.omega_p:.15f}  omega_v = {c.omega_v:.15f}  lambda = {c.lam:.12f}")
    print(f"    manifold: {c.manifold_kind}")

# 2. expansions; coefficients of degree k do not depend on the truncation order
p = {j: build_parameterization(ctx[j], ORDER) for j in (1, 2)}
for j, q in p.items():
    print(f"L{j}: order {q.order}, {q.W.shape[1]} monomials, "
          f"{np.count_nonzero(q.f)} nonzero reduced-field coefficients")

# 3. invariance residual G(W(s)) - DW(s) f(s) at radius rho and rho/2
rng = np.random.default_rng(0)
U = rng.normal(size=(10, 5))
U /= np.linalg.norm(U, axis=1)[:, None]
for j, q in p.items():
    R, idx = residual_series(q)
    E = [max(np.linalg.norm(truncation_residual(R, idx, q.order, q.ctx.C @ (r * u))) for u in U)
         for r in (1e-2, 5e-3)]
    print(f"L{j}: E(1e-2) = {E[0]:.2e}  log2 E(5e-3)/E(1e-2) = {np.log2(E[1] / E[0]):.2f} "
          f"(expected near -{q.order + 1})")

# 4. energy on the center manifold: quadratic model plus a cubic remainder
u = np.array([0.3, -0.5, 0.6, 0.2])
u /= np.linalg.norm(u)
for j, q in p.items():
    rem = [slice_energy(q, r * u) - quadratic_energy(r * u, q.ctx) for r in (4e-3, 2e-3)]
    print(f"L{j}: remainder halving ratio {rem[0] / rem[1]:.3f} (cubic: 8)")

# the realified manifold maps small real coordinates to real RTBP states
s = np.array([0.01, 0.0, 0.005, 0.0, 1e-3])
print("W~(s) for L2:", np.array2string(p[2].eval_Wtilde(s), precision=6))
