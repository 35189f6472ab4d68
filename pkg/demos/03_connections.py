"""Heteroclinic connections from L2 to L1 at h = -1.5755.

Run with ``python demos/03_connections.py``. Takes under a minute.

Planar connections between the Lyapunov orbits come from intersecting two
curves on the section ``x = mu - 1``. They are then refined by multiple
shooting with ``s3`` and ``s4`` pinned to zero on both sides. The full
problem has a two-dimensional family of solutions. A small out-of-plane kick
followed by minimum-norm Newton steps lands on a spatial member of it.
"""
import numpy as np

from heteroclinic import build_parameterization, libration_context
from heteroclinic.connect import (
    ShootingSystem,
    check_record,
    diagnostics,
    kernel_dimension,
    newton_minnorm,
    planar_connections,
    record_from_solution,
)

H = -1.5755
ps = build_parameterization(libration_context(1), 12)
pu = build_parameterization(libration_context(2), 12)

# one crossing on each side of the section
records, failures = planar_connections(pu, ps, H, 1, 1, n_theta=200)
print(f"planar connections: {len(records)} (failed candidates: {len(failures)})")
for r in records:
    dmin, zmax, total = diagnostics(r, pu, ps)
    print(f"  s_u = {np.array2string(r.s_hat_u[:2], precision=6)}  "
          f"s_s = {np.array2string(r.s_hat_s[:2], precision=6)}  "
          f"T = {total:.4f}  closest Moon approach {dmin:.4f}  residual {r.residual:.1e}")

# a spatial connection near the first planar one
r = records[0]
system = ShootingSystem(pu, ps, H, len(r.nodes_u) - 1, len(r.nodes_s) - 1, r.delta_u, r.delta_s)
X0 = system.pack(r.s_hat_u, r.T_u, r.nodes_u, r.s_hat_s, r.T_s, r.nodes_s)
X0[[2, 3]] += 1e-3  # s3u, s4u
X, res, its = newton_minnorm(system.reduced(X0), X0)
spatial = record_from_solution(system, X, res)
_, J = system.residual(X)
print(f"spatial connection after {its} Newton steps: residual {res:.1e}, "
      f"kernel dimension {kernel_dimension(J)}")
print(f"  s3u, s4u = {spatial.s_hat_u[2]:.6f}, {spatial.s_hat_u[3]:.6f}  "
      f"max |z| = {diagnostics(spatial, pu, ps)[1]:.2e}")
print("  defining equations:", {k: f"{v:.1e}" if isinstance(v, float) else v
                                for k, v in check_record(spatial, pu, ps).items()})
