"""Using the QP kernel directly on a small box-constrained problem.

minimize (x0 - 3)^2 + (x1 + 1)^2 + x0*x1   s.t.  x0 + x1 = 1,  0 <= x <= 2
"""

import numpy as np
import scipy.sparse as sp

from p2phvac.qp import QpProblem, SolverSettings, kkt_residual, solve_qp

Q = sp.csc_matrix([[2.0, 1.0], [1.0, 2.0]])
q = np.array([-6.0, 2.0])
p = QpProblem(Q, q, [[1.0, 1.0]], [1.0], lower=[0.0, 0.0], upper=[2.0, 2.0])

sol = solve_qp(p)
print("status   ", sol.status)
print("x        ", np.round(sol.primal, 9) + 0.0)
print("objective", sol.objective + 10.0)  # add back the dropped constant 9 + 1
print("KKT      ", kkt_residual(p, sol.primal, sol.eq_duals, sol.bound_duals))

# a second solve with a shifted linear term reuses the factorization
shifted = QpProblem(Q, q + 0.5, p.eq_matrix, p.eq_rhs, p.lower, p.upper)
warm = solve_qp(shifted, initial=sol)
print("warm x   ", np.round(warm.primal, 9) + 0.0, "after", warm.iterations, "iterations")

# record the fixed-point residual of every iteration
traced = solve_qp(p, SolverSettings(record_trace=True, polish=False, tolerance=1e-10))
print("residual trace (first 5):", np.round(traced.trace[:5], 6))
