"""Random problem generators shared by several test modules."""

import numpy as np
import scipy.sparse as sp

from p2phvac.qp import QpProblem


def random_qp(rng, n, rank=None, n_eq=None, infinite_bounds=False):
    """A feasible, bounded random QP with PSD quad of the given rank."""
    rank = n if rank is None else rank
    M = rng.standard_normal((n, rank))
    Q = M @ M.T / max(rank, 1)
    q = rng.standard_normal(n) * 2
    n_eq = rng.integers(0, max(1, n // 3) + 1) if n_eq is None else n_eq
    lo = -rng.uniform(0.5, 3.0, n)
    hi = rng.uniform(0.5, 3.0, n)
    x0 = rng.uniform(lo, hi)
    A = rng.standard_normal((n_eq, n))
    if infinite_bounds and rank == n:
        free = rng.random(n) < 0.3
        lo[free] = -np.inf
        hi[rng.random(n) < 0.3] = np.inf
    return QpProblem(sp.csc_matrix(Q), q, sp.csc_matrix(A), A @ x0, lo, hi)
