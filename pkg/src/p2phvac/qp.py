"""Structured convex QP kernel.

Solves

    minimize    1/2 x'Qx + q'x
    subject to  A x = a,  lb <= x <= ub

with Q symmetric positive semidefinite.  The method is operator splitting
(ADMM on the box/equality splitting) with Ruiz equilibration, adaptive
step size and an active-set polishing pass that lifts the ADMM iterate to
a high-accuracy KKT point.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
ITERATION_LIMIT = "iteration_limit"


def _as_csc(mat, shape=None):
    if mat is None:
        return sp.csc_matrix(shape)
    if sp.issparse(mat):
        return sp.csc_matrix(mat, dtype=float)
    return sp.csc_matrix(np.atleast_2d(np.asarray(mat, dtype=float)))


@dataclass(frozen=True, eq=False)
class QpProblem:
    """A convex QP in canonical box/equality form.

    ``quad`` must be symmetric PSD; ``lower``/``upper`` may hold infinities.
    Missing equality data means no equality rows.
    """

    quad: sp.csc_matrix
    lin: np.ndarray
    eq_matrix: Optional[sp.csc_matrix] = None
    eq_rhs: Optional[np.ndarray] = None
    lower: Optional[np.ndarray] = None
    upper: Optional[np.ndarray] = None
    check_psd: bool = field(default=True, repr=False)

    def __post_init__(self):
        lin = np.asarray(self.lin, dtype=float).ravel()
        n = lin.size
        quad = _as_csc(self.quad, (n, n))
        eq = _as_csc(self.eq_matrix, (0, n))
        rhs = np.zeros(0) if self.eq_rhs is None else np.asarray(self.eq_rhs, dtype=float).ravel()
        lower = np.full(n, -np.inf) if self.lower is None else np.asarray(self.lower, dtype=float).ravel()
        upper = np.full(n, np.inf) if self.upper is None else np.asarray(self.upper, dtype=float).ravel()

        if quad.shape != (n, n):
            raise ValueError(f"quad has shape {quad.shape}, expected {(n, n)}")
        if eq.shape[1] != n:
            raise ValueError(f"eq_matrix has {eq.shape[1]} columns, expected {n}")
        if eq.shape[0] != rhs.size:
            raise ValueError(f"eq_rhs has length {rhs.size}, expected {eq.shape[0]}")
        if lower.size != n or upper.size != n:
            raise ValueError("bound vectors must have length dim")
        if np.any(lower > upper):
            i = int(np.flatnonzero(lower > upper)[0])
            raise ValueError(f"lower > upper at index {i}")
        if np.any(np.isnan(lin)) or np.any(np.isnan(rhs)):
            raise ValueError("NaN in problem data")
        asym = abs(quad - quad.T)
        if asym.nnz and asym.max() > 1e-10 * max(1.0, abs(quad).max()):
            raise ValueError("quad is not symmetric")
        if self.check_psd and n:
            # curvature along fixed random probes plus the coordinate axes
            rng = np.random.default_rng(0)
            probes = rng.standard_normal((n, 8))
            curv = np.einsum("ij,ij->j", probes, quad @ probes)
            scale = max(1.0, abs(quad).max()) * np.einsum("ij,ij->j", probes, probes)
            if np.any(curv < -1e-10 * scale) or np.any(quad.diagonal() < -1e-12):
                raise ValueError("quad is not positive semidefinite")

        object.__setattr__(self, "quad", quad)
        object.__setattr__(self, "lin", lin)
        object.__setattr__(self, "eq_matrix", eq)
        object.__setattr__(self, "eq_rhs", rhs)
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)

    @property
    def dim(self) -> int:
        return self.lin.size

    def objective(self, x) -> float:
        x = np.asarray(x, dtype=float)
        return float(0.5 * x @ (self.quad @ x) + self.lin @ x)


@dataclass(frozen=True)
class SolverSettings:
    tolerance: float = 1e-8
    max_iter: int = 50_000
    rho: float = 0.1
    sigma: float = 1e-6
    alpha: float = 1.6
    scaling_iters: int = 10
    adaptive_rho: bool = True
    check_interval: int = 25
    polish: bool = True
    polish_refine_iters: int = 5
    polish_passes: int = 6
    polish_budget: int = 200
    polish_delta: float = 1e-9
    eps_infeasible: float = 1e-7
    record_trace: bool = False


@dataclass(frozen=True, eq=False)
class QpSolution:
    primal: np.ndarray
    eq_duals: np.ndarray
    bound_duals: tuple  # (lower multipliers, upper multipliers), both >= 0
    objective: float
    status: str
    kkt_residual: float
    iterations: int = 0
    polished: bool = False
    # fixed-point residual per iteration and the step-size segment it ran in
    trace: tuple = ()
    trace_segments: tuple = ()
    workspace: object = field(default=None, repr=False)


def kkt_residual(problem: QpProblem, x, eq_duals, bound_duals) -> float:
    """Largest of the stationarity, feasibility and complementarity residuals.

    Sign convention: ``Qx + q + A'y - z_lo + z_up = 0`` with ``z_lo, z_up >= 0``.
    Multipliers attached to infinite bounds must vanish.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(eq_duals, dtype=float)
    z_lo, z_up = (np.asarray(v, dtype=float) for v in bound_duals)
    if x.size != problem.dim or z_lo.size != problem.dim or z_up.size != problem.dim:
        raise ValueError("candidate dimensions do not match the problem")
    if y.size != problem.eq_rhs.size:
        raise ValueError("eq_duals length does not match the equality rows")

    stat = problem.quad @ x + problem.lin + problem.eq_matrix.T @ y - z_lo + z_up
    res = [np.max(np.abs(stat), initial=0.0)]
    if problem.eq_rhs.size:
        res.append(np.max(np.abs(problem.eq_matrix @ x - problem.eq_rhs)))
    lo, up = problem.lower, problem.upper
    res.append(np.max(np.maximum(lo - x, 0.0), initial=0.0))
    res.append(np.max(np.maximum(x - up, 0.0), initial=0.0))
    res.append(np.max(np.maximum(-z_lo, 0.0), initial=0.0))
    res.append(np.max(np.maximum(-z_up, 0.0), initial=0.0))
    fin_lo, fin_up = np.isfinite(lo), np.isfinite(up)
    res.append(np.max(np.abs(z_lo[~fin_lo]), initial=0.0))
    res.append(np.max(np.abs(z_up[~fin_up]), initial=0.0))
    res.append(np.max(np.abs(z_lo[fin_lo] * (x[fin_lo] - lo[fin_lo])), initial=0.0))
    res.append(np.max(np.abs(z_up[fin_up] * (up[fin_up] - x[fin_up])), initial=0.0))
    return float(max(res))


class _Workspace:
    """Problem in ``l <= C x <= u`` form after Ruiz equilibration, plus the KKT factor.

    A workspace stays valid for any problem with the same ``quad``,
    ``eq_matrix`` and bound pattern, so repeated solves that only change the
    linear term or bound values skip scaling and factorization.
    """

    def __init__(self, problem: QpProblem, settings: SolverSettings):
        n = problem.dim
        self.n = n
        self.n_eq = problem.eq_rhs.size
        self.quad_ref = problem.quad
        self.eq_ref = problem.eq_matrix
        self.box_idx = np.flatnonzero(np.isfinite(problem.lower) | np.isfinite(problem.upper))
        sel = sp.csc_matrix(
            (np.ones(self.box_idx.size), (np.arange(self.box_idx.size), self.box_idx)),
            shape=(self.box_idx.size, n),
        )
        P = problem.quad
        C = sp.vstack([problem.eq_matrix, sel], format="csc")
        m = C.shape[0]
        p_rows, p_cols = P.indices, np.repeat(np.arange(n), np.diff(P.indptr))
        c_rows, c_cols = C.indices, np.repeat(np.arange(n), np.diff(C.indptr))
        abs_p, abs_c = np.abs(P.data), np.abs(C.data)
        q_abs = np.abs(problem.lin)

        D, E, cost = np.ones(n), np.ones(m), 1.0
        for _ in range(settings.scaling_iters):
            norm_x = np.zeros(n)
            np.maximum.at(norm_x, p_cols, abs_p)
            np.maximum.at(norm_x, c_cols, abs_c)
            norm_c = np.zeros(m)
            np.maximum.at(norm_c, c_rows, abs_c)
            dx = 1.0 / np.sqrt(_clip_norm(norm_x))
            dc = 1.0 / np.sqrt(_clip_norm(norm_c))
            abs_p = abs_p * dx[p_rows] * dx[p_cols]
            abs_c = abs_c * dc[c_rows] * dx[c_cols]
            q_abs = q_abs * dx
            D *= dx
            E *= dc
            col_p = np.zeros(n)
            np.maximum.at(col_p, p_cols, abs_p)
            ref = max(np.mean(col_p) if n else 0.0, np.max(q_abs, initial=0.0))
            gamma = 1.0 / _clip_norm(np.array([ref]))[0]
            abs_p = abs_p * gamma
            q_abs = q_abs * gamma
            cost *= gamma

        self.P = sp.csc_matrix((P.data * cost * D[p_rows] * D[p_cols], P.indices, P.indptr), shape=P.shape)
        self.C = sp.csc_matrix((C.data * E[c_rows] * D[c_cols], C.indices, C.indptr), shape=C.shape)
        self.CT = self.C.T.tocsc()
        self.D, self.E, self.c = D, E, cost
        self.rho = settings.rho
        self.eq_pattern = None
        self.factor = None
        self.segment = 0
        self.bind(problem, settings)

    def compatible(self, problem: QpProblem) -> bool:
        if problem.dim != self.n or problem.eq_rhs.size != self.n_eq:
            return False
        if not (_same_matrix(problem.quad, self.quad_ref) and _same_matrix(problem.eq_matrix, self.eq_ref)):
            return False
        box = np.flatnonzero(np.isfinite(problem.lower) | np.isfinite(problem.upper))
        return np.array_equal(box, self.box_idx)

    def bind(self, problem: QpProblem, settings: SolverSettings):
        """Load the vectors of ``problem``; refactor only if the equality pattern moved."""
        l = np.concatenate([problem.eq_rhs, problem.lower[self.box_idx]])
        u = np.concatenate([problem.eq_rhs, problem.upper[self.box_idx]])
        self.q = self.c * self.D * problem.lin
        self.l, self.u = self.E * l, self.E * u
        is_eq = np.zeros(l.size, dtype=bool)
        is_eq[: self.n_eq] = True
        is_eq |= np.abs(l - u) < 1e-14 * np.maximum(1.0, np.abs(l))
        if self.eq_pattern is None or not np.array_equal(is_eq, self.eq_pattern):
            self.eq_pattern = is_eq
            self.set_rho(self.rho, settings)

    @property
    def is_eq(self):
        return self.eq_pattern

    def __getstate__(self):
        # SuperLU objects do not pickle; the factor is rebuilt on first use
        state = dict(self.__dict__)
        state["factor"] = None
        return state

    def __setstate__(self, state):
        self.__dict__.update(state)

    def set_rho(self, rho, settings: SolverSettings):
        self.rho = rho
        self.rho_vec = np.where(self.eq_pattern, 1e3 * rho, rho)
        self.sigma = settings.sigma
        self.factor = None

    def solve(self, rhs):
        if self.factor is None:
            K = self.P + self.sigma * sp.identity(self.n, format="csc") + self.CT @ sp.diags(self.rho_vec) @ self.C
            self.factor = spla.splu(sp.csc_matrix(K))
        return self.factor.solve(rhs)

    def triplets(self):
        """COO data of the scaled P and C, cached for the polishing systems."""
        if getattr(self, "_triplets", None) is None:
            P, C = self.P.tocoo(), self.C.tocoo()
            self._triplets = (P.row, P.col, P.data, C.row, C.col, C.data)
        return self._triplets

    def unscale(self, xs, ys):
        return self.D * xs, self.E * ys / self.c

    def scale(self, x, y):
        return x / self.D, self.c * y / self.E

    def split_duals(self, y):
        y_eq = y[: self.n_eq]
        yb = np.zeros(self.n)
        yb[self.box_idx] = y[self.n_eq:]
        return y_eq, np.maximum(-yb, 0.0), np.maximum(yb, 0.0)

    def join_duals(self, y_eq, z_lo, z_up):
        yb = (np.asarray(z_up) - np.asarray(z_lo))[self.box_idx]
        return np.concatenate([np.asarray(y_eq, dtype=float), yb])


def _same_matrix(a, b) -> bool:
    if a is b:
        return True
    return (a.shape == b.shape and np.array_equal(a.indptr, b.indptr) and np.array_equal(a.indices, b.indices)
            and np.array_equal(a.data, b.data))


def _clip_norm(v):
    v = np.where(v < 1e-4, 1.0, v)
    return np.minimum(v, 1e4)


def _candidate(problem, ws, xs, ys, status, iterations, polished):
    x, y = ws.unscale(xs, ys)
    fixed = problem.lower == problem.upper
    x[fixed] = problem.lower[fixed]
    y_eq, z_lo, z_up = ws.split_duals(y)
    res = kkt_residual(problem, x, y_eq, (z_lo, z_up))
    return QpSolution(
        primal=x,
        eq_duals=y_eq,
        bound_duals=(z_lo, z_up),
        objective=problem.objective(x),
        status=status,
        kkt_residual=res,
        iterations=iterations,
        polished=polished,
    )


def _solve_active(ws, lo_act, up_act, settings):
    act = np.flatnonzero(lo_act | up_act)
    rhs_act = np.where(lo_act[act], ws.l[act], ws.u[act])
    if not np.all(np.isfinite(rhs_act)):
        return None
    n, k = ws.n, act.size
    pr, pc, pv, cr, cc, cv = ws.triplets()
    pos = np.full(ws.C.shape[0], -1)
    pos[act] = np.arange(k)
    keep = pos[cr] >= 0
    ar, ac, av = n + pos[cr[keep]], cc[keep], cv[keep]
    delta = settings.polish_delta
    reg = np.concatenate([np.full(n, delta), np.full(k, -delta)])
    diag = np.arange(n + k)
    Kd = sp.csc_matrix((np.concatenate([pv, av, av, reg]),
                        (np.concatenate([pr, ar, ac, diag]), np.concatenate([pc, ac, ar, diag]))),
                       shape=(n + k, n + k))
    rhs = np.concatenate([-ws.q, rhs_act])
    try:
        lu = spla.splu(Kd)
    except RuntimeError:
        return None
    sol = lu.solve(rhs)
    for _ in range(settings.polish_refine_iters):
        # residual of the unregularized system
        sol = sol + lu.solve(rhs - (Kd @ sol - reg * sol))
    if not np.all(np.isfinite(sol)):
        return None
    y = np.zeros(ws.C.shape[0])
    y[act] = sol[n:]
    return sol[:n], y


def _polish(problem, ws, xs, zs, ys, settings, consider, tried):
    """Primal-dual active-set passes seeded with the active set guessed from the ADMM iterate.

    ``tried`` collects active sets already solved during this call of
    solve_qp; degenerate problems make the guess cycle, and re-solving a
    known set is wasted work.
    """
    box = ~ws.is_eq
    lo_act = (zs - ws.l < -ys) | ws.is_eq
    up_act = (ws.u - zs < ys) & ~lo_act
    for _ in range(settings.polish_passes):
        key = np.packbits(lo_act).tobytes() + np.packbits(up_act).tobytes()
        if key in tried or len(tried) >= settings.polish_budget:
            return
        tried.add(key)
        out = _solve_active(ws, lo_act, up_act, settings)
        if out is None:
            return
        x_pol, y_pol = out
        if consider(_candidate(problem, ws, x_pol, y_pol, OPTIMAL, 0, True)) <= settings.tolerance:
            return
        z_pol = ws.C @ x_pol
        new_lo = ws.is_eq | (box & (ws.l - z_pol - y_pol > 0))
        new_up = box & ~new_lo & (z_pol - ws.u + y_pol > 0)
        lo_act, up_act = new_lo, new_up


def solve_qp(problem: QpProblem, settings: SolverSettings = SolverSettings(), initial=None) -> QpSolution:
    """Solve ``problem``.

    ``initial`` is an optional QpSolution of a previous, structurally
    identical problem; it seeds the iterate and, when the matrices match,
    also lends its scaling and factorization.
    """
    s = settings
    ws = getattr(initial, "workspace", None)
    if ws is not None and ws.sigma == s.sigma and ws.compatible(problem):
        ws.segment = 0
        ws.bind(problem, s)
    else:
        ws = _Workspace(problem, s)
    n, m = ws.n, ws.C.shape[0]

    if initial is not None and np.size(initial.primal) == n:
        xs, ys = ws.scale(np.asarray(initial.primal, dtype=float), ws.join_duals(initial.eq_duals, *initial.bound_duals))
    else:
        xs, ys = np.zeros(n), np.zeros(m)
    zs = np.clip(ws.C @ xs, ws.l, ws.u)

    best = None
    trace, segments = [], []
    tried = set()
    polish_gate = np.inf

    def consider(cand):
        nonlocal best
        if best is None or cand.kkt_residual < best.kkt_residual:
            best = replace(cand, iterations=k)
        return cand.kkt_residual

    k = 0
    if n == 0:
        return _candidate(problem, ws, xs, ys, OPTIMAL, 0, False)

    status = ITERATION_LIMIT
    ys_prev = ys.copy()
    while k < s.max_iter:
        k += 1
        x_prev, z_prev, y_prev = xs, zs, ys
        rho_vec = ws.rho_vec
        rhs = s.sigma * xs - ws.q + ws.CT @ (rho_vec * zs - ys)
        xt = ws.solve(rhs)
        zt = ws.C @ xt
        xs = s.alpha * xt + (1.0 - s.alpha) * x_prev
        zh = s.alpha * zt + (1.0 - s.alpha) * z_prev
        w = zh + y_prev / rho_vec
        zs = np.clip(w, ws.l, ws.u)
        ys = y_prev + rho_vec * (zh - zs)

        if s.record_trace:
            w_prev = z_prev + y_prev / rho_vec
            step = np.sqrt(s.sigma * np.sum((xs - x_prev) ** 2) + np.sum(rho_vec * (w - w_prev) ** 2))
            trace.append(float(step))
            segments.append(ws.segment)

        if k % s.check_interval and k != 1:
            continue

        res = consider(_candidate(problem, ws, xs, ys, OPTIMAL, k, False))
        # polish again only once the iterate has improved by another decade
        if s.polish and best.kkt_residual > s.tolerance and res <= polish_gate:
            polish_gate = 0.1 * res
            _polish(problem, ws, xs, zs, ys, s, consider, tried)
        if best.kkt_residual <= s.tolerance:
            status = OPTIMAL
            break

        dy = ys - ys_prev
        ys_prev = ys.copy()
        if _primal_infeasible(ws, dy, s.eps_infeasible):
            status = INFEASIBLE
            break

        if s.adaptive_rho:
            new_rho = _balanced_rho(ws, xs, zs, ys, ws.rho)
            if new_rho > 5.0 * ws.rho or new_rho < 0.2 * ws.rho:
                ws.set_rho(new_rho, s)
                ws.segment += 1

    if status == INFEASIBLE:
        x, y = ws.unscale(xs, ys)
        y_eq, z_lo, z_up = ws.split_duals(y)
        return QpSolution(x, y_eq, (z_lo, z_up), problem.objective(x), INFEASIBLE, float("inf"), k,
                          False, tuple(trace), tuple(segments))
    return replace(best, status=status, iterations=k, trace=tuple(trace), trace_segments=tuple(segments),
                   workspace=ws)


def _primal_infeasible(ws, dy, eps):
    ninf = np.max(np.abs(ws.E * dy), initial=0.0)
    if ninf < 1e-12:
        return False
    if np.max(np.abs((ws.CT @ dy) / ws.D), initial=0.0) > eps * ninf:
        return False
    pos, neg = np.maximum(dy, 0.0), np.minimum(dy, 0.0)
    if np.any((pos > 0) & ~np.isfinite(ws.u)) or np.any((neg < 0) & ~np.isfinite(ws.l)):
        return False
    u = np.where(np.isfinite(ws.u), ws.u, 0.0)
    l = np.where(np.isfinite(ws.l), ws.l, 0.0)
    return u @ pos + l @ neg < -eps * ninf


def _balanced_rho(ws, xs, zs, ys, rho):
    Cx = ws.C @ xs
    Px = ws.P @ xs
    CTy = ws.CT @ ys
    r_prim = np.max(np.abs(Cx - zs), initial=0.0)
    r_dual = np.max(np.abs(Px + ws.q + CTy), initial=0.0)
    p_norm = max(np.max(np.abs(Cx), initial=0.0), np.max(np.abs(zs), initial=0.0), 1e-10)
    d_norm = max(np.max(np.abs(Px), initial=0.0), np.max(np.abs(CTy), initial=0.0),
                 np.max(np.abs(ws.q), initial=0.0), 1e-10)
    ratio = (r_prim / p_norm) / max(r_dual / d_norm, 1e-30)
    return float(np.clip(rho * np.sqrt(ratio), 1e-6, 1e6))


_SECTIONS = ("quad", "lin", "eq_matrix", "eq_rhs", "lower", "upper")


def dump_problem(problem: QpProblem, path) -> None:
    """Write ``problem`` in a Matrix-Market-like text layout for offline inspection.

    The file starts with ``%%QPPROBLEM dim=<n> n_eq=<m>``.  Each section opens
    with ``%%QPSECTION <name> coordinate <rows> <cols> <nnz>`` followed by
    1-based ``i j value`` triplets, or ``%%QPSECTION <name> array <len>``
    followed by one value per line.  Values use ``repr`` so they round-trip
    exactly; infinite bounds appear as ``inf``/``-inf``.
    """
    lines = [f"%%QPPROBLEM dim={problem.dim} n_eq={problem.eq_rhs.size}"]
    for name in _SECTIONS:
        val = getattr(problem, name)
        if sp.issparse(val):
            coo = sp.coo_matrix(val)
            order = np.lexsort((coo.row, coo.col))
            lines.append(f"%%QPSECTION {name} coordinate {coo.shape[0]} {coo.shape[1]} {coo.nnz}")
            lines += [f"{coo.row[k] + 1} {coo.col[k] + 1} {float(coo.data[k])!r}" for k in order]
        else:
            vec = np.asarray(val, dtype=float).ravel()
            lines.append(f"%%QPSECTION {name} array {vec.size}")
            lines += [repr(float(v)) for v in vec]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_problem(path) -> QpProblem:
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or not lines[0].startswith("%%QPPROBLEM"):
        raise ValueError(f"{path}: missing %%QPPROBLEM header")
    blocks, k = {}, 1
    while k < len(lines):
        head = lines[k].split()
        if len(head) < 4 or head[0] != "%%QPSECTION":
            raise ValueError(f"{path}:{k + 1}: expected a %%QPSECTION line")
        name, kind = head[1], head[2]
        if kind == "coordinate":
            rows, cols, nnz = map(int, head[3:6])
            trip = [lines[k + 1 + i].split() for i in range(nnz)]
            i = np.array([int(t[0]) - 1 for t in trip], dtype=int)
            j = np.array([int(t[1]) - 1 for t in trip], dtype=int)
            v = np.array([float(t[2]) for t in trip])
            blocks[name] = sp.csc_matrix((v, (i, j)), shape=(rows, cols))
            k += 1 + nnz
        else:
            size = int(head[3])
            blocks[name] = np.array([float(x) for x in lines[k + 1:k + 1 + size]])
            k += 1 + size
    return QpProblem(*(blocks[name] for name in _SECTIONS))
