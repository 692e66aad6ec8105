"""Generalized Skorohod problems dx + A(x)(dt) ∋ dm on a time grid.

The catching-up scheme x_{i+1} = J_{dt_i}(x_i + dm_i) produces, by
construction of the resolvent, the exact inclusion
dk_i = x_i + dm_i - x_{i+1} in dt_i * A(x_{i+1}) at every step, so the
discrete Fitzpatrick residual of the output is zero up to rounding.  The
Yosida-penalized variant replaces A by its Lipschitz approximation A_eps
and converges to the catching-up solution as eps -> 0.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import fitzpatrick as fitz
from . import operators as ops
from .paths import BVPath, GridPath, grid_path, sup_distance

CATCHING_UP = "catching_up"
YOSIDA_PENALIZATION = "yosida_penalization"


@dataclass(frozen=True)
class GspSolution:
    x: GridPath
    k: BVPath
    diagnostics: dict


def _node_identity_defect(x0, m, x, k):
    lhs = x.values + k.values
    rhs = x0[None, :] + m.values
    return float(np.abs(lhs - rhs).max())


def _diagnostics(spec, x, k, scheme, eps):
    try:
        gap = fitz.path_fitz_gap(spec, x, k, fitz.default_path_mode(spec))
        max_step = float(np.max(fitz.step_gaps(spec, x, k, fitz.default_path_mode(spec))))
    except ValueError:
        gap, max_step = float("nan"), float("nan")
    return {
        "sup_norm": x.sup_norm,
        "total_variation": k.total_variation,
        "path_fitz_gap": gap,
        "max_step_fitz_gap": max_step,
        "scheme": scheme,
        "eps": eps,
        "max_dt": float(np.max(np.diff(x.t))),
    }


def solve_gsp_many(spec: ops.OperatorSpec, x0, dm, t, scheme: str = CATCHING_UP,
                   eps: Optional[float] = None):
    """Vectorized driver loop: x0 (P,d), dm (P,N,d) -> node values (P,N+1,d), increments (P,N,d)."""
    x0 = np.asarray(x0, dtype=float)
    dm = np.asarray(dm, dtype=float)
    t = np.asarray(t, dtype=float)
    p, n, d = dm.shape
    dt = np.diff(t)
    xs = np.empty((p, n + 1, d))
    dks = np.empty((p, n, d))
    xs[:, 0] = x0
    if scheme == CATCHING_UP:
        for i in range(n):
            w = xs[:, i] + dm[:, i]
            xi = ops.resolvent(spec, float(dt[i]), w)
            xs[:, i + 1] = xi
            dks[:, i] = w - xi
    elif scheme == YOSIDA_PENALIZATION:
        if eps is None or eps <= 0:
            raise ValueError("yosida_penalization needs eps > 0")
        # resolvent of A_eps composes exactly: (I + dt*A_eps)^{-1} = I - dt*A_{eps+dt},
        # and A_eps at the new point equals A_{eps+dt} at the predictor.
        for i in range(n):
            w = xs[:, i] + dm[:, i]
            _, a = ops.yosida(spec, eps + float(dt[i]), w)
            dks[:, i] = float(dt[i]) * a
            xs[:, i + 1] = w - dks[:, i]
    else:
        raise ValueError(f"unknown scheme {scheme!r}")
    return xs, dks


def solve_gsp(spec: ops.OperatorSpec, x0, m: GridPath, scheme: str = CATCHING_UP,
              eps: Optional[float] = None, dom_tol: float = 1e-6) -> GspSolution:
    """Solve dx + A(x)(dt) ∋ dm, x(0) = x0, on the grid of m."""
    x0 = np.asarray(x0, dtype=float)
    if x0.shape != (spec.dim,):
        raise ValueError("x0 has wrong dimension")
    if float(np.linalg.norm(m.values[0])) > 1e-12 * (1.0 + m.sup_norm):
        raise ValueError("driver must satisfy m(0) = 0")
    if ops.dom_distance(spec, x0) > dom_tol:
        raise ValueError("x0 lies too far from cl Dom(A)")
    xs, dks = solve_gsp_many(spec, x0[None, :], m.increments[None, :, :], m.t,
                             scheme=scheme, eps=eps)
    x = GridPath(t=m.t, values=xs[0])
    k = BVPath(t=m.t, increments=dks[0])
    diag = _diagnostics(spec, x, k, scheme, eps)
    diag["node_identity_defect"] = _node_identity_defect(x0, m, x, k)
    return GspSolution(x=x, k=k, diagnostics=diag)


def skorohod_1d_oracle(x0: float, m: GridPath) -> GspSolution:
    """Reflection formula for E = [0, inf): k = running min of (x0 + m) wedge 0.

    Independent of the resolvent machinery; the classical closed-form
    solution used as the 1-d ground truth.
    """
    if m.dim != 1:
        raise ValueError("oracle is one-dimensional")
    if x0 < 0:
        raise ValueError("x0 must be nonnegative")
    c = x0 + m.values[:, 0]
    kvals = np.minimum(np.minimum.accumulate(c), 0.0)
    x = GridPath(t=m.t, values=(c - kvals)[:, None])
    k = BVPath(t=m.t, increments=np.diff(kvals)[:, None])
    spec = ops.normal_cone_box([0.0], [np.inf])
    diag = _diagnostics(spec, x, k, "reflection_oracle", None)
    diag["node_identity_defect"] = _node_identity_defect(np.array([x0]), m, x, k)
    return GspSolution(x=x, k=k, diagnostics=diag)


@dataclass(frozen=True)
class GspVerifyReport:
    node_defect: float
    min_probe_integral: float
    witness: tuple          # (probe index, s index, t index)
    path_fitz_gap: float
    tol: float
    node_identity_ok: bool
    variational_ok: bool
    fitz_ok: bool

    @property
    def all_ok(self) -> bool:
        return self.node_identity_ok and self.variational_ok and self.fitz_ok

    def to_record(self) -> str:
        lines = [
            f"node_defect={self.node_defect:.17g}",
            f"min_probe_integral={self.min_probe_integral:.17g}",
            f"witness_probe={self.witness[0]}",
            f"witness_s={self.witness[1]}",
            f"witness_t={self.witness[2]}",
            f"path_fitz_gap={self.path_fitz_gap:.17g}",
            f"tol={self.tol:.17g}",
            f"node_identity_ok={self.node_identity_ok}",
            f"variational_ok={self.variational_ok}",
            f"fitz_ok={self.fitz_ok}",
        ]
        return "\n".join(lines) + "\n"


def window_minimum(step_terms: np.ndarray):
    """min over 0 <= s <= t <= N of sum_{s < r <= t} step_terms[r-1], with argmin.

    Includes empty windows (value 0).  O(N) via prefix sums.
    """
    prefix = np.concatenate([[0.0], np.cumsum(step_terms)])
    run_max = np.maximum.accumulate(prefix)
    run_argmax = np.zeros(prefix.size, dtype=int)
    best = prefix[0]
    bi = 0
    for i in range(prefix.size):
        if prefix[i] > best:
            best, bi = prefix[i], i
        run_argmax[i] = bi
    vals = prefix - run_max
    t = int(np.argmin(vals))
    return float(vals[t]), int(run_argmax[t]), t


def verify_gsp(spec: ops.OperatorSpec, x0, m: GridPath, cand: GspSolution,
               probes, tol: Optional[float] = None) -> GspVerifyReport:
    """Check a candidate against the defining conditions of the problem.

    (i) node identity x + k = x0 + m; (ii) for every probe (z, z*) and every
    grid window [s, t], the discrete monotonicity integral
    sum <x_{r+1} - z, dk_r - z* dt_r> must be >= -tol; (iii) the path
    Fitzpatrick residual.
    """
    if not probes:
        raise ValueError("need at least one probe")
    x0 = np.asarray(x0, dtype=float)
    x, k = cand.x, cand.k
    defect = _node_identity_defect(x0, m, x, k)
    dt = x.dt[:, None]
    best = (np.inf, (0, 0, 0))
    for pi, pair in enumerate(probes):
        terms = np.sum((x.values[1:] - pair.u) * (k.increments - pair.ustar * dt), axis=1)
        val, s, t = window_minimum(terms)
        if val < best[0]:
            best = (val, (pi, s, t))
    try:
        gap = fitz.path_fitz_gap(spec, x, k, fitz.default_path_mode(spec))
    except ValueError:
        gap = float("nan")
    if tol is None:
        tol = 1e-7 * (1.0 + m.sup_norm + k.total_variation)
    return GspVerifyReport(
        node_defect=defect,
        min_probe_integral=best[0],
        witness=best[1],
        path_fitz_gap=gap,
        tol=tol,
        node_identity_ok=bool(defect <= tol),
        variational_ok=bool(best[0] >= -tol),
        fitz_ok=bool(np.isnan(gap) or gap <= tol),
    )


def estimate_probe(spec: ops.OperatorSpec, cases, refine: int = 1) -> dict:
    """Empirical constants of the a priori and continuity estimates.

    C_apriori bounds (||x||_T^2 + TV(k)) / (1 + |x0|^2) over the family;
    C_holder bounds ||x - x'||_T / [(1+|x0|+|x0'|)(|x0-x0'| + ||m-m'||_T^{1/2})]
    over case pairs.  Requires int Dom(A) nonempty, i.e. box/ball kinds.
    `refine` subdivides every grid step that many times (convergence studies).
    """
    if spec.kind not in (ops.NORMAL_CONE_BOX, ops.NORMAL_CONE_BALL,
                         ops.SUBDIFF_INDICATOR_INTERVAL):
        raise ValueError("estimate harness requires a box or ball domain")
    sols = []
    data = []
    for x0, m in cases:
        if refine > 1:
            m = refine_path(m, refine)
        sol = solve_gsp(spec, x0, m)
        sols.append(sol)
        data.append((np.asarray(x0, dtype=float), m))
    c_apriori = 0.0
    for (x0, _), sol in zip(data, sols):
        num = sol.x.sup_norm ** 2 + sol.k.total_variation
        c_apriori = max(c_apriori, num / (1.0 + float(x0 @ x0)))
    c_holder = None
    if len(cases) >= 2:
        c_holder = 0.0
        for i in range(len(cases)):
            for j in range(i + 1, len(cases)):
                x0i, mi = data[i]
                x0j, mj = data[j]
                dx0 = float(np.linalg.norm(x0i - x0j))
                dm = sup_distance(mi, mj)
                denom = (1.0 + np.linalg.norm(x0i) + np.linalg.norm(x0j)) \
                    * (dx0 + np.sqrt(dm))
                if denom == 0.0:
                    continue    # identical data, 0/0 excluded
                num = sup_distance(sols[i].x, sols[j].x)
                c_holder = max(c_holder, num / denom)
    return {"C_apriori": float(c_apriori),
            "C_holder": None if c_holder is None else float(c_holder)}


def refine_path(m: GridPath, factor: int) -> GridPath:
    """Piecewise-linear interpolation of m onto a grid refined by `factor`."""
    if factor < 1:
        raise ValueError("factor must be >= 1")
    t_new = []
    for i in range(m.n_steps):
        t_new.append(np.linspace(m.t[i], m.t[i + 1], factor + 1)[:-1])
    t_new = np.concatenate(t_new + [[m.t[-1]]])
    vals = np.column_stack([
        np.interp(t_new, m.t, m.values[:, c]) for c in range(m.dim)
    ])
    return GridPath(t=t_new, values=vals)
