"""Backward stochastic variational inequalities on a recombining binomial tree.

The +-sqrt(dt) walk makes every conditional expectation an exact half-sum of
the two children, so backward recursions, martingale representations and all
functional expectations are exact finite sums.  Nodes are indexed (i, j)
with j up-moves after i steps; children of (i, j) are (i+1, j) [down] and
(i+1, j+1) [up].
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import fitzpatrick as fitz
from . import operators as ops

RESOLVENT = "resolvent"
YOSIDA_PENALIZATION = "yosida_penalization"


class NodeFixedPointError(RuntimeError):
    def __init__(self, level, node, residual):
        super().__init__(
            f"backward fixed point diverged at node ({level},{node}); "
            f"residual {residual:.3e}; refine the tree")
        self.level = level
        self.node = node


@dataclass(frozen=True)
class BinomialTree:
    depth: int
    horizon: float

    def __post_init__(self):
        if self.depth < 1 or self.horizon <= 0:
            raise ValueError("need depth >= 1 and horizon > 0")

    @property
    def dt(self) -> float:
        return self.horizon / self.depth

    @property
    def sqdt(self) -> float:
        return float(np.sqrt(self.dt))

    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.horizon, self.depth + 1)

    def walk_values(self, level: int) -> np.ndarray:
        j = np.arange(level + 1)
        return (2.0 * j - level) * self.sqdt

    def level_probabilities(self, level: int) -> np.ndarray:
        p = np.array([1.0])
        for _ in range(level):
            q = np.zeros(p.size + 1)
            q[:-1] += 0.5 * p
            q[1:] += 0.5 * p
            p = q
        return p


def cond_exp_prev(v: np.ndarray) -> np.ndarray:
    """E[next-level values | node]: half-sum of the two children."""
    return 0.5 * (v[:-1] + v[1:])


def martingale_diff(v: np.ndarray, sqdt: float) -> np.ndarray:
    """Z extraction: (up - down) / (2 sqrt(dt))."""
    return (v[1:] - v[:-1]) / (2.0 * sqdt)


@dataclass
class TreeProcess:
    """Adapted process: one (level+1, d) array per level."""

    levels: list

    @property
    def depth(self) -> int:
        return len(self.levels) - 1

    @property
    def dim(self) -> int:
        return self.levels[0].shape[1]

    def copy(self) -> "TreeProcess":
        return TreeProcess([v.copy() for v in self.levels])


def tree_expectation(tree: BinomialTree, level: int, values: np.ndarray) -> np.ndarray:
    p = tree.level_probabilities(level)
    return p @ values


def tree_conditional_expectation(tree: BinomialTree, eta: np.ndarray) -> TreeProcess:
    """Node values of E[eta | node] for leaf-measurable eta (exact)."""
    eta = np.atleast_2d(np.asarray(eta, dtype=float).T).T
    levels = [None] * (tree.depth + 1)
    levels[tree.depth] = eta.astype(float)
    for i in range(tree.depth - 1, -1, -1):
        levels[i] = cond_exp_prev(levels[i + 1])
    return TreeProcess(levels)


def martingale_representation(tree: BinomialTree, eta):
    """Exact discrete representation eta = Y0 + sum_i Z_i dB_i.

    Returns (Y0, Z) with Z a TreeProcess on levels 0..depth-1.
    """
    y = tree_conditional_expectation(tree, eta)
    z_levels = [martingale_diff(y.levels[i + 1], tree.sqdt) for i in range(tree.depth)]
    return y.levels[0][0].copy(), TreeProcess(z_levels)


def reconstruction_defect(tree: BinomialTree, eta, y0, z: TreeProcess) -> float:
    """max over all 2^depth paths of |eta(leaf) - Y0 - sum Z dB|."""
    eta = np.atleast_2d(np.asarray(eta, dtype=float).T).T
    n = tree.depth
    worst = 0.0
    for bits in range(2 ** n):
        acc = y0.copy()
        j = 0
        for i in range(n):
            up = (bits >> i) & 1
            db = tree.sqdt if up else -tree.sqdt
            acc = acc + z.levels[i][j] * db
            j += up
        worst = max(worst, float(np.max(np.abs(eta[j] - acc))))
    return worst


@dataclass(frozen=True)
class BsviSolution:
    Y: TreeProcess
    Z: TreeProcess
    H: TreeProcess
    residuals: dict = field(default_factory=dict)


def _as_leaf(tree, xi_leaf, dim_hint=None):
    if callable(xi_leaf):
        w = tree.walk_values(tree.depth)
        xi = np.asarray([np.atleast_1d(xi_leaf(v)) for v in w], dtype=float)
    else:
        xi = np.asarray(xi_leaf, dtype=float)
        if xi.ndim == 1:
            xi = xi[:, None]
    if xi.shape[0] != tree.depth + 1:
        raise ValueError("leaf table must have depth+1 rows")
    return xi


def _node_gaps(spec, y, h):
    vals = fitz._closed_form_many(spec, y, h)
    if vals is None:
        raise ValueError("per-node gaps need a closed-form Fitzpatrick function")
    return vals - np.sum(y * h, axis=-1)


def solve_bsvi_tree(spec: ops.OperatorSpec, F: Optional[Callable], xi_leaf,
                    tree: BinomialTree, scheme: str = RESOLVENT,
                    eps: Optional[float] = None, fp_tol: float = 1e-12,
                    fp_max_iter: int = 200) -> BsviSolution:
    """Backward recursion for -dY + dphi(Y) dt ∋ F(t,Y,Z) dt - Z dB, Y_T = xi.

    Per node: Z is the martingale difference of the next level (explicit),
    and Y solves y = J_dt(E[Y_next] + dt F(t, y, Z)) by fixed point, which
    makes H = (E[Y_next] + dt F - Y)/dt an exact element of dphi(Y).
    """
    if not ops.is_subdifferential(spec):
        raise ValueError("solve_bsvi_tree requires a subdifferential operator")
    xi = _as_leaf(tree, xi_leaf)
    if xi.shape[1] != spec.dim:
        raise ValueError("leaf dimension does not match the operator")
    bad = ~ops.in_domain(spec, xi, tol=1e-9)
    if np.any(bad):
        raise ValueError("terminal values must lie in cl Dom(phi)")
    n, dt = tree.depth, tree.dt
    y_levels = [None] * (n + 1)
    z_levels = [None] * n
    h_levels = [None] * n
    y_levels[n] = xi.astype(float)
    for i in range(n - 1, -1, -1):
        nxt = y_levels[i + 1]
        e = cond_exp_prev(nxt)
        z = martingale_diff(nxt, tree.sqdt)
        t_i = i * dt
        y = _solve_node_level(spec, F, t_i, e, z, dt, scheme, eps,
                              fp_tol, fp_max_iter, i)
        drift = np.zeros_like(y) if F is None else np.asarray(F(t_i, y, z), dtype=float)
        h = (e + dt * drift - y) / dt
        y_levels[i], z_levels[i], h_levels[i] = y, z, h
    gaps = [_node_gaps(spec, y_levels[i], h_levels[i]) for i in range(n)]
    residuals = {
        "max_node_gap": float(max(np.max(g) for g in gaps)),
        "node_gaps": gaps,
        "terminal_defect": 0.0,
    }
    return BsviSolution(Y=TreeProcess(y_levels), Z=TreeProcess(z_levels),
                        H=TreeProcess(h_levels), residuals=residuals)


def _solve_node_level(spec, F, t_i, e, z, dt, scheme, eps, fp_tol, fp_max_iter, level):
    def step(y):
        w = e if F is None else e + dt * np.asarray(F(t_i, y, z), dtype=float)
        if scheme == RESOLVENT:
            return ops.resolvent(spec, dt, w)
        if scheme == YOSIDA_PENALIZATION:
            if eps is None or eps <= 0:
                raise ValueError("yosida_penalization needs eps > 0")
            _, a = ops.yosida(spec, eps + dt, w)
            return w - dt * a
        raise ValueError(f"unknown scheme {scheme!r}")

    y = step(e)
    if F is None:
        return y
    scale = 1.0 + float(np.max(np.abs(e)))
    for _ in range(fp_max_iter):
        y_new = step(y)
        res = float(np.max(np.abs(y_new - y)))
        y = y_new
        if res <= fp_tol * scale:
            return y
    worst = int(np.argmax(np.max(np.abs(step(y) - y), axis=-1)))
    raise NodeFixedPointError(level, worst, res)


def energy_identity_report(tree: BinomialTree, sol: BsviSolution,
                           F: Optional[Callable] = None) -> dict:
    """Discrete energy balance of the recursion.

    Exact per level: E|Y_{i+1}|^2 = E|Y_i + dt (H_i - F_i)|^2 + dt E|Z_i|^2
    (defect is pure rounding).  The continuous-form balance
    E|Y_0|^2 + sum dt E|Z|^2 + 2 sum dt E<Y, H - F> - E|xi|^2 carries the
    O(dt) quadratic remainder of the scheme; both are reported.
    """
    n, dt = tree.depth, tree.dt
    defects = np.empty(n)
    cross = 0.0
    zsum = 0.0
    for i in range(n):
        y, z, h = sol.Y.levels[i], sol.Z.levels[i], sol.H.levels[i]
        drift = np.zeros_like(y) if F is None else np.asarray(F(i * dt, y, z), dtype=float)
        p = tree.level_probabilities(i)
        lhs = tree.level_probabilities(i + 1) @ np.sum(sol.Y.levels[i + 1] ** 2, axis=1)
        pred = y + dt * (h - drift)
        rhs = p @ np.sum(pred ** 2, axis=1) + dt * (p @ np.sum(z ** 2, axis=1))
        defects[i] = lhs - rhs
        cross += dt * float(p @ np.sum(y * (h - drift), axis=1))
        zsum += dt * float(p @ np.sum(z ** 2, axis=1))
    e_y0 = float(np.sum(sol.Y.levels[0][0] ** 2))
    e_xi = float(tree.level_probabilities(n) @ np.sum(sol.Y.levels[n] ** 2, axis=1))
    return {
        "per_level_defect": defects,
        "max_per_level_defect": float(np.max(np.abs(defects))),
        "continuous_form_defect": e_y0 + zsum + 2.0 * cross - e_xi,
    }


# -- direct minimization of the backward functionals ------------------------

def _box_sigma_and_subgrad(spec, h):
    lo, hi = spec.lo, spec.hi
    sigma = np.sum(np.where(h > 0, hi * h, np.where(h < 0, lo * h, 0.0)), axis=-1)
    sub = np.where(h > 0, hi, lo)   # at 0 take lo: lexicographically smallest
    return sigma, sub


def _domain_penalty_and_grad(spec, y, rho):
    proj = ops.dom_project(spec, y)
    diff = y - proj
    dist = np.linalg.norm(diff, axis=-1)
    grad = np.zeros_like(y)
    pos = dist > 0
    grad[pos] = rho * diff[pos] / dist[pos][:, None]
    return rho * dist, grad


def _linear_sup_and_subgrads(spec, a, b, y, g):
    """Per node: max_{u in E} <u - y, a*u + b - g> with E a box; closed form.

    Separable in coordinates; returns (value, d/dy, d/dg) by the envelope rule.
    """
    lo = np.broadcast_to(spec.lo, y.shape)
    hi = np.broadcast_to(spec.hi, y.shape)
    c1 = b - g - a * y                      # coefficient of u
    cands = [lo, hi]
    if a < 0:
        interior = np.clip((g + a * y - b) / (2.0 * a), lo, hi)
        cands.append(interior)
    best_val = None
    best_u = None
    for u in cands:
        val = a * u * u + c1 * u
        if best_val is None:
            best_val, best_u = val, u.copy()
        else:
            better = val > best_val
            best_val = np.where(better, val, best_val)
            best_u = np.where(better, u, best_u)
    ystar_term = np.sum(y * (g - b), axis=-1)
    value = np.sum(best_val, axis=-1) + ystar_term
    fstar = a * best_u + b
    dy = -(fstar - g)
    dg = -(best_u - y)
    return value, dy, dg


class _BackwardParams:
    """Decision variables (eta, per-level table) with flat-vector views."""

    def __init__(self, eta, tables):
        self.eta = eta
        self.tables = tables

    def flat(self):
        return np.concatenate([self.eta.ravel()] + [t.ravel() for t in self.tables])

    def update(self, step, g_eta, g_tables):
        self.eta = self.eta - step * g_eta
        self.tables = [t - step * g for t, g in zip(self.tables, g_tables)]

    def copy(self):
        return _BackwardParams(self.eta.copy(), [t.copy() for t in self.tables])


def brute_force_bsvi(spec: ops.OperatorSpec, F_affine, xi_leaf, tree: BinomialTree,
                     max_iter: int = 40_000, target: float = 1e-6,
                     stop_at: float = 1e-14, rho: float = 50.0, seed=0,
                     x_init=None) -> tuple[BsviSolution, np.ndarray]:
    """Recover the tree solution by minimizing the backward gap functional.

    F_affine is None (no drift) or a pair (a, b) encoding F(t,y,z) = a*y + b.
    With no drift the decision variables are (eta, H) and Y is reconstructed
    through the conditional-expectation constraint; with affine drift they
    are (eta, G) on the backward-identity constraint set.  Both programs are
    convex; Polyak-stepped subgradient descent drives the objective to zero.

    Requires an interval/box potential (finite support function).  Returns
    (solution, objective trace of running bests); raises if the budget is
    exhausted above `target`.
    """
    if spec.kind not in (ops.NORMAL_CONE_BOX, ops.SUBDIFF_INDICATOR_INTERVAL):
        raise ValueError("brute force implemented for interval/box potentials")
    xi = _as_leaf(tree, xi_leaf)
    n, dt = tree.depth, tree.dt
    if (n + 1) * spec.dim + sum((i + 1) * spec.dim for i in range(n)) > 200:
        raise ValueError("tree too large for the brute-force program")
    p_leaf = tree.level_probabilities(n)
    e_xi2 = float(p_leaf @ np.sum(xi ** 2, axis=1))
    ball_r = 2.0 * (1.0 + e_xi2)
    rng = np.random.default_rng(seed)
    if x_init is None:
        eta = xi + 0.5 * rng.standard_normal(xi.shape)
        tables = [0.5 * rng.standard_normal((i + 1, spec.dim)) for i in range(n)]
        params = _BackwardParams(eta, tables)
    else:
        params = _BackwardParams(x_init[0].copy(), [t.copy() for t in x_init[1]])
    affine = F_affine is not None
    a_coef, b_coef = (0.0, np.zeros(spec.dim))
    if affine:
        a_coef = float(F_affine[0])
        b_coef = np.broadcast_to(np.asarray(F_affine[1], dtype=float), (spec.dim,)).copy()

    def objective_and_grad(par):
        eta, tables = par.eta, par.tables
        # forward (backward-in-time) reconstruction of Y
        y = [None] * (n + 1)
        y[n] = eta
        for i in range(n - 1, -1, -1):
            e = cond_exp_prev(y[i + 1])
            y[i] = e + dt * tables[i] if affine else e - dt * tables[i]
        f = 0.5 * float(p_leaf @ np.sum((eta - xi) ** 2, axis=1))
        g_eta = p_leaf[:, None] * (eta - xi)
        if not affine:
            # L2-ball term: E|eta|^2 - E|xi|^2 + 2 sqrt(R) ||xi - eta||_{L2}
            norm = float(np.sqrt(p_leaf @ np.sum((xi - eta) ** 2, axis=1)))
            f += 0.5 * (float(p_leaf @ np.sum(eta ** 2, axis=1)) - e_xi2
                        + 2.0 * np.sqrt(ball_r) * norm)
            g_eta = g_eta + p_leaf[:, None] * eta
            if norm > 0:
                g_eta = g_eta + np.sqrt(ball_r) * p_leaf[:, None] * (eta - xi) / norm
        gy = [np.zeros_like(v) for v in y]
        g_tables = [np.zeros_like(t) for t in tables]
        for i in range(n):
            p_i = tree.level_probabilities(i)
            w = (dt * p_i)[:, None]
            if affine:
                z = martingale_diff(y[i + 1], tree.sqdt)
                val, dy, dg = _linear_sup_and_subgrads(spec, a_coef, b_coef, y[i], tables[i])
                f += float(np.sum(dt * p_i * val))
                gy[i] += w * dy
                g_tables[i] += w * dg
            else:
                h = tables[i]
                sigma, sub = _box_sigma_and_subgrad(spec, h)
                f += float(np.sum(dt * p_i * (sigma - np.sum(y[i] * h, axis=1))))
                gy[i] += -w * h
                g_tables[i] += w * (sub - y[i])
            pen, dpen = _domain_penalty_and_grad(spec, y[i], rho)
            f += float(np.sum(dt * p_i * pen))
            gy[i] += w * dpen
        # reverse accumulation through the Y recursion
        for i in range(n):
            if affine:
                g_tables[i] += dt * gy[i]
            else:
                g_tables[i] += -dt * gy[i]
            gy[i + 1][:-1] += 0.5 * gy[i]
            gy[i + 1][1:] += 0.5 * gy[i]
        g_eta = g_eta + gy[n]
        return f, g_eta, g_tables

    trace = []
    best = None
    for it in range(max_iter):
        f, g_eta, g_tables = objective_and_grad(params)
        if best is None or f < best[0]:
            best = (f, params.copy())
        trace.append(best[0])
        if best[0] <= stop_at:
            break
        gnorm2 = float(np.sum(g_eta ** 2) + sum(np.sum(g ** 2) for g in g_tables))
        if gnorm2 == 0.0:
            break
        params.update(f / gnorm2, g_eta, g_tables)
        if not affine:
            e_eta2 = float(p_leaf @ np.sum(params.eta ** 2, axis=1))
            if e_eta2 > ball_r:
                params.eta = params.eta * np.sqrt(ball_r / e_eta2)
    if best[0] > target:
        raise RuntimeError(f"brute-force budget exhausted at objective {best[0]:.3e}")
    sol = _params_to_solution(spec, best[1], tree, affine, a_coef, b_coef)
    return sol, np.asarray(trace)


def _params_to_solution(spec, params, tree, affine, a_coef, b_coef):
    n, dt = tree.depth, tree.dt
    y = [None] * (n + 1)
    y[n] = params.eta.copy()
    z = [None] * n
    h = [None] * n
    for i in range(n - 1, -1, -1):
        e = cond_exp_prev(y[i + 1])
        z[i] = martingale_diff(y[i + 1], tree.sqdt)
        if affine:
            y[i] = e + dt * params.tables[i]
            h[i] = (a_coef * y[i] + b_coef) - params.tables[i]
        else:
            y[i] = e - dt * params.tables[i]
            h[i] = params.tables[i].copy()
    gaps = [_node_gaps(spec, y[i], h[i]) for i in range(n)]
    residuals = {
        "max_node_gap": float(max(np.max(g) for g in gaps)),
        "node_gaps": gaps,
        "terminal_defect": 0.0,
    }
    return BsviSolution(Y=TreeProcess(y), Z=TreeProcess(z), H=TreeProcess(h),
                        residuals=residuals)


def tree_csv(tree: BinomialTree, sol: BsviSolution) -> str:
    """CSV dump: level,node,Y,Z,H,gap (vector entries space-separated)."""

    def j(v):
        return " ".join(format(c, ".17g") for c in np.atleast_1d(v))

    lines = ["level,node,Y,Z,H,gap"]
    for i, yv in enumerate(sol.Y.levels):
        for node in range(yv.shape[0]):
            if i < tree.depth:
                zv = j(sol.Z.levels[i][node])
                hv = j(sol.H.levels[i][node])
                gv = format(float(sol.residuals["node_gaps"][i][node]), ".17g")
            else:
                zv = hv = gv = ""
            lines.append(f"{i},{node},{j(yv[node])},{zv},{hv},{gv}")
    return "\n".join(lines) + "\n"
