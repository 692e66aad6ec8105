"""Convex gap functionals whose zeros characterize solutions.

Each evaluator assembles a nonnegative total from (i) data-fit terms,
(ii) the discrete Fitzpatrick residual of the candidate pair, and (iii)
suprema over probe sets.  Infinite probe families (continuity classes,
L2 balls, potential domains) are replaced by finite probe sets plus closed
forms where derivable, so every reported value is a certified lower bound
of the corresponding discrete sup-functional; enlarging a probe set can
only increase the report.

Discrete pairings evaluate the continuous path at the right endpoint of
each step, matching the schemes' inclusions; on the respective constraint
sets this choice keeps each evaluator exactly convex.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from . import backward_tree as btree
from . import fitzpatrick as fitz
from . import operators as ops
from .forward_sde import FieldCoefficients, SdeEnsemble, WienerEnsemble
from .paths import BVPath, GridPath, sup_distance

_INF = float("inf")


@dataclass(frozen=True)
class FunctionalReport:
    total: float
    terms: dict
    probes_used: dict
    certified_lower_bound: bool
    standard_errors: Optional[dict] = None

    def to_record(self) -> str:
        lines = [f"total={self.total:.17g}",
                 f"certified_lower_bound={self.certified_lower_bound}"]
        for k, v in self.terms.items():
            lines.append(f"term_{k}={v:.17g}")
        if self.standard_errors:
            for k, v in self.standard_errors.items():
                lines.append(f"se_{k}={v:.17g}")
        for k, v in self.probes_used.items():
            lines.append(f"probes_{k}={v}")
        return "\n".join(lines) + "\n"


def _xsum(*terms) -> float:
    if any(np.isinf(t) for t in terms):
        return _INF
    return float(sum(terms))


# -- modulus-of-continuity classes -------------------------------------------

def modulus_profile(p: GridPath):
    """All pairwise (time gap, value distance) maxima of a grid path."""
    t, v = p.t, p.values
    gaps = []
    dists = []
    for lag in range(1, t.size):
        gaps.append(np.max(t[lag:] - t[:-lag]))
        dists.append(np.max(np.linalg.norm(v[lag:] - v[:-lag], axis=1)))
    order = np.argsort(gaps)
    g = np.asarray(gaps)[order]
    d = np.maximum.accumulate(np.asarray(dists)[order])
    return g, d


def empirical_alpha(paths: Sequence[GridPath], margin: float = 1.0 + 1e-9) -> Callable:
    """Modulus envelope of a driver family, as a nondecreasing callable."""
    gs, ds = [], []
    for p in paths:
        g, d = modulus_profile(p)
        gs.append(g)
        ds.append(d)
    g_all = np.concatenate(gs)
    d_all = np.concatenate(ds)
    order = np.argsort(g_all)
    g_sorted = g_all[order]
    d_env = np.maximum.accumulate(d_all[order]) * margin

    def alpha(delta: float) -> float:
        if delta <= 0:
            return 0.0
        i = np.searchsorted(g_sorted, delta, side="right")
        if i == 0:
            return 0.0
        return float(d_env[i - 1]) if i <= d_env.size else float(d_env[-1])

    return alpha


def in_c_alpha(p: GridPath, alpha: Callable, tol: float = 1e-9) -> bool:
    """Grid check of membership in the modulus class: m_p(delta) <= alpha(delta)."""
    if float(np.linalg.norm(p.values[0])) > tol:
        return False
    g, d = modulus_profile(p)
    return all(d[i] <= alpha(g[i]) + tol for i in range(g.size))


@dataclass(frozen=True)
class FunctionalParams:
    """Probe budget for the deterministic problem's functional."""

    R: float
    alpha: Callable
    probe_nu: Sequence[GridPath] = ()
    probe_graph: Sequence[ops.GraphPair] = ()

    def __post_init__(self):
        if self.R <= 0:
            raise ValueError("variation budget R must be positive")
        if self.alpha(0.0) != 0.0:
            raise ValueError("alpha(0) must be 0")


# -- deterministic problem ----------------------------------------------------

@dataclass(frozen=True)
class GspCandidate:
    a: np.ndarray
    x: GridPath
    k: BVPath
    mu: GridPath


def gsp_candidate(a, x: GridPath, k: BVPath, mu: GridPath) -> GspCandidate:
    return GspCandidate(a=np.asarray(a, dtype=float), x=x, k=k, mu=mu)


def constraint_defect(cand: GspCandidate) -> float:
    lhs = cand.x.values + cand.k.values
    rhs = cand.a[None, :] + cand.mu.values
    return float(np.abs(lhs - rhs).max())


def _graph_probe_bound(probes, x: GridPath, k: BVPath) -> float:
    """Finite-probe lower bound of the path Fitzpatrick gap (constant pairs)."""
    best = -np.inf
    dt = x.dt[:, None]
    for pair in probes:
        val = float(np.sum(pair.u * k.increments)
                    + np.sum(x.values[1:] * pair.ustar * dt)
                    - float(pair.u @ pair.ustar) * np.sum(x.dt)
                    - np.sum(x.values[1:] * k.increments))
        best = max(best, val)
    return best


def gsp_jhat(spec: ops.OperatorSpec, x0, m: GridPath, params: FunctionalParams,
             cand: GspCandidate, extra_probes: Sequence[GridPath] = (),
             include_candidate_mu: bool = True, ctol: float = 1e-9) -> FunctionalReport:
    """Gap functional of the deterministic problem.

    total = |a - x0|^2 + path_fitz_gap(x, k) + 2R ||mu - m||_T
          + max over admissible probe paths nu of [<<mu - nu, k>> - R ||nu - m||_T].

    The probe set is probe_nu + {m, mu} filtered by the modulus class; the
    mu probe makes the last two terms sum to at least R ||mu - m||_T >= 0.
    """
    x0 = np.asarray(x0, dtype=float)
    scale = 1.0 + m.sup_norm + cand.k.total_variation
    if constraint_defect(cand) > ctol * scale:
        raise ValueError("candidate violates the constraint x + k = a + mu")
    if cand.k.total_variation > params.R * (1.0 + 1e-12) + 1e-12:
        raise ValueError("candidate exceeds the variation budget R")
    initial = float(np.sum((cand.a - x0) ** 2))
    gap = fitz.path_fitz_gap(spec, cand.x, cand.k, fitz.default_path_mode(spec))
    mu_dist = sup_distance(cand.mu, m)
    data = 2.0 * params.R * mu_dist
    nu_list = list(params.probe_nu) + list(extra_probes) + [m]
    if include_candidate_mu:
        nu_list.append(cand.mu)
    used = 0
    nu_term = -np.inf
    dk = cand.k.increments
    mu_r = cand.mu.values[1:]
    for nu in nu_list:
        if not in_c_alpha(nu, params.alpha):
            continue
        used += 1
        val = float(np.sum((mu_r - nu.values[1:]) * dk)) \
            - params.R * sup_distance(nu, m)
        nu_term = max(nu_term, val)
    if used == 0:
        raise ValueError("no admissible probe paths (modulus class empty)")
    terms = {"initial": initial, "fitz_gap": gap, "mu_data": data, "nu_term": nu_term}
    if params.probe_graph:
        terms["graph_probe_gap_bound"] = _graph_probe_bound(params.probe_graph,
                                                            cand.x, cand.k)
    total = _xsum(initial, gap, data, nu_term)
    return FunctionalReport(total=total, terms=terms,
                            probes_used={"nu": used, "graph": len(params.probe_graph)},
                            certified_lower_bound=True)


# -- convexity probing --------------------------------------------------------

def _mix_arrays(a, b, lam):
    return lam * a + (1.0 - lam) * b


def mix_candidates(p, q, lam: float):
    """Componentwise affine combination of two same-shaped candidates."""
    if isinstance(p, GspCandidate):
        return GspCandidate(
            a=_mix_arrays(p.a, q.a, lam),
            x=GridPath(t=p.x.t, values=_mix_arrays(p.x.values, q.x.values, lam)),
            k=BVPath(t=p.k.t, increments=_mix_arrays(p.k.increments, q.k.increments, lam)),
            mu=GridPath(t=p.mu.t, values=_mix_arrays(p.mu.values, q.mu.values, lam)),
        )
    if isinstance(p, SdeCandidate):
        return replace(p, eta=_mix_arrays(p.eta, q.eta, lam),
                       X=_mix_arrays(p.X, q.X, lam),
                       K_inc=_mix_arrays(p.K_inc, q.K_inc, lam),
                       g=_mix_arrays(p.g, q.g, lam))
    if isinstance(p, SviCandidate):
        return replace(p, eta=_mix_arrays(p.eta, q.eta, lam),
                       X=_mix_arrays(p.X, q.X, lam),
                       L_inc=_mix_arrays(p.L_inc, q.L_inc, lam),
                       g=_mix_arrays(p.g, q.g, lam))
    if isinstance(p, BsdeCandidate):
        return replace(p, eta=_mix_arrays(p.eta, q.eta, lam),
                       Y=_mix_tree(p.Y, q.Y, lam), H=_mix_tree(p.H, q.H, lam))
    if isinstance(p, BsviCandidate):
        return replace(p, eta=_mix_arrays(p.eta, q.eta, lam),
                       G=_mix_tree(p.G, q.G, lam), Y=_mix_tree(p.Y, q.Y, lam),
                       Z=_mix_tree(p.Z, q.Z, lam))
    raise TypeError(f"cannot mix candidates of type {type(p).__name__}")


def _mix_tree(p: btree.TreeProcess, q: btree.TreeProcess, lam):
    return btree.TreeProcess([_mix_arrays(a, b, lam) for a, b in zip(p.levels, q.levels)])


def jhat_convexity_probe(functional: Callable, p, q,
                         lambdas=(0.25, 0.5, 0.75)) -> float:
    """max over lambda of J(lam p + (1-lam) q) - lam J(p) - (1-lam) J(q).

    The functional must carry a frozen probe set; values at p, q must be
    finite.  Nonpositive up to rounding when J is convex on the candidates'
    constraint set.
    """
    fp, fq = functional(p), functional(q)
    fp = fp.total if isinstance(fp, FunctionalReport) else fp
    fq = fq.total if isinstance(fq, FunctionalReport) else fq
    if not (np.isfinite(fp) and np.isfinite(fq)):
        raise ValueError("convexity probe requires finite values at the endpoints")
    worst = -np.inf
    for lam in lambdas:
        fm = functional(mix_candidates(p, q, lam))
        fm = fm.total if isinstance(fm, FunctionalReport) else fm
        worst = max(worst, fm - lam * fp - (1.0 - lam) * fq)
    return float(worst)


# -- direct minimization of the deterministic functional ----------------------

def _barrier_project(spec: ops.OperatorSpec, dk: np.ndarray) -> np.ndarray:
    """Project increments onto {v : sigma_E(v) < inf} (polar directions of E)."""
    if spec.kind in (ops.NORMAL_CONE_BOX, ops.SUBDIFF_INDICATOR_INTERVAL):
        out = dk.copy()
        inf_hi = np.isinf(spec.hi)
        inf_lo = np.isinf(spec.lo)
        if np.any(inf_hi):
            out[..., inf_hi] = np.minimum(out[..., inf_hi], 0.0)
        if np.any(inf_lo):
            out[..., inf_lo] = np.maximum(out[..., inf_lo], 0.0)
        return out
    return dk


def _sigma_subgrad(spec: ops.OperatorSpec, dk: np.ndarray) -> np.ndarray:
    if spec.kind in (ops.NORMAL_CONE_BOX, ops.SUBDIFF_INDICATOR_INTERVAL):
        lo = np.where(np.isinf(spec.lo), 0.0, spec.lo)
        hi = np.where(np.isinf(spec.hi), 0.0, spec.hi)
        # at 0 take the smallest subgradient (determinism at kinks)
        return np.where(dk > 0, hi, lo)
    if spec.kind == ops.NORMAL_CONE_BALL:
        n = np.linalg.norm(dk, axis=-1, keepdims=True)
        unit = np.where(n > 0, dk / np.where(n == 0, 1.0, n), 0.0)
        return spec.center + spec.radius * unit
    raise ValueError("sigma subgradient needs a cone kind")


def _feasibilize(spec, c_nodes, dk):
    """Barrier-project increments, then walk the grid restoring x in E."""
    dk = _barrier_project(spec, dk)
    n, d = dk.shape
    out = np.empty_like(dk)
    k_prev = np.zeros(d)
    for i in range(n):
        x_next = ops.dom_project(spec, c_nodes[i + 1] - (k_prev + dk[i]))
        k_next = c_nodes[i + 1] - x_next
        out[i] = k_next - k_prev
        k_prev = k_next
    return out


@dataclass(frozen=True)
class MinimizeResult:
    candidate: GspCandidate
    trace: np.ndarray
    objective: float
    converged: bool


def minimize_gsp_jhat(spec: ops.OperatorSpec, x0, m: GridPath,
                      max_iter: int = 60_000, step_c: Optional[float] = None,
                      tol: float = 1e-12, seed=0,
                      init: Optional[np.ndarray] = None) -> MinimizeResult:
    """Recover k by projected-subgradient descent on the reduced functional.

    With a = x0 and mu = m fixed, the decision variable is the increment
    table of k, x = x0 + m - k, and the objective is the homogeneous-mode
    residual sum_i [sigma_E(dk_i) - <x_{i+1}, dk_i>] with the domain
    constraint handled by projection.  Step size step_c / sqrt(iter).
    """
    if not ops.is_cone(spec):
        raise ValueError("direct minimization implemented for normal-cone kinds")
    x0 = np.asarray(x0, dtype=float)
    c_nodes = x0[None, :] + m.values
    n, d = m.n_steps, spec.dim
    rng = np.random.default_rng(seed)
    if init is None:
        # overshooting start: descent has to climb back to the minimizer
        scale = (1.0 + m.sup_norm + float(np.linalg.norm(x0))) / n
        init = -1.5 * scale * np.ones((n, d)) + 0.3 * scale * rng.standard_normal((n, d))
    dk = _feasibilize(spec, c_nodes, np.asarray(init, dtype=float))
    if step_c is None:
        step_c = 0.5 * (1.0 + m.sup_norm)

    def objective(dk_feas):
        kvals = np.vstack([np.zeros((1, d)), np.cumsum(dk_feas, axis=0)])
        x = c_nodes - kvals
        sigma = fitz.support_function(spec, dk_feas)
        return float(np.sum(sigma) - np.sum(x[1:] * dk_feas)), x

    best_f, _ = objective(dk)
    best_dk = dk.copy()
    trace = [best_f]
    for it in range(1, max_iter + 1):
        f, x = objective(dk)
        if f < best_f:
            best_f, best_dk = f, dk.copy()
        trace.append(best_f)
        if best_f <= tol:
            break
        suffix = np.cumsum(dk[::-1], axis=0)[::-1]
        grad = _sigma_subgrad(spec, dk) - x[1:] + suffix
        dk = _feasibilize(spec, c_nodes, dk - (step_c / np.sqrt(it)) * grad)
    kvals = np.cumsum(best_dk, axis=0)
    cand = GspCandidate(
        a=x0.copy(),
        x=GridPath(t=m.t, values=c_nodes - np.vstack([np.zeros((1, d)), kvals])),
        k=BVPath(t=m.t, increments=best_dk),
        mu=m,
    )
    return MinimizeResult(candidate=cand, trace=np.asarray(trace),
                          objective=best_f, converged=bool(best_f <= tol))


# -- additive-noise SDE functional --------------------------------------------

@dataclass(frozen=True)
class SdeCandidate:
    eta: np.ndarray       # (P, d), measurable w.r.t. the initial data
    X: np.ndarray         # (P, N+1, d)
    K_inc: np.ndarray     # (P, N, d)
    g: np.ndarray         # (P, N, d, k)
    ensemble: WienerEnsemble


def sde_candidate_from_solution(sde: SdeEnsemble) -> SdeCandidate:
    return SdeCandidate(eta=sde.xi.copy(), X=sde.X.copy(),
                        K_inc=sde.K_increments.copy(), g=sde.g.copy(),
                        ensemble=sde.ensemble)


def sde_constraint_defect(cand: SdeCandidate) -> float:
    dM = np.einsum("pidk,pik->pid", cand.g, cand.ensemble.dB)
    m_cum = np.concatenate([np.zeros_like(dM[:, :1]), np.cumsum(dM, axis=1)], axis=1)
    k_cum = np.concatenate([np.zeros_like(cand.K_inc[:, :1]),
                            np.cumsum(cand.K_inc, axis=1)], axis=1)
    defect = cand.X + k_cum - cand.eta[:, None, :] - m_cum
    return float(np.abs(defect).max())


def _weighted_stats(ens: WienerEnsemble, per_path: np.ndarray):
    w = ens.path_weights()
    mean = float(w @ per_path)
    if ens.weights is not None:      # exhaustive ensemble: expectation is exact
        return mean, 0.0
    p = per_path.size
    var = float(np.mean((per_path - mean) ** 2))
    return mean, float(np.sqrt(var / p))


def _per_path_step_gaps(spec, t, X, K_inc, mode):
    p, n, d = K_inc.shape
    xr = X[:, 1:, :]
    if mode == fitz.HOMOGENEOUS:
        inside = ops.in_domain(spec, xr, tol=1e-9)
        h = np.where(inside, fitz.support_function(spec, K_inc), np.inf)
        gaps = h - np.sum(xr * K_inc, axis=-1)
    else:
        dt = np.diff(t)[None, :, None]
        dens = K_inc / dt
        h = fitz._closed_form_many(spec, xr, dens)
        if h is None:
            raise ValueError("density mode requires a closed-form Fitzpatrick function")
        gaps = (h - np.sum(xr * dens, axis=-1)) * np.diff(t)[None, :]
    return np.where(np.all(np.isfinite(gaps), axis=1), np.sum(
        np.where(np.isfinite(gaps), gaps, 0.0), axis=1), np.inf)


def sde_jhat(spec: ops.OperatorSpec, xi: np.ndarray, G_table, cand: SdeCandidate,
             probes: Sequence[ops.GraphPair] = (), ctol: float = 1e-7) -> FunctionalReport:
    """Gap functional of the additive-noise equation.

    total = 1/2 E|eta - xi|^2 + E[path Fitzpatrick gap] + 1/2 E int |g - G|^2 dt,
    expectations over the ensemble's path weights with per-term standard errors.
    """
    ens = cand.ensemble
    xi = np.asarray(xi, dtype=float)
    scale = 1.0 + float(np.abs(cand.X).max())
    if sde_constraint_defect(cand) > ctol * scale:
        raise ValueError("candidate violates X + K = eta + int g dB on some path")
    g_ref = np.asarray(G_table, dtype=float)
    if g_ref.ndim == 2:
        g_ref = np.broadcast_to(g_ref, cand.g.shape[1:])
    dt = ens.dt[None, :, None, None]
    per_init = 0.5 * np.sum((cand.eta - xi) ** 2, axis=1)
    per_gap = _per_path_step_gaps(spec, ens.t, cand.X, cand.K_inc,
                                  fitz.default_path_mode(spec))
    per_g = 0.5 * np.sum((cand.g - g_ref[None, ...]) ** 2 * dt, axis=(1, 2, 3))
    init, se_init = _weighted_stats(ens, per_init)
    if np.any(np.isinf(per_gap)):
        gap, se_gap = _INF, 0.0
    else:
        gap, se_gap = _weighted_stats(ens, per_gap)
    gt, se_g = _weighted_stats(ens, per_g)
    terms = {"initial": init, "fitz_gap": gap, "g_data": gt}
    ses = {"initial": se_init, "fitz_gap": se_gap, "g_data": se_g,
           "total": float(np.sqrt(se_init ** 2 + se_gap ** 2 + se_g ** 2))}
    if probes:
        bounds = np.empty(ens.n_paths)
        for p in range(ens.n_paths):
            x = GridPath(t=ens.t, values=cand.X[p])
            k = BVPath(t=ens.t, increments=cand.K_inc[p])
            bounds[p] = _graph_probe_bound(probes, x, k)
        terms["graph_probe_gap_bound"] = _weighted_stats(ens, bounds)[0]
    return FunctionalReport(total=_xsum(init, gap, gt), terms=terms,
                            probes_used={"graph": len(probes)},
                            certified_lower_bound=True, standard_errors=ses)


# -- backward representation functional ---------------------------------------

@dataclass(frozen=True)
class BsdeCandidate:
    eta: np.ndarray            # leaf values (n+1, d)
    Y: btree.TreeProcess
    H: btree.TreeProcess
    tree: btree.BinomialTree


def bsde_candidate_from_solution(tree, sol: btree.BsviSolution) -> BsdeCandidate:
    return BsdeCandidate(eta=sol.Y.levels[-1].copy(), Y=sol.Y.copy(),
                         H=sol.H.copy(), tree=tree)


def bsde_constraint_defect(cand: BsdeCandidate) -> float:
    """Deviation of Y from the conditional-expectation form given (eta, H)."""
    tree = cand.tree
    worst = float(np.abs(cand.Y.levels[-1] - cand.eta).max())
    y = cand.eta
    for i in range(tree.depth - 1, -1, -1):
        y = btree.cond_exp_prev(y) - tree.dt * cand.H.levels[i]
        worst = max(worst, float(np.abs(cand.Y.levels[i] - y).max()))
    return worst


def l2_ball_sup(tree: btree.BinomialTree, R: float, eta, xi,
                probes_zeta: Sequence[np.ndarray] = ()):
    """sup over E|zeta|^2 <= R of E|zeta-eta|^2 - E|zeta-xi|^2, exactly.

    Closed form E|eta|^2 - E|xi|^2 + 2 sqrt(R) ||xi - eta||_{L2}; finite zeta
    probes cross-check the closed form from below.
    """
    p = tree.level_probabilities(tree.depth)
    e_eta2 = float(p @ np.sum(eta ** 2, axis=1))
    e_xi2 = float(p @ np.sum(xi ** 2, axis=1))
    nrm = float(np.sqrt(p @ np.sum((xi - eta) ** 2, axis=1)))
    closed = e_eta2 - e_xi2 + 2.0 * np.sqrt(R) * nrm
    zetas = list(probes_zeta) + [eta]
    if e_xi2 > 0:
        zetas.append(xi * min(1.0, np.sqrt(R / e_xi2)))
    else:
        zetas.append(xi)
    best = -np.inf
    for z in zetas:
        if float(p @ np.sum(z ** 2, axis=1)) > R * (1.0 + 1e-12):
            continue
        best = max(best, float(p @ np.sum((z - eta) ** 2, axis=1))
                   - float(p @ np.sum((z - xi) ** 2, axis=1)))
    if best > closed + 1e-9 * (1.0 + abs(closed)):
        raise RuntimeError("zeta probe exceeded the closed-form supremum")
    return closed, best


def bsde_jhat(spec: ops.OperatorSpec, xi_leaf, R: float, cand: BsdeCandidate,
              probes_zeta: Sequence[np.ndarray] = (), ctol: float = 1e-9) -> FunctionalReport:
    """Backward representation functional on the tree (drift-free form).

    total = 1/2 E|eta - xi|^2 + sum_i dt E[H(Y_i, H_i) - <Y_i, H_i>]
          + 1/2 sup_{E|zeta|^2 <= R} [E|zeta - eta|^2 - E|zeta - xi|^2].

    All expectations are exact finite sums; the zeta supremum is closed-form
    (linear functional on an L2 ball) with probe cross-check.
    """
    tree = cand.tree
    xi = btree._as_leaf(tree, xi_leaf)
    p_leaf = tree.level_probabilities(tree.depth)
    if float(p_leaf @ np.sum(xi ** 2, axis=1)) > R:
        raise ValueError("terminal data must satisfy E|xi|^2 <= R")
    if bsde_constraint_defect(cand) > ctol * (1.0 + float(np.abs(cand.eta).max())):
        raise ValueError("candidate Y is not of conditional-expectation form")
    init = 0.5 * float(p_leaf @ np.sum((cand.eta - xi) ** 2, axis=1))
    gap = 0.0
    for i in range(tree.depth):
        g = btree._node_gaps(spec, cand.Y.levels[i], cand.H.levels[i])
        if np.any(np.isinf(g)):
            gap = _INF
            break
        gap += tree.dt * float(tree.level_probabilities(i) @ g)
    closed, probe_best = l2_ball_sup(tree, R, cand.eta, xi, probes_zeta)
    terms = {"initial": init, "fitz_gap": gap, "zeta_sup": 0.5 * closed,
             "zeta_probe_bound": 0.5 * probe_best}
    return FunctionalReport(total=_xsum(init, gap, 0.5 * closed), terms=terms,
                            probes_used={"zeta": len(probes_zeta) + 2},
                            certified_lower_bound=True)


# -- forward variational inequality functional --------------------------------

@dataclass(frozen=True)
class SviCandidate:
    eta: np.ndarray       # (P, d)
    X: np.ndarray         # (P, N+1, d)
    L_inc: np.ndarray     # (P, N, d): martingale-part remainder X + L = eta + int g dB
    g: np.ndarray         # (P, N, d, k)
    ensemble: WienerEnsemble


def svi_candidate_from_solution(sde: SdeEnsemble, coeffs: FieldCoefficients) -> SviCandidate:
    dt = sde.ensemble.dt
    f_table = np.empty_like(sde.K_increments)
    for i in range(sde.ensemble.n_steps):
        f_table[:, i] = np.asarray(coeffs.F(float(sde.t[i]), sde.X[:, i]), dtype=float)
    l_inc = sde.K_increments - f_table * dt[None, :, None]
    return SviCandidate(eta=sde.xi.copy(), X=sde.X.copy(), L_inc=l_inc,
                        g=sde.g.copy(), ensemble=sde.ensemble)


def svi_constraint_defect(cand: SviCandidate) -> float:
    dM = np.einsum("pidk,pik->pid", cand.g, cand.ensemble.dB)
    m_cum = np.concatenate([np.zeros_like(dM[:, :1]), np.cumsum(dM, axis=1)], axis=1)
    l_cum = np.concatenate([np.zeros_like(cand.L_inc[:, :1]),
                            np.cumsum(cand.L_inc, axis=1)], axis=1)
    return float(np.abs(cand.X + l_cum - cand.eta[:, None, :] - m_cum).max())


def svi_jhat(spec: ops.OperatorSpec, coeffs: FieldCoefficients, xi: np.ndarray,
             cand: SviCandidate, probes_U: Sequence[np.ndarray] = (),
             ctol: float = 1e-7) -> FunctionalReport:
    """Certified lower bound of the variational-inequality functional.

    Reports max over probe processes U (the candidate X is always included) of

      J_U = 1/2 E|eta-xi|^2
          + E sum_i [<U_i - X_i, F(t_i, U_i)> + 1/2 |g_i - G(t_i, U_i)|^2] dt_i
          + E sum_i <U_{i+1} - X_{i+1}, dL_i> + Phi(X) - Phi(U),

    with Phi the left-endpoint quadrature of the potential.  Phi(X) = +inf
    is reported as total = +inf.
    """
    ens = cand.ensemble
    xi = np.asarray(xi, dtype=float)
    if svi_constraint_defect(cand) > ctol * (1.0 + float(np.abs(cand.X).max())):
        raise ValueError("candidate violates X + L = eta + int g dB on some path")
    dt = ens.dt
    w = ens.path_weights()
    per_init = 0.5 * np.sum((cand.eta - xi) ** 2, axis=1)
    init, se_init = _weighted_stats(ens, per_init)
    phi_x_steps = ops.phi_value(spec, cand.X[:, :-1, :])     # (P, N), left endpoints
    if np.any(np.isinf(phi_x_steps)):
        terms = {"initial": init, "probe_sup": _INF}
        return FunctionalReport(total=_INF, terms=terms,
                                probes_used={"U": len(probes_U) + 1},
                                certified_lower_bound=True,
                                standard_errors={"initial": se_init})
    phi_x = phi_x_steps @ dt
    best = (-np.inf, 0.0)
    probe_list = [cand.X] + [np.asarray(u, dtype=float) for u in probes_U]
    for u in probe_list:
        phi_u_steps = ops.phi_value(spec, u[:, :-1, :])
        if np.any(np.isinf(phi_u_steps)):
            continue
        per = per_init + (phi_x - phi_u_steps @ dt)
        for i in range(ens.n_steps):
            ti = float(ens.t[i])
            fu = np.asarray(coeffs.F(ti, u[:, i]), dtype=float)
            gu = np.asarray(coeffs.G(ti, u[:, i]), dtype=float)
            per = per + dt[i] * (np.sum((u[:, i] - cand.X[:, i]) * fu, axis=1)
                                 + 0.5 * np.sum((cand.g[:, i] - gu) ** 2, axis=(1, 2)))
            per = per + np.sum((u[:, i + 1] - cand.X[:, i + 1]) * cand.L_inc[:, i], axis=1)
        val = float(w @ per)
        if val > best[0]:
            if ens.weights is not None:
                se = 0.0
            else:
                se = float(np.sqrt(np.mean((per - val) ** 2) / per.size))
            best = (val, se)
    terms = {"initial": init, "probe_sup": best[0]}
    return FunctionalReport(total=best[0], terms=terms,
                            probes_used={"U": len(probe_list)},
                            certified_lower_bound=True,
                            standard_errors={"initial": se_init, "total": best[1]})


# -- backward variational inequality functional --------------------------------

@dataclass(frozen=True)
class BsviCandidate:
    eta: np.ndarray            # leaf values (n+1, d)
    G: btree.TreeProcess       # levels 0..n-1
    Y: btree.TreeProcess       # levels 0..n
    Z: btree.TreeProcess       # levels 0..n-1
    tree: btree.BinomialTree


def bsvi_candidate_from_solution(tree, sol: btree.BsviSolution, F) -> BsviCandidate:
    g_levels = []
    for i in range(tree.depth):
        y, z, h = sol.Y.levels[i], sol.Z.levels[i], sol.H.levels[i]
        drift = np.zeros_like(y) if F is None else np.asarray(F(i * tree.dt, y, z), dtype=float)
        g_levels.append(drift - h)
    return BsviCandidate(eta=sol.Y.levels[-1].copy(), G=btree.TreeProcess(g_levels),
                         Y=sol.Y.copy(), Z=sol.Z.copy(), tree=tree)


def bsvi_constraint_defect(cand: BsviCandidate) -> float:
    """Backward identity Y_i = E[Y_{i+1}|node] + dt G_i with Z the martingale part."""
    tree = cand.tree
    worst = float(np.abs(cand.Y.levels[-1] - cand.eta).max())
    for i in range(tree.depth - 1, -1, -1):
        e = btree.cond_exp_prev(cand.Y.levels[i + 1])
        worst = max(worst, float(np.abs(cand.Y.levels[i] - e - tree.dt * cand.G.levels[i]).max()))
        z = btree.martingale_diff(cand.Y.levels[i + 1], tree.sqdt)
        worst = max(worst, float(np.abs(cand.Z.levels[i] - z).max()))
    return worst


def bsvi_jhat(spec: ops.OperatorSpec, F: Optional[Callable], xi_leaf,
              cand: BsviCandidate, probes_UV: Sequence[tuple] = (),
              ctol: float = 1e-9) -> FunctionalReport:
    """Certified lower bound of the backward variational-inequality functional.

    Reports max over probe pairs (U, V) -- (Y, Z) always included -- of

      J_{(U,V)} = 1/2 E|eta - xi|^2 + E sum_i <U_i - Y_i, F(t_i,U_i,V_i) - G_i> dt
                - 1/2 E sum_i |Z_i - V_i|^2 dt + Phi(Y) - Phi(U),

    exact on the tree.  Phi(Y) = +inf is reported as total = +inf.
    """
    tree = cand.tree
    xi = btree._as_leaf(tree, xi_leaf)
    if bsvi_constraint_defect(cand) > ctol * (1.0 + float(np.abs(cand.eta).max())):
        raise ValueError("candidate violates the backward identity")
    p_leaf = tree.level_probabilities(tree.depth)
    init = 0.5 * float(p_leaf @ np.sum((cand.eta - xi) ** 2, axis=1))
    lvl_p = [tree.level_probabilities(i) for i in range(tree.depth)]
    phi_y = 0.0
    for i in range(tree.depth):
        v = ops.phi_value(spec, cand.Y.levels[i])
        if np.any(np.isinf(v)):
            return FunctionalReport(total=_INF, terms={"initial": init, "probe_sup": _INF},
                                    probes_used={"UV": len(probes_UV) + 1},
                                    certified_lower_bound=True)
        phi_y += tree.dt * float(lvl_p[i] @ v)
    probe_list = [(cand.Y, cand.Z)] + list(probes_UV)
    best = -np.inf
    for u_proc, v_proc in probe_list:
        val = init + phi_y
        feasible = True
        for i in range(tree.depth):
            u = u_proc.levels[i]
            v = v_proc.levels[i]
            phi_u = ops.phi_value(spec, u)
            if np.any(np.isinf(phi_u)):
                feasible = False
                break
            drift = np.zeros_like(u) if F is None else np.asarray(
                F(i * tree.dt, u, v), dtype=float)
            term = (np.sum((u - cand.Y.levels[i]) * (drift - cand.G.levels[i]), axis=1)
                    - 0.5 * np.sum((cand.Z.levels[i] - v) ** 2, axis=1) - phi_u)
            val += tree.dt * float(lvl_p[i] @ term)
        if feasible:
            best = max(best, val)
    terms = {"initial": init, "probe_sup": best}
    return FunctionalReport(total=best, terms=terms,
                            probes_used={"UV": len(probe_list)},
                            certified_lower_bound=True)
