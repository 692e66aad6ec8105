"""Multivalued forward SDEs: additive noise via pathwise reflection, and
stochastic variational inequalities via resolvent splitting.

Paths are independent work units; every path's increments come from an RNG
stream spawned deterministically from (seed, path index), so results do not
depend on how many paths are simulated or in which order.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import fitzpatrick as fitz
from . import gsp
from . import operators as ops
from .paths import BVPath, GridPath, uniform_grid

GAUSSIAN = "gaussian"
RADEMACHER = "rademacher"


@dataclass(frozen=True)
class WienerEnsemble:
    """Increment table dB ~ (n_paths, n_steps, k) plus path weights."""

    t: np.ndarray
    dB: np.ndarray
    seed: object
    law: str = GAUSSIAN
    weights: Optional[np.ndarray] = None   # None means uniform 1/P

    @property
    def n_paths(self) -> int:
        return self.dB.shape[0]

    @property
    def n_steps(self) -> int:
        return self.dB.shape[1]

    @property
    def k(self) -> int:
        return self.dB.shape[2]

    @property
    def dt(self) -> np.ndarray:
        return np.diff(self.t)

    def path_weights(self) -> np.ndarray:
        if self.weights is not None:
            return self.weights
        return np.full(self.n_paths, 1.0 / self.n_paths)

    def truncated(self, n_keep: int) -> "WienerEnsemble":
        """Zero out increments from step n_keep on (adaptedness checks)."""
        dB = self.dB.copy()
        dB[:, n_keep:, :] = 0.0
        return WienerEnsemble(t=self.t, dB=dB, seed=self.seed, law=self.law,
                              weights=self.weights)


def make_wiener_ensemble(T: float, n_steps: int, n_paths: int, k: int, seed,
                         law: str = GAUSSIAN) -> WienerEnsemble:
    t = uniform_grid(T, n_steps)
    dt = T / n_steps
    children = np.random.SeedSequence(seed).spawn(n_paths)
    dB = np.empty((n_paths, n_steps, k))
    for p, child in enumerate(children):
        rng = np.random.default_rng(child)
        if law == GAUSSIAN:
            dB[p] = rng.normal(0.0, np.sqrt(dt), size=(n_steps, k))
        elif law == RADEMACHER:
            dB[p] = np.sqrt(dt) * rng.choice([-1.0, 1.0], size=(n_steps, k))
        else:
            raise ValueError(f"unknown increment law {law!r}")
    return WienerEnsemble(t=t, dB=dB, seed=seed, law=law)


def make_exhaustive_rademacher_ensemble(T: float, n_steps: int) -> WienerEnsemble:
    """All 2^n sign paths with exact weights; expectations become exact sums (k = 1)."""
    t = uniform_grid(T, n_steps)
    sq = np.sqrt(T / n_steps)
    p = 2 ** n_steps
    signs = np.empty((p, n_steps, 1))
    for i in range(n_steps):
        block = p >> (i + 1)
        pattern = np.repeat(np.tile([1.0, -1.0], p // (2 * block)), block)
        signs[:, i, 0] = pattern
    return WienerEnsemble(t=t, dB=sq * signs, seed=None, law=RADEMACHER,
                          weights=np.full(p, 1.0 / p))


@dataclass(frozen=True)
class FieldCoefficients:
    """Drift F(t, x) -> (P,d) and diffusion G(t, x) -> (P,d,k), vectorized over paths."""

    F: Callable
    G: Callable
    dissipative: bool = False

    def check_dissipativity(self, dim: int, k: int, seed=0, n: int = 256,
                            tol: float = 1e-9, scale: float = 2.0) -> float:
        """Sampled check of 2<x-y, F(t,x)-F(t,y)> + |G(t,x)-G(t,y)|^2 <= tol."""
        rng = np.random.default_rng(seed)
        t = rng.uniform(0.0, 1.0, size=n)
        x = scale * rng.standard_normal((n, dim))
        y = scale * rng.standard_normal((n, dim))
        worst = -np.inf
        for i in range(n):
            fx = self.F(t[i], x[i][None, :])[0]
            fy = self.F(t[i], y[i][None, :])[0]
            gx = self.G(t[i], x[i][None, :])[0]
            gy = self.G(t[i], y[i][None, :])[0]
            val = 2.0 * float((x[i] - y[i]) @ (fx - fy)) + float(np.sum((gx - gy) ** 2))
            worst = max(worst, val)
        if self.dissipative and worst > tol:
            raise ValueError(f"dissipativity flag set but sampled check fails ({worst:.3e})")
        return worst


def lift_field(f: Callable, out_shape: str):
    """Wrap a single-point function f(t, x(d,)) for batched (P,d) evaluation."""
    if out_shape == "vector":
        return lambda t, x: np.stack([np.asarray(f(t, xi), dtype=float) for xi in x])
    if out_shape == "matrix":
        return lambda t, x: np.stack([np.atleast_2d(np.asarray(f(t, xi), dtype=float)) for xi in x])
    raise ValueError("out_shape must be 'vector' or 'matrix'")


@dataclass(frozen=True)
class SdeEnsemble:
    t: np.ndarray
    X: np.ndarray              # (P, N+1, d)
    K_increments: np.ndarray   # (P, N, d)
    g: np.ndarray              # (P, N, d, k) diffusion actually applied
    xi: np.ndarray             # (P, d)
    ensemble: WienerEnsemble
    diagnostics: dict = field(default_factory=dict)

    @property
    def n_paths(self) -> int:
        return self.X.shape[0]

    def path_solution(self, p: int) -> gsp.GspSolution:
        x = GridPath(t=self.t, values=self.X[p])
        k = BVPath(t=self.t, increments=self.K_increments[p])
        return gsp.GspSolution(x=x, k=k, diagnostics={})


def _per_path_gaps(spec, t, X, K_inc):
    mode = fitz.default_path_mode(spec)
    p = X.shape[0]
    gaps = np.empty(p)
    for i in range(p):
        x = GridPath(t=t, values=X[i])
        k = BVPath(t=t, increments=K_inc[i])
        try:
            gaps[i] = fitz.path_fitz_gap(spec, x, k, mode)
        except ValueError:
            gaps[i] = np.nan
    return gaps


def _moment_summaries(ens: WienerEnsemble, X, K_inc):
    w = ens.path_weights()
    sup2 = np.max(np.linalg.norm(X, axis=2), axis=1) ** 2
    tv = np.sum(np.linalg.norm(K_inc, axis=2), axis=1)
    out = {
        "E_sup_X2": float(w @ sup2),
        "E_TV_K": float(w @ tv),
        "E_XT2": float(w @ np.sum(X[:, -1, :] ** 2, axis=1)),
    }
    p = ens.n_paths
    out["SE_sup_X2"] = float(np.sqrt(max(w @ sup2 ** 2 - out["E_sup_X2"] ** 2, 0.0) / p))
    out["SE_XT2"] = float(np.sqrt(max(
        w @ np.sum(X[:, -1, :] ** 2, axis=1) ** 2 - out["E_XT2"] ** 2, 0.0) / p))
    return out


def resolve_xi(xi_sampler, spec, n_paths, seed):
    """Accept an (P,d) array or a callable(rng, n) and clip into cl Dom(A)."""
    if callable(xi_sampler):
        rng = np.random.default_rng(np.random.SeedSequence((seed, 0xA1)))
        xi = np.asarray(xi_sampler(rng, n_paths), dtype=float)
    else:
        xi = np.asarray(xi_sampler, dtype=float)
    if xi.ndim == 1:
        xi = np.broadcast_to(xi, (n_paths, spec.dim)).copy()
    return ops.dom_project(spec, xi)


def _g_table(G_path, n_steps, d, k):
    g = np.asarray(G_path, dtype=float)
    if g.ndim == 2:
        g = np.broadcast_to(g, (n_steps, d, k)).copy()
    if g.shape != (n_steps, d, k):
        raise ValueError("G_path must be (d,k) or (n_steps,d,k)")
    return g


def solve_sde_additive(spec: ops.OperatorSpec, xi_sampler, G_path,
                       ensemble: WienerEnsemble) -> SdeEnsemble:
    """Additive-noise equation dX + A(X)(dt) ∋ G dB, solved pathwise as a
    generalized Skorohod problem with driver M = cumulative G dB."""
    d = spec.dim
    xi = resolve_xi(xi_sampler, spec, ensemble.n_paths, ensemble.seed)
    g = _g_table(G_path, ensemble.n_steps, d, ensemble.k)
    dM = np.einsum("idk,pik->pid", g, ensemble.dB)
    X, K_inc = gsp.solve_gsp_many(spec, xi, dM, ensemble.t)
    g_paths = np.broadcast_to(g[None, ...],
                              (ensemble.n_paths, ensemble.n_steps, d, ensemble.k)).copy()
    diag = _moment_summaries(ensemble, X, K_inc)
    diag["per_path_fitz_gap"] = _per_path_gaps(spec, ensemble.t, X, K_inc)
    diag["max_fitz_gap"] = float(np.nanmax(diag["per_path_fitz_gap"]))
    return SdeEnsemble(t=ensemble.t, X=X, K_increments=K_inc, g=g_paths, xi=xi,
                       ensemble=ensemble, diagnostics=diag)


def solve_svi(spec: ops.OperatorSpec, coeffs: FieldCoefficients, xi_sampler,
              ensemble: WienerEnsemble) -> SdeEnsemble:
    """Splitting scheme for dX + dphi(X)(dt) ∋ F dt + G dB: the resolvent is
    applied after the explicit drift/noise increment, so each step's
    dK_i = X_i + F dt + G dB - X_{i+1} lies in dt * dphi(X_{i+1}) exactly."""
    if not ops.is_subdifferential(spec):
        raise ValueError("solve_svi requires a subdifferential operator")
    d = spec.dim
    p, n = ensemble.n_paths, ensemble.n_steps
    xi = resolve_xi(xi_sampler, spec, p, ensemble.seed)
    if coeffs.dissipative:
        coeffs.check_dissipativity(d, ensemble.k)
    dt = ensemble.dt
    X = np.empty((p, n + 1, d))
    K_inc = np.empty((p, n, d))
    g_used = np.empty((p, n, d, ensemble.k))
    X[:, 0] = xi
    for i in range(n):
        ti = float(ensemble.t[i])
        fv = np.asarray(coeffs.F(ti, X[:, i]), dtype=float)
        gv = np.asarray(coeffs.G(ti, X[:, i]), dtype=float)
        if not (np.all(np.isfinite(fv)) and np.all(np.isfinite(gv))):
            raise ValueError(f"nonfinite coefficient values at step {i}")
        g_used[:, i] = gv
        w = X[:, i] + fv * dt[i] + np.einsum("pdk,pk->pd", gv, ensemble.dB[:, i])
        X[:, i + 1] = ops.resolvent(spec, float(dt[i]), w)
        K_inc[:, i] = w - X[:, i + 1]
    diag = _moment_summaries(ensemble, X, K_inc)
    diag["per_path_fitz_gap"] = _per_path_gaps(spec, ensemble.t, X, K_inc)
    diag["max_fitz_gap"] = float(np.nanmax(diag["per_path_fitz_gap"]))
    return SdeEnsemble(t=ensemble.t, X=X, K_increments=K_inc, g=g_used, xi=xi,
                       ensemble=ensemble, diagnostics=diag)


@dataclass(frozen=True)
class SviVerifyReport:
    min_probe_integral: float
    witness: tuple
    min_potential_slack: float
    path_fitz_gap: float
    tol: float

    @property
    def all_ok(self) -> bool:
        return (self.min_probe_integral >= -self.tol
                and self.min_potential_slack >= -self.tol
                and (np.isnan(self.path_fitz_gap) or self.path_fitz_gap <= self.tol))


def verify_svi(spec: ops.OperatorSpec, x: GridPath, k: BVPath, probes,
               tol: Optional[float] = None) -> SviVerifyReport:
    """Pathwise checks of the variational-inequality conditions.

    For every probe (z, z*) from dphi and every window: the monotonicity
    integral sum <x_{r+1}-z, dk_r - z* dt_r> >= -tol, and the potential form
    sum [<z - x_{r+1}, dk_r> + phi(x_{r+1}) dt] <= (t-s) phi(z) + tol.
    """
    if not probes:
        raise ValueError("need at least one probe")
    dt = x.dt[:, None]
    best = (np.inf, (0, 0, 0))
    worst_slack = np.inf
    phi_x = ops.phi_value(spec, x.values[1:])
    for pi, pair in enumerate(probes):
        terms = np.sum((x.values[1:] - pair.u) * (k.increments - pair.ustar * dt), axis=1)
        val, s, t = gsp.window_minimum(terms)
        if val < best[0]:
            best = (val, (pi, s, t))
        phi_z = float(ops.phi_value(spec, pair.u))
        slack_terms = (phi_z - phi_x) * x.dt - np.sum((pair.u - x.values[1:]) * k.increments, axis=1)
        worst_slack = min(worst_slack, gsp.window_minimum(slack_terms)[0])
    try:
        gap = fitz.path_fitz_gap(spec, x, k, fitz.default_path_mode(spec))
    except ValueError:
        gap = float("nan")
    if tol is None:
        tol = 1e-7 * (1.0 + x.sup_norm + k.total_variation)
    return SviVerifyReport(min_probe_integral=best[0], witness=best[1],
                           min_potential_slack=float(worst_slack),
                           path_fitz_gap=gap, tol=tol)


def ensemble_summary_csv(sde: SdeEnsemble) -> str:
    """Per-path summary: path_id, sup |X|, TV(K), fitz gap."""
    sup = np.max(np.linalg.norm(sde.X, axis=2), axis=1)
    tv = np.sum(np.linalg.norm(sde.K_increments, axis=2), axis=1)
    gaps = sde.diagnostics.get("per_path_fitz_gap")
    lines = ["path_id,supX,TVK,fitz_gap"]
    for p in range(sde.n_paths):
        g = gaps[p] if gaps is not None else float("nan")
        lines.append(",".join([str(p), format(sup[p], '.17g'),
                               format(tv[p], '.17g'), format(g, '.17g')]))
    return "\n".join(lines) + "\n"
