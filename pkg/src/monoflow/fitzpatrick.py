"""Fitzpatrick representative functions and graph-membership residuals.

For a maximal monotone A, the convex function

    H_A(x, x*) = sup { <u, x*> + <x, u*> - <u, u*> : (u, u*) in graph(A) }

dominates <x, x*> everywhere and touches it exactly on the graph, so the
"gap" H_A(x,x*) - <x,x*> >= 0 is a scalar residual for the inclusion
x* in A(x).  Closed forms are available for all built-in kinds except
non-symmetric linear operators and operator sums; in those cases a sampled
supremum is reported as a certified lower bound, never as H itself.

Extended-real convention: +inf is a first-class value and inf - finite = inf.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import operators as ops
from .paths import BVPath, GridPath

HOMOGENEOUS = "homogeneous"
DENSITY = "density"


@dataclass(frozen=True)
class FitzValue:
    value: float          # in [<x,x*> - 1e-9, +inf]
    exact: bool           # closed form vs certified sampled lower bound


@dataclass(frozen=True)
class GapReport:
    gap: float            # H(x,x*) - <x,x*> >= 0, possibly +inf
    exact: bool
    witness: Optional[ops.GraphPair] = None


def has_closed_form(spec: ops.OperatorSpec) -> bool:
    k = spec.kind
    if k in (ops.NORMAL_CONE_BOX, ops.SUBDIFF_INDICATOR_INTERVAL,
             ops.NORMAL_CONE_BALL, ops.SUBDIFF_ABS_SUM, ops.SCALED_IDENTITY):
        return True
    if k == ops.LINEAR_MONOTONE:
        m = spec.matrix
        return bool(np.allclose(m, m.T, atol=1e-12)
                    and np.linalg.eigvalsh(0.5 * (m + m.T)).min() > 1e-12)
    return False


def support_function(spec: ops.OperatorSpec, v) -> np.ndarray:
    """sigma_E(v) for the domain set E of a cone kind; broadcasts over (..., d)."""
    v = np.asarray(v, dtype=float)
    k = spec.kind
    if k in (ops.NORMAL_CONE_BOX, ops.SUBDIFF_INDICATOR_INTERVAL):
        term = np.where(v > 0, spec.hi * v, np.where(v < 0, spec.lo * v, 0.0))
        return np.sum(term, axis=-1)
    if k == ops.NORMAL_CONE_BALL:
        return np.sum(spec.center * v, axis=-1) + spec.radius * np.linalg.norm(v, axis=-1)
    raise ValueError("support function defined for normal-cone kinds only")


def _closed_form_many(spec, x, xstar, dom_tol=1e-9):
    """Vectorized closed-form H over stacked (..., d) inputs; None if unavailable."""
    x = np.asarray(x, dtype=float)
    xs = np.asarray(xstar, dtype=float)
    k = spec.kind
    if k in (ops.NORMAL_CONE_BOX, ops.SUBDIFF_INDICATOR_INTERVAL, ops.NORMAL_CONE_BALL):
        inside = ops.in_domain(spec, x, tol=dom_tol)
        sigma = support_function(spec, xs)
        return np.where(inside, sigma, np.inf)
    if k == ops.SUBDIFF_ABS_SUM:
        w = spec.weights
        ok = np.all(np.abs(xs) <= w * (1.0 + 1e-12) + 1e-12, axis=-1)
        return np.where(ok, np.sum(w * np.abs(x), axis=-1), np.inf)
    if k == ops.SCALED_IDENTITY:
        c = spec.scale
        if c == 0.0:
            zero = np.linalg.norm(xs, axis=-1) <= 1e-12
            return np.where(zero, 0.0, np.inf)
        return np.sum((c * x + xs) ** 2, axis=-1) / (4.0 * c)
    if k == ops.LINEAR_MONOTONE and has_closed_form(spec):
        m = spec.matrix
        r = xs - np.einsum("ij,...j->...i", m, x)
        minv_r = np.einsum("ij,...j->...i", np.linalg.inv(m), r)
        return np.sum(x * xs, axis=-1) + 0.25 * np.sum(r * minv_r, axis=-1)
    return None


def _sampled_sup(spec, x, xstar, sampling):
    box, n, seed = sampling
    pairs = ops.graph_sample(spec, box, n, eps=1.0, seed=seed)
    u, ustar = ops.pairs_to_arrays(pairs)
    vals = u @ np.asarray(xstar) + ustar @ np.asarray(x) - np.sum(u * ustar, axis=1)
    best = int(np.argmax(vals))
    return float(vals[best]), pairs[best]


def fitz_pointwise(spec: ops.OperatorSpec, x, xstar, sampling=None,
                   dom_tol: float = 1e-9) -> FitzValue:
    """H_A(x, x*): closed form where available, else a sampled lower bound.

    The sampled value is floored at <x, x*> (itself a valid lower bound for
    maximal monotone operators), so FitzValue.value >= <x,x*> always holds.
    """
    x = np.asarray(x, dtype=float)
    xstar = np.asarray(xstar, dtype=float)
    if x.shape != xstar.shape or x.shape != (spec.dim,):
        raise ValueError("x and xstar must both have shape (dim,)")
    closed = _closed_form_many(spec, x, xstar, dom_tol=dom_tol)
    if closed is not None:
        return FitzValue(value=float(closed), exact=True)
    if sampling is None:
        raise ValueError("operator kind has no closed-form H; sampling required")
    val, _ = _sampled_sup(spec, x, xstar, sampling)
    return FitzValue(value=max(val, float(x @ xstar)), exact=False)


def membership_test(spec: ops.OperatorSpec, x, xstar, tol: float,
                    sampling=None) -> tuple[bool, GapReport]:
    """Decide x* in A(x) via the gap residual.

    With closed-form H the gap alone decides.  With a sampled H, acceptance
    additionally requires the resolvent fixed-point identity
    |x - J_1(x + x*)| <= tol, which characterizes graph membership exactly;
    a small sampled gap alone certifies nothing.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    x = np.asarray(x, dtype=float)
    xstar = np.asarray(xstar, dtype=float)
    pairing = float(x @ xstar)
    if has_closed_form(spec):
        h = fitz_pointwise(spec, x, xstar)
        gap = h.value - pairing if np.isfinite(h.value) else np.inf
        return bool(gap <= tol), GapReport(gap=max(gap, 0.0), exact=True)
    if sampling is None:
        sampling = ((x - (1.0 + np.abs(x)), x + (1.0 + np.abs(x))), 512, 0)
    val, witness = _sampled_sup(spec, x, xstar, sampling)
    gap = max(val - pairing, 0.0)
    fp = float(np.linalg.norm(x - ops.resolvent(spec, 1.0, x + xstar)))
    return bool(gap <= tol and fp <= tol), GapReport(gap=gap, exact=False, witness=witness)


def _conjugate_1d(spec, x, xstar, lo, hi, n, rounds=6):
    # zooming grid search for sup_{y,y*} <y,x*> + <x,y*> - H(y,y*), d = 1
    c_lo, c_hi = float(lo), float(hi)
    ylo, yhi, slo, shi = c_lo, c_hi, c_lo, c_hi
    best = -np.inf
    by = bs = 0.0
    for _ in range(rounds):
        y = np.linspace(ylo, yhi, n)
        s = np.linspace(slo, shi, n)
        yy, ss = np.meshgrid(y, s, indexing="ij")
        h = _closed_form_many(spec, yy[..., None], ss[..., None])
        vals = yy * xstar + ss * x - h
        vals = np.where(np.isfinite(vals), vals, -np.inf)
        i, j = np.unravel_index(np.argmax(vals), vals.shape)
        if vals[i, j] > best:
            best, by, bs = float(vals[i, j]), y[i], s[j]
        wy, ws = (yhi - ylo) / (n - 1), (shi - slo) / (n - 1)
        ylo, yhi = max(c_lo, by - 2 * wy), min(c_hi, by + 2 * wy)
        slo, shi = max(c_lo, bs - 2 * ws), min(c_hi, bs + 2 * ws)
    return best


def _conjugate_sampled(spec, x, xstar, lo, hi, n, seed, rounds=8):
    rng = np.random.default_rng(seed)
    d = spec.dim
    lo = np.broadcast_to(np.asarray(lo, dtype=float), (d,))
    hi = np.broadcast_to(np.asarray(hi, dtype=float), (d,))
    center_y = rng.uniform(lo, hi)
    center_s = rng.uniform(lo, hi)
    scale = float(np.max(hi - lo))
    best = -np.inf
    for _ in range(rounds):
        y = center_y + scale * rng.standard_normal((n, d))
        s = center_s + scale * rng.standard_normal((n, d))
        h = _closed_form_many(spec, y, s)
        vals = y @ xstar + s @ x - h
        vals = np.where(np.isfinite(vals), vals, -np.inf)
        i = int(np.argmax(vals))
        if vals[i] > best:
            best, center_y, center_s = float(vals[i]), y[i], s[i]
        scale *= 0.35
    return best


def fenchel_gap(spec: ops.OperatorSpec, x, xstar, sampling) -> float:
    """H(x,x*) + H*(x*,x) - 2<x,x*>, with the conjugate taken by sampled sup.

    Nonnegative up to sampling slack; ~0 exactly at graph points.  Requires a
    closed-form H (the conjugate sweep must evaluate H densely).
    """
    if not has_closed_form(spec):
        raise ValueError("fenchel_gap requires a closed-form Fitzpatrick function")
    x = np.asarray(x, dtype=float)
    xstar = np.asarray(xstar, dtype=float)
    (lo, hi), n, seed = sampling
    h = fitz_pointwise(spec, x, xstar).value
    if spec.dim == 1:
        conj = _conjugate_1d(spec, float(x[0]), float(xstar[0]),
                             np.min(lo), np.max(hi), n)
    else:
        conj = _conjugate_sampled(spec, x, xstar, lo, hi, n, seed)
    return float(h + conj - 2.0 * float(x @ xstar))


def step_gaps(spec: ops.OperatorSpec, x: GridPath, k: BVPath, mode: str,
              dom_tol: float = 1e-9) -> np.ndarray:
    """Per-step Fitzpatrick gaps of a discrete pair (x, k); see path_fitz_gap."""
    if not np.array_equal(x.t, k.t):
        raise ValueError("path and BV companion live on different grids")
    xr = x.values[1:]                       # right endpoints pair with increments
    dk = k.increments
    if mode == HOMOGENEOUS:
        if not ops.is_cone(spec):
            raise ValueError("homogeneous mode requires a normal-cone kind")
        inside = ops.in_domain(spec, xr, tol=dom_tol)
        sigma = support_function(spec, dk)
        h = np.where(inside, sigma, np.inf)
        return h - np.sum(xr * dk, axis=-1)
    if mode == DENSITY:
        dt = x.dt[:, None]
        dens = dk / dt
        h = _closed_form_many(spec, xr, dens, dom_tol=dom_tol)
        if h is None:
            raise ValueError("density mode requires a closed-form Fitzpatrick function")
        return (h - np.sum(xr * dens, axis=-1)) * x.dt
    raise ValueError(f"unknown mode {mode!r}")


def path_fitz_gap(spec: ops.OperatorSpec, x: GridPath, k: BVPath,
                  mode: str = HOMOGENEOUS, dom_tol: float = 1e-9) -> float:
    """Discrete Fitzpatrick residual of the path realization of A.

    homogeneous: sum_i [sigma_E(dk_i) - <x_{i+1}, dk_i>]  (normal cones; H is
    positively homogeneous in x*, so increments need no time density).
    density:     sum_i [H(x_{i+1}, dk_i/dt_i) - <x_{i+1}, dk_i/dt_i>] dt_i.

    Zero (<= tol) iff every step satisfies the discrete inclusion
    dk_i in dt_i * A(x_{i+1}); always >= -1e-9 for valid inputs.
    """
    g = step_gaps(spec, x, k, mode, dom_tol=dom_tol)
    if np.any(np.isinf(g)):
        return float(np.inf)
    return float(np.sum(g))


def default_path_mode(spec: ops.OperatorSpec) -> str:
    return HOMOGENEOUS if ops.is_cone(spec) else DENSITY


def gap_report_csv(rows) -> str:
    """CSV dump of (operator_tag, x, xstar, GapReport) tuples."""
    out = ["operator,x,xstar,gap,exact,witness_u,witness_ustar"]
    for tag, x, xstar, rep in rows:
        wit_u = wit_s = ""
        if rep.witness is not None:
            wit_u = " ".join(format(c, ".17g") for c in np.atleast_1d(rep.witness.u))
            wit_s = " ".join(format(c, ".17g") for c in np.atleast_1d(rep.witness.ustar))
        out.append(",".join([
            tag,
            " ".join(format(c, ".17g") for c in np.atleast_1d(x)),
            " ".join(format(c, ".17g") for c in np.atleast_1d(xstar)),
            format(rep.gap, ".17g"),
            str(rep.exact).lower(),
            wit_u,
            wit_s,
        ]))
    return "\n".join(out) + "\n"
