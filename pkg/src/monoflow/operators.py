"""Maximal monotone operators on R^d with computable resolvents.

Every operator is described by an `OperatorSpec` whose resolvent
J_eps(x) = (I + eps*A)^{-1}(x) is single-valued, total and cheap to
evaluate.  The Yosida selection A_eps(x) = (x - J_eps(x))/eps supplies
exact graph points (J_eps(x), A_eps(x)), which is the only access to the
graph the rest of the library needs.

All evaluation routines broadcast over leading axes: `x` may have shape
(..., d) and the result keeps the leading shape.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

NORMAL_CONE_BOX = "normal_cone_box"
NORMAL_CONE_BALL = "normal_cone_ball"
SUBDIFF_ABS_SUM = "subdiff_abs_sum"
SUBDIFF_INDICATOR_INTERVAL = "subdiff_indicator_interval"
LINEAR_MONOTONE = "linear_monotone"
SCALED_IDENTITY = "scaled_identity"
SUM = "sum"

_CONE_KINDS = (NORMAL_CONE_BOX, NORMAL_CONE_BALL, SUBDIFF_INDICATOR_INTERVAL)
_SUBDIFF_KINDS = _CONE_KINDS + (SUBDIFF_ABS_SUM, SCALED_IDENTITY)


class ResolventError(RuntimeError):
    """Composite resolvent iteration failed to converge.

    Carries the last fixed-point residual for diagnosis.
    """

    def __init__(self, message, residual):
        super().__init__(f"{message} (last residual {residual:.3e})")
        self.residual = residual


@dataclass(frozen=True)
class OperatorSpec:
    """Resolvent-computable maximal monotone operator on R^d."""

    kind: str
    dim: int
    lo: Optional[np.ndarray] = None        # box bounds, may contain +-inf
    hi: Optional[np.ndarray] = None
    center: Optional[np.ndarray] = None    # ball
    radius: Optional[float] = None
    weights: Optional[np.ndarray] = None   # weighted l1 subdifferential
    matrix: Optional[np.ndarray] = None    # monotone linear part
    scale: Optional[float] = None          # c*I
    summand: Optional["OperatorSpec"] = None  # subdifferential part of a sum
    fp_damping: float = field(default=0.5, repr=False)
    fp_max_iter: int = field(default=10_000, repr=False)
    fp_tol: float = field(default=1e-12, repr=False)


@dataclass(frozen=True)
class GraphPair:
    """A certified element (u, ustar) of the operator graph."""

    u: np.ndarray
    ustar: np.ndarray


def normal_cone_box(lo, hi) -> OperatorSpec:
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    if lo.shape != hi.shape or lo.ndim != 1:
        raise ValueError("lo and hi must be 1-d arrays of equal length")
    if not np.all(lo < hi):
        raise ValueError("box must satisfy lo < hi componentwise")
    return OperatorSpec(kind=NORMAL_CONE_BOX, dim=lo.size, lo=lo, hi=hi)


def normal_cone_ball(center, radius) -> OperatorSpec:
    center = np.asarray(center, dtype=float)
    if radius <= 0:
        raise ValueError("radius must be positive")
    return OperatorSpec(kind=NORMAL_CONE_BALL, dim=center.size,
                        center=center, radius=float(radius))


def subdiff_abs_sum(weights) -> OperatorSpec:
    w = np.asarray(weights, dtype=float)
    if not np.all(w > 0):
        raise ValueError("weights must be positive")
    return OperatorSpec(kind=SUBDIFF_ABS_SUM, dim=w.size, weights=w)


def subdiff_indicator_interval(a, b, dim) -> OperatorSpec:
    if not a < b:
        raise ValueError("interval must satisfy a < b")
    return OperatorSpec(kind=SUBDIFF_INDICATOR_INTERVAL, dim=dim,
                        lo=np.full(dim, float(a)), hi=np.full(dim, float(b)))


def linear_monotone(matrix) -> OperatorSpec:
    m = np.asarray(matrix, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError("matrix must be square")
    sym = 0.5 * (m + m.T)
    if np.linalg.eigvalsh(sym).min() < -1e-10 * (1.0 + np.abs(m).max()):
        raise ValueError("symmetric part must be positive semidefinite")
    return OperatorSpec(kind=LINEAR_MONOTONE, dim=m.shape[0], matrix=m)


def scaled_identity(c, dim) -> OperatorSpec:
    if c < 0:
        raise ValueError("scale must be nonnegative")
    return OperatorSpec(kind=SCALED_IDENTITY, dim=dim, scale=float(c))


def operator_sum(linear: OperatorSpec, subdiff: OperatorSpec) -> OperatorSpec:
    if linear.kind != LINEAR_MONOTONE:
        raise ValueError("first summand must be linear_monotone")
    if subdiff.kind not in _SUBDIFF_KINDS:
        raise ValueError("second summand must be a subdifferential kind")
    if linear.dim != subdiff.dim:
        raise ValueError("summand dimensions differ")
    return OperatorSpec(kind=SUM, dim=linear.dim, matrix=linear.matrix,
                        summand=subdiff)


def is_cone(spec: OperatorSpec) -> bool:
    """True for normal cones of convex sets (box, interval, ball)."""
    return spec.kind in _CONE_KINDS


def is_subdifferential(spec: OperatorSpec) -> bool:
    """True when the operator is the subdifferential of a known convex potential."""
    if spec.kind in _SUBDIFF_KINDS:
        return True
    if spec.kind == LINEAR_MONOTONE:
        return bool(np.allclose(spec.matrix, spec.matrix.T))
    return False


def _ball_project(center, radius, x):
    v = x - center
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    shrink = np.where(n > radius, radius / np.where(n == 0.0, 1.0, n), 1.0)
    return center + v * shrink


def _soft_threshold(w, eps, x):
    return np.sign(x) * np.maximum(np.abs(x) - eps * w, 0.0)


def resolvent(spec: OperatorSpec, eps: float, x) -> np.ndarray:
    """J_eps(x) = (I + eps*A)^{-1}(x); broadcasts over leading axes of x."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = np.asarray(x, dtype=float)
    k = spec.kind
    if k in (NORMAL_CONE_BOX, SUBDIFF_INDICATOR_INTERVAL):
        return np.clip(x, spec.lo, spec.hi)
    if k == NORMAL_CONE_BALL:
        return _ball_project(spec.center, spec.radius, x)
    if k == SUBDIFF_ABS_SUM:
        return _soft_threshold(spec.weights, eps, x)
    if k == SCALED_IDENTITY:
        return x / (1.0 + eps * spec.scale)
    if k == LINEAR_MONOTONE:
        a = np.eye(spec.dim) + eps * spec.matrix
        flat = x.reshape(-1, spec.dim)
        return np.linalg.solve(a, flat.T).T.reshape(x.shape)
    if k == SUM:
        return _sum_resolvent(spec, eps, x)
    raise ValueError(f"unknown operator kind {k!r}")


def _sum_resolvent(spec, eps, x):
    # y solves y + eps*M y + eps*df(y) contains x; damped fixed point
    # y <- (1-th) y + th * J^f_eps(x - eps*M y).  No global contraction is
    # assumed, hence the iteration cap with a diagnostic error.
    m = spec.matrix
    inner = spec.summand
    y = resolvent(inner, eps, x)
    th = spec.fp_damping
    tol = spec.fp_tol * (1.0 + float(np.max(np.abs(x))) if x.size else 1.0)
    res = np.inf
    for _ in range(spec.fp_max_iter):
        y_new = (1.0 - th) * y + th * resolvent(inner, eps, x - eps * (y @ m.T))
        res = float(np.max(np.abs(y_new - y))) if y.size else 0.0
        y = y_new
        if res <= tol:
            return y
    raise ResolventError("sum-operator resolvent did not converge", res)


def yosida(spec: OperatorSpec, eps: float, x):
    """Return (J_eps(x), A_eps(x)); the pair is an exact graph point of A."""
    x = np.asarray(x, dtype=float)
    jx = resolvent(spec, eps, x)
    return jx, (x - jx) / eps


def graph_sample(spec: OperatorSpec, box, n: int, eps: float, seed) -> list[GraphPair]:
    """Exact graph points obtained by pushing uniform draws through the Yosida map.

    Deterministic given `seed`; for fixed seed the first n points of a
    larger sample extend the smaller one.
    """
    lo = np.broadcast_to(np.asarray(box[0], dtype=float), (spec.dim,))
    hi = np.broadcast_to(np.asarray(box[1], dtype=float), (spec.dim,))
    if not np.all(lo < hi):
        raise ValueError("sampling box must satisfy lo < hi")
    if n < 0:
        raise ValueError("n must be nonnegative")
    rng = np.random.default_rng(seed)
    v = rng.uniform(lo, hi, size=(n, spec.dim))
    u, ustar = yosida(spec, eps, v)
    return [GraphPair(u=u[i], ustar=ustar[i]) for i in range(n)]


def pairs_to_arrays(pairs):
    """Stack a GraphPair sequence into (n,d) arrays (u, ustar)."""
    u = np.array([p.u for p in pairs], dtype=float)
    ustar = np.array([p.ustar for p in pairs], dtype=float)
    return u, ustar


def monotonicity_certificate(pairs) -> float:
    """min over pairs of <u-v, u*-v*>; >= -1e-12 certifies monotone samples."""
    if len(pairs) < 2:
        raise ValueError("need at least two graph pairs")
    u, ustar = pairs_to_arrays(pairs)
    du = u[:, None, :] - u[None, :, :]
    ds = ustar[:, None, :] - ustar[None, :, :]
    prod = np.einsum("ijk,ijk->ij", du, ds)
    iu = np.triu_indices(len(pairs), k=1)
    return float(prod[iu].min())


def dom_project(spec: OperatorSpec, x) -> np.ndarray:
    """Metric projection onto cl Dom(A) (resolvents of cone kinds are eps-free)."""
    x = np.asarray(x, dtype=float)
    if spec.kind in _CONE_KINDS:
        return resolvent(spec, 1.0, x)
    if spec.kind == SUM:
        return dom_project(spec.summand, x)
    return x


def dom_distance(spec: OperatorSpec, x) -> float:
    return float(np.linalg.norm(np.asarray(x, dtype=float) - dom_project(spec, x)))


def in_domain(spec: OperatorSpec, x, tol: float = 1e-9):
    """Componentwise-broadcast test for membership in cl Dom(A) within tol."""
    x = np.asarray(x, dtype=float)
    p = dom_project(spec, x)
    return np.linalg.norm(x - p, axis=-1) <= tol


def phi_value(spec: OperatorSpec, x):
    """Potential phi with A = d(phi), where one exists; broadcasts to (...,).

    Indicator kinds return 0 inside the set (tolerance 1e-9) and +inf
    outside; raises for operators that are not subdifferentials.
    """
    x = np.asarray(x, dtype=float)
    k = spec.kind
    if k in (NORMAL_CONE_BOX, SUBDIFF_INDICATOR_INTERVAL):
        inside = np.all((x >= spec.lo - 1e-9) & (x <= spec.hi + 1e-9), axis=-1)
        return np.where(inside, 0.0, np.inf)
    if k == NORMAL_CONE_BALL:
        inside = np.linalg.norm(x - spec.center, axis=-1) <= spec.radius + 1e-9
        return np.where(inside, 0.0, np.inf)
    if k == SUBDIFF_ABS_SUM:
        return np.sum(spec.weights * np.abs(x), axis=-1)
    if k == SCALED_IDENTITY:
        return 0.5 * spec.scale * np.sum(x * x, axis=-1)
    if k == LINEAR_MONOTONE and is_subdifferential(spec):
        return 0.5 * np.einsum("...i,ij,...j->...", x, spec.matrix, x)
    raise ValueError(f"operator kind {k!r} has no convex potential")


# -- serialization ----------------------------------------------------------

def _fmt_vec(v):
    return ",".join(format(float(c), ".17g") for c in np.atleast_1d(v))


def _parse_vec(s):
    return np.array([float(c) for c in s.split(",")], dtype=float)


def to_record(spec: OperatorSpec) -> str:
    """One-line text record; floats carry 17 significant digits."""
    parts = [f"kind={spec.kind}", f"dim={spec.dim}"]
    if spec.lo is not None:
        parts.append(f"lo={_fmt_vec(spec.lo)}")
        parts.append(f"hi={_fmt_vec(spec.hi)}")
    if spec.center is not None:
        parts.append(f"center={_fmt_vec(spec.center)}")
        parts.append(f"radius={format(spec.radius, '.17g')}")
    if spec.weights is not None:
        parts.append(f"weights={_fmt_vec(spec.weights)}")
    if spec.matrix is not None:
        parts.append(f"matrix={_fmt_vec(spec.matrix.reshape(-1))}")
    if spec.scale is not None:
        parts.append(f"scale={format(spec.scale, '.17g')}")
    if spec.summand is not None:
        parts.append(f"summand=[{to_record(spec.summand)}]")
    return ";".join(parts)


def from_record(record: str) -> OperatorSpec:
    fields = {}
    rest = record
    while rest:
        key, _, rest = rest.partition("=")
        key = key.strip()
        if rest.startswith("["):
            depth, i = 0, 0
            for i, ch in enumerate(rest):
                depth += ch == "["
                depth -= ch == "]"
                if depth == 0:
                    break
            fields[key] = rest[1:i]
            rest = rest[i + 1:].lstrip(";")
        else:
            val, _, rest = rest.partition(";")
            fields[key] = val.strip()
    kind = fields["kind"]
    dim = int(fields["dim"])
    if kind in (NORMAL_CONE_BOX, SUBDIFF_INDICATOR_INTERVAL):
        spec = normal_cone_box(_parse_vec(fields["lo"]), _parse_vec(fields["hi"]))
        return replace(spec, kind=kind)
    if kind == NORMAL_CONE_BALL:
        return normal_cone_ball(_parse_vec(fields["center"]), float(fields["radius"]))
    if kind == SUBDIFF_ABS_SUM:
        return subdiff_abs_sum(_parse_vec(fields["weights"]))
    if kind == LINEAR_MONOTONE:
        return linear_monotone(_parse_vec(fields["matrix"]).reshape(dim, dim))
    if kind == SCALED_IDENTITY:
        return scaled_identity(float(fields["scale"]), dim)
    if kind == SUM:
        lin = linear_monotone(_parse_vec(fields["matrix"]).reshape(dim, dim))
        return operator_sum(lin, from_record(fields["summand"]))
    raise ValueError(f"unknown operator kind {kind!r}")
