"""Piecewise-linear paths on a time grid and their bounded-variation companions."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def _check_grid(t):
    t = np.asarray(t, dtype=float)
    if t.ndim != 1 or t.size < 2:
        raise ValueError("grid needs at least two nodes")
    if t[0] != 0.0:
        raise ValueError("grid must start at t=0")
    if not np.all(np.diff(t) > 0):
        raise ValueError("grid must be strictly increasing")
    return t


@dataclass(frozen=True)
class GridPath:
    """Continuous path stored by node values; piecewise linear in between."""

    t: np.ndarray          # (N+1,)
    values: np.ndarray     # (N+1, d)

    def __post_init__(self):
        t = _check_grid(self.t)
        v = np.asarray(self.values, dtype=float)
        if v.ndim == 1:
            v = v[:, None]
        if v.ndim != 2 or v.shape[0] != t.size:
            raise ValueError("values length must match grid length")
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "values", v)

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    @property
    def n_steps(self) -> int:
        return self.t.size - 1

    @property
    def dt(self) -> np.ndarray:
        return np.diff(self.t)

    @property
    def increments(self) -> np.ndarray:
        return np.diff(self.values, axis=0)

    @property
    def sup_norm(self) -> float:
        return float(np.linalg.norm(self.values, axis=1).max())

    def modulus(self, delta: float) -> float:
        """Grid modulus of continuity: max |p(t_i)-p(t_j)| over |t_i-t_j| <= delta."""
        t, v = self.t, self.values
        out = 0.0
        for i in range(t.size):
            j = int(np.searchsorted(t, t[i] + delta, side="right"))
            if j - 1 > i:
                d = np.linalg.norm(v[i + 1:j] - v[i], axis=1).max()
                out = max(out, float(d))
        return out


def grid_path(t, values) -> GridPath:
    values = np.asarray(values, dtype=float)
    if values.ndim == 1:
        values = values[:, None]
    return GridPath(t=np.asarray(t, dtype=float), values=values)


def zero_path(t, dim: int) -> GridPath:
    t = np.asarray(t, dtype=float)
    return GridPath(t=t, values=np.zeros((t.size, dim)))


def sup_distance(a: GridPath, b: GridPath) -> float:
    _require_same_grid(a, b)
    return float(np.linalg.norm(a.values - b.values, axis=1).max())


def _require_same_grid(a, b):
    if not np.array_equal(a.t, b.t):
        raise ValueError("paths live on different grids")


@dataclass(frozen=True)
class BVPath:
    """Bounded-variation path stored by step increments; starts at 0."""

    t: np.ndarray            # (N+1,)
    increments: np.ndarray   # (N, d)

    def __post_init__(self):
        t = _check_grid(self.t)
        inc = np.asarray(self.increments, dtype=float)
        if inc.ndim == 1:
            inc = inc[:, None]
        if inc.ndim != 2 or inc.shape[0] != t.size - 1:
            raise ValueError("need one increment per grid step")
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "increments", inc)

    @property
    def dim(self) -> int:
        return self.increments.shape[1]

    @property
    def values(self) -> np.ndarray:
        v = np.vstack([np.zeros((1, self.dim)), np.cumsum(self.increments, axis=0)])
        return v

    @property
    def total_variation(self) -> float:
        return float(np.linalg.norm(self.increments, axis=1).sum())

    def as_grid_path(self) -> GridPath:
        return GridPath(t=self.t, values=self.values)


def bv_path(t, increments) -> BVPath:
    increments = np.asarray(increments, dtype=float)
    if increments.ndim == 1:
        increments = increments[:, None]
    return BVPath(t=np.asarray(t, dtype=float), increments=increments)


def uniform_grid(T: float, n_steps: int) -> np.ndarray:
    if T <= 0 or n_steps < 1:
        raise ValueError("need T > 0 and at least one step")
    return np.linspace(0.0, float(T), n_steps + 1)


def path_duality(z: GridPath, g: BVPath) -> float:
    """Discrete Stieltjes pairing sum_i <z(t_{i+1}), dg_i>.

    Right-endpoint evaluation matches the catching-up scheme, whose
    inclusions hold at the right node of each step.
    """
    _require_same_grid(z, g)
    return float(np.sum(z.values[1:] * g.increments))


# -- CSV round trip ---------------------------------------------------------

def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def grid_path_to_csv(p: GridPath) -> str:
    header = "t," + ",".join(f"v{i+1}" for i in range(p.dim))
    lines = [header]
    for ti, row in zip(p.t, p.values):
        lines.append(",".join([_fmt(ti)] + [_fmt(c) for c in row]))
    return "\n".join(lines) + "\n"


def grid_path_from_csv(text: str) -> GridPath:
    rows = [r for r in text.strip().splitlines()][1:]
    data = np.array([[float(c) for c in r.split(",")] for r in rows])
    return GridPath(t=data[:, 0], values=data[:, 1:])


def bv_path_to_csv(p: BVPath) -> str:
    header = "t," + ",".join(f"dk{i+1}" for i in range(p.dim))
    lines = [header, ",".join([_fmt(p.t[0])] + ["0"] * p.dim)]
    for ti, row in zip(p.t[1:], p.increments):
        lines.append(",".join([_fmt(ti)] + [_fmt(c) for c in row]))
    return "\n".join(lines) + "\n"


def bv_path_from_csv(text: str) -> BVPath:
    rows = [r for r in text.strip().splitlines()][1:]
    data = np.array([[float(c) for c in r.split(",")] for r in rows])
    return BVPath(t=data[:, 0], increments=data[1:, 1:])
