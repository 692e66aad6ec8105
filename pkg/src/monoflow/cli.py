"""Batch experiment runner: config in, CSV reports and a run manifest out.

Config files are flat INI text (sections of key = value).  Exit codes:
0 all verdicts pass, 1 some verdict failed, 2 config error, 3 numerical
failure.  Reruns with the same config and seed write byte-identical CSVs;
the manifest additionally records wall time and is excluded from the
byte-determinism contract.
"""

from __future__ import annotations

import argparse
import configparser
import json
import os
import sys
import time

import numpy as np

from . import __version__
from . import backward_tree as btree
from . import fitzpatrick as fitz
from . import forward_sde as fsde
from . import gsp
from . import operators as ops
from . import variational as vari
from .paths import (GridPath, bv_path_from_csv, bv_path_to_csv, grid_path,
                    grid_path_from_csv, grid_path_to_csv, uniform_grid)

OUT_ENV_VAR = "MONOFLOW_OUT"

KINDS = ("fitz-check", "gsp-solve", "gsp-minimize", "sde-run", "svi-run",
         "bsde-run", "verify")


class ConfigError(ValueError):
    pass


# -- leaf payoff expressions --------------------------------------------------
#
# grammar: identifiers `w`, numeric literals, + - * / (also accepted: × ÷),
# unary minus, parentheses, and the calls min(a,b), max(a,b), abs(a),
# clip(a, lo, hi).

_FUNCS = {
    "min": (2, np.minimum),
    "max": (2, np.maximum),
    "abs": (1, np.abs),
    "clip": (3, np.clip),
}


def _tokenize(src: str):
    out = []
    i = 0
    src = src.replace("×", "*").replace("÷", "/")
    while i < len(src):
        c = src[i]
        if c.isspace():
            i += 1
        elif c in "+-*/(),":
            out.append(c)
            i += 1
        elif c.isdigit() or c == ".":
            j = i
            while j < len(src) and (src[j].isdigit() or src[j] in ".eE"
                                    or (src[j] in "+-" and src[j - 1] in "eE")):
                j += 1
            out.append(("num", float(src[i:j])))
            i = j
        elif c.isalpha() or c == "_":
            j = i
            while j < len(src) and (src[j].isalnum() or src[j] == "_"):
                j += 1
            out.append(("name", src[i:j]))
            i = j
        else:
            raise ConfigError(f"bad character {c!r} in payoff expression")
    return out


class _PayoffParser:
    def __init__(self, tokens):
        self.toks = tokens
        self.pos = 0

    def peek(self):
        return self.toks[self.pos] if self.pos < len(self.toks) else None

    def take(self, expected=None):
        tok = self.peek()
        if tok is None or (expected is not None and tok != expected):
            raise ConfigError(f"payoff expression: expected {expected!r}, got {tok!r}")
        self.pos += 1
        return tok

    def parse(self):
        node = self.expr()
        if self.peek() is not None:
            raise ConfigError("payoff expression: trailing tokens")
        return node

    def expr(self):
        node = self.term()
        while self.peek() in ("+", "-"):
            op = self.take()
            rhs = self.term()
            node = (op, node, rhs)
        return node

    def term(self):
        node = self.unary()
        while self.peek() in ("*", "/"):
            op = self.take()
            rhs = self.unary()
            node = (op, node, rhs)
        return node

    def unary(self):
        if self.peek() == "-":
            self.take()
            return ("neg", self.unary())
        return self.atom()

    def atom(self):
        tok = self.peek()
        if tok == "(":
            self.take()
            node = self.expr()
            self.take(")")
            return node
        if isinstance(tok, tuple) and tok[0] == "num":
            self.take()
            return ("num", tok[1])
        if isinstance(tok, tuple) and tok[0] == "name":
            self.take()
            name = tok[1]
            if name == "w":
                return ("w",)
            if name in _FUNCS:
                arity, _ = _FUNCS[name]
                self.take("(")
                args = [self.expr()]
                while self.peek() == ",":
                    self.take()
                    args.append(self.expr())
                self.take(")")
                if len(args) != arity:
                    raise ConfigError(f"payoff function {name} takes {arity} arguments")
                return (name, *args)
            raise ConfigError(f"unknown identifier {name!r} in payoff expression")
        raise ConfigError(f"payoff expression: unexpected token {tok!r}")


def _eval_payoff(node, w):
    op = node[0]
    if op == "num":
        return np.full_like(w, node[1], dtype=float)
    if op == "w":
        return np.asarray(w, dtype=float)
    if op == "neg":
        return -_eval_payoff(node[1], w)
    if op in ("+", "-", "*", "/"):
        a = _eval_payoff(node[1], w)
        b = _eval_payoff(node[2], w)
        return {"+": np.add, "-": np.subtract, "*": np.multiply,
                "/": np.divide}[op](a, b)
    fn = _FUNCS[op][1]
    return fn(*[_eval_payoff(arg, w) for arg in node[1:]])


def compile_payoff(src: str):
    tree = _PayoffParser(_tokenize(src)).parse()
    return lambda w: _eval_payoff(tree, np.asarray(w, dtype=float))


# -- config parsing -----------------------------------------------------------

def _load_config(path: str) -> configparser.ConfigParser:
    cp = configparser.ConfigParser(interpolation=None)
    read = cp.read(path)
    if not read:
        raise ConfigError(f"cannot read config file {path!r}")
    if not cp.has_section("run"):
        raise ConfigError("config needs a [run] section")
    return cp


def _vec(s: str) -> np.ndarray:
    return np.array([float(c) for c in s.replace(",", " ").split()], dtype=float)


def _operator_from_config(cp) -> ops.OperatorSpec:
    if not cp.has_section("operator"):
        raise ConfigError("config needs an [operator] section")
    sec = cp["operator"]
    kind = sec.get("kind", "").strip()
    try:
        if kind == "normal_cone_box":
            return ops.normal_cone_box(_vec(sec["lo"]), _vec(sec["hi"]))
        if kind == "normal_cone_ball":
            return ops.normal_cone_ball(_vec(sec["center"]), sec.getfloat("radius"))
        if kind == "subdiff_abs_sum":
            return ops.subdiff_abs_sum(_vec(sec["weights"]))
        if kind == "subdiff_indicator_interval":
            return ops.subdiff_indicator_interval(sec.getfloat("a"), sec.getfloat("b"),
                                                  sec.getint("dim"))
        if kind == "scaled_identity":
            return ops.scaled_identity(sec.getfloat("scale"), sec.getint("dim"))
        if kind == "linear_monotone":
            dim = sec.getint("dim")
            return ops.linear_monotone(_vec(sec["matrix"]).reshape(dim, dim))
        if kind == "record":
            return ops.from_record(sec["record"])
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"bad operator section: {exc}") from exc
    raise ConfigError(f"unknown operator kind {kind!r}")


def _driver_from_config(cp, section: str, t: np.ndarray, dim: int) -> GridPath:
    sec = cp[section]
    name = sec.get("driver", "zero").strip()
    if name == "zero":
        vals = np.zeros((t.size, dim))
    elif name == "ramp":
        slope = _vec(sec.get("slope", "-1"))
        if slope.size == 1:
            slope = np.full(dim, slope[0])
        vals = t[:, None] * slope[None, :]
    elif name == "sine":
        amp = _vec(sec.get("amp", "1"))
        freq = _vec(sec.get("freq", "1"))
        if amp.size == 1:
            amp = np.full(dim, amp[0])
        if freq.size == 1:
            freq = np.full(dim, freq[0])
        vals = amp[None, :] * np.sin(freq[None, :] * t[:, None])
    elif name == "csv":
        with open(sec["path"], "r", encoding="utf-8") as fh:
            return grid_path_from_csv(fh.read())
    else:
        raise ConfigError(f"unknown driver {name!r}")
    return GridPath(t=t, values=vals)


def _grid_from_config(cp) -> np.ndarray:
    if not cp.has_section("grid"):
        raise ConfigError("config needs a [grid] section")
    return uniform_grid(cp["grid"].getfloat("T", 1.0), cp["grid"].getint("steps", 100))


def _fmt(v) -> str:
    return format(float(v), ".17g")


# -- experiments --------------------------------------------------------------

def _run_fitz_check(cp, spec, seed, outputs, out_dir):
    sec = cp["fitz"] if cp.has_section("fitz") else {}
    n_points = int(sec.get("n_points", 2000))
    n_graph = int(sec.get("n_graph", 500))
    tol = float(sec.get("tol", 1e-8))
    half = float(sec.get("box_halfwidth", 3.0))
    box = (np.full(spec.dim, -half), np.full(spec.dim, half))
    pairs = ops.graph_sample(spec, box, n_graph, eps=1.0, seed=seed)
    rows = []
    max_gap = 0.0
    for pair in pairs:
        ok, rep = fitz.membership_test(spec, pair.u, pair.ustar, tol)
        rows.append((spec.kind, pair.u, pair.ustar, rep))
        max_gap = max(max_gap, rep.gap)
    csv_path = os.path.join(out_dir, "gap_table.csv")
    with open(csv_path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(fitz.gap_report_csv(rows))
    outputs.append(csv_path)
    rng = np.random.default_rng(np.random.SeedSequence((seed, 1)))
    margin = np.inf
    if fitz.has_closed_form(spec):
        x = rng.uniform(box[0], box[1], size=(n_points, spec.dim))
        x = ops.dom_project(spec, x)
        xs = rng.uniform(-half, half, size=(n_points, spec.dim))
        h = fitz._closed_form_many(spec, x, xs)
        finite = np.isfinite(h)
        margin = float(np.min((h - np.sum(x * xs, axis=1))[finite])) if finite.any() else np.inf
    metrics = {"max_graph_gap": max_gap, "min_lower_bound_margin": margin}
    verdicts = {"graph_gaps_small": max_gap <= tol,
                "lower_bound_law": margin >= -1e-9}
    return metrics, verdicts


def _gsp_common(cp, spec, seed):
    t = _grid_from_config(cp)
    sec_name = "gsp" if cp.has_section("gsp") else "run"
    x0 = _vec(cp[sec_name].get("x0", "0"))
    if x0.size == 1 and spec.dim > 1:
        x0 = np.full(spec.dim, x0[0])
    m = _driver_from_config(cp, sec_name, t, spec.dim)
    return x0, m


def _probe_pairs(cp, spec, seed, n_default=50):
    sec = cp["gsp"] if cp.has_section("gsp") else {}
    n = int(sec.get("probes", n_default))
    half = float(sec.get("probe_halfwidth", 2.0))
    box = (np.full(spec.dim, -half), np.full(spec.dim, half))
    return ops.graph_sample(spec, box, n, eps=1.0, seed=seed + 1)


def _run_gsp_solve(cp, spec, seed, outputs, out_dir):
    x0, m = _gsp_common(cp, spec, seed)
    scheme = cp["gsp"].get("scheme", gsp.CATCHING_UP) if cp.has_section("gsp") else gsp.CATCHING_UP
    eps = cp["gsp"].getfloat("eps", fallback=None) if cp.has_section("gsp") else None
    sol = gsp.solve_gsp(spec, x0, m, scheme=scheme, eps=eps)
    report = gsp.verify_gsp(spec, x0, m, sol, _probe_pairs(cp, spec, seed))
    for name, text in (("x.csv", grid_path_to_csv(sol.x)),
                       ("k.csv", bv_path_to_csv(sol.k)),
                       ("m.csv", grid_path_to_csv(m)),
                       ("verify.txt", report.to_record())):
        path = os.path.join(out_dir, name)
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        outputs.append(path)
    metrics = {
        "fitz_gap": report.path_fitz_gap,
        "node_defect": report.node_defect,
        "min_probe_integral": report.min_probe_integral,
        "sup_norm": sol.diagnostics["sup_norm"],
        "total_variation": sol.diagnostics["total_variation"],
    }
    verdicts = {"node_identity": report.node_identity_ok,
                "variational_inequality": report.variational_ok,
                "fitz_gap_small": report.fitz_ok}
    return metrics, verdicts


def _run_gsp_minimize(cp, spec, seed, outputs, out_dir):
    x0, m = _gsp_common(cp, spec, seed)
    sec = cp["minimize"] if cp.has_section("minimize") else {}
    res = vari.minimize_gsp_jhat(spec, x0, m,
                                 max_iter=int(sec.get("max_iter", 60000)),
                                 tol=float(sec.get("tol", 1e-10)), seed=seed)
    sol = gsp.solve_gsp(spec, x0, m)
    dist = float(np.abs(res.candidate.k.values - sol.k.values).max())
    trace_path = os.path.join(out_dir, "trace.csv")
    with open(trace_path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("iter,objective\n")
        for i, v in enumerate(res.trace):
            fh.write(f"{i},{_fmt(v)}\n")
    outputs.append(trace_path)
    k_path = os.path.join(out_dir, "k_min.csv")
    with open(k_path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(bv_path_to_csv(res.candidate.k))
    outputs.append(k_path)
    check_tol = float(sec.get("verdict_tol", 1e-6))
    metrics = {"objective": res.objective, "k_sup_distance_to_solver": dist}
    verdicts = {"objective_small": res.objective <= check_tol,
                "matches_solver": dist <= float(sec.get("dist_tol", 1e-3))}
    return metrics, verdicts


def _run_sde(cp, spec, seed, outputs, out_dir):
    sec = cp["sde"] if cp.has_section("sde") else {}
    t = _grid_from_config(cp)
    n_paths = int(sec.get("n_paths", 1000))
    k_dim = int(sec.get("k", 1))
    ens = fsde.make_wiener_ensemble(t[-1], t.size - 1, n_paths, k_dim, seed)
    g = _vec(sec.get("G", "1")).reshape(spec.dim, k_dim) if "G" in sec else np.ones((spec.dim, k_dim))
    xi = _vec(sec.get("xi", "0"))
    if xi.size == 1 and spec.dim > 1:
        xi = np.full(spec.dim, xi[0])
    sde = fsde.solve_sde_additive(spec, xi, g, ens)
    path = os.path.join(out_dir, "ensemble_summary.csv")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(fsde.ensemble_summary_csv(sde))
    outputs.append(path)
    tol = float(sec.get("gap_tol", 1e-9))
    metrics = {k: v for k, v in sde.diagnostics.items() if np.isscalar(v)}
    verdicts = {"per_path_fitz_gap_small": sde.diagnostics["max_fitz_gap"] <= tol}
    return metrics, verdicts


def _run_svi(cp, spec, seed, outputs, out_dir):
    sec = cp["svi"] if cp.has_section("svi") else {}
    t = _grid_from_config(cp)
    n_paths = int(sec.get("n_paths", 500))
    k_dim = int(sec.get("k", 1))
    ens = fsde.make_wiener_ensemble(t[-1], t.size - 1, n_paths, k_dim, seed)
    a = float(sec.get("F_a", -1.0))
    b = _vec(sec.get("F_b", "0"))
    if b.size == 1 and spec.dim > 1:
        b = np.full(spec.dim, b[0])
    gconst = _vec(sec.get("G", "1")).reshape(spec.dim, k_dim) if "G" in sec else np.ones((spec.dim, k_dim))
    coeffs = fsde.FieldCoefficients(
        F=lambda ti, x: a * x + b,
        G=lambda ti, x: np.broadcast_to(gconst, (x.shape[0],) + gconst.shape).copy(),
    )
    xi = _vec(sec.get("xi", "0"))
    if xi.size == 1 and spec.dim > 1:
        xi = np.full(spec.dim, xi[0])
    sde = fsde.solve_svi(spec, coeffs, xi, ens)
    path = os.path.join(out_dir, "ensemble_summary.csv")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(fsde.ensemble_summary_csv(sde))
    outputs.append(path)
    worst = int(np.argmax(sde.diagnostics["per_path_fitz_gap"]))
    probes = ops.graph_sample(spec, (np.full(spec.dim, -2.0), np.full(spec.dim, 2.0)),
                              32, eps=1.0, seed=seed + 1)
    rep = fsde.verify_svi(spec, sde.path_solution(worst).x, sde.path_solution(worst).k, probes)
    tol = float(sec.get("gap_tol", 1e-9))
    metrics = {k: v for k, v in sde.diagnostics.items() if np.isscalar(v)}
    metrics["worst_path_min_probe_integral"] = rep.min_probe_integral
    verdicts = {"per_path_fitz_gap_small": sde.diagnostics["max_fitz_gap"] <= tol,
                "worst_path_variational": rep.all_ok}
    return metrics, verdicts


def _run_bsde(cp, spec, seed, outputs, out_dir):
    sec = cp["bsde"] if cp.has_section("bsde") else {}
    tree_sec = cp["tree"] if cp.has_section("tree") else {}
    tree = btree.BinomialTree(depth=int(tree_sec.get("depth", 6)),
                              horizon=float(tree_sec.get("horizon", 1.0)))
    payoff = compile_payoff(sec.get("payoff", "w"))
    xi = payoff(tree.walk_values(tree.depth))
    if xi.ndim == 1:
        xi = xi[:, None]
    xi = ops.dom_project(spec, xi)
    f_kind = sec.get("F_kind", "zero")
    if f_kind == "zero":
        drift = None
    elif f_kind == "linear":
        a = float(sec.get("F_a", -0.5))
        drift = lambda ti, y, z: a * y
    else:
        raise ConfigError(f"unknown F_kind {f_kind!r}")
    sol = btree.solve_bsvi_tree(spec, drift, xi, tree)
    cand = vari.bsvi_candidate_from_solution(tree, sol, drift)
    rep = vari.bsvi_jhat(spec, drift, xi, cand)
    path = os.path.join(out_dir, "tree.csv")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(btree.tree_csv(tree, sol))
    outputs.append(path)
    tol = float(sec.get("gap_tol", 1e-8))
    metrics = {"functional_total": rep.total,
               "max_node_gap": sol.residuals["max_node_gap"],
               "Y0": float(sol.Y.levels[0][0][0])}
    verdicts = {"functional_small": rep.total <= tol,
                "node_gaps_small": sol.residuals["max_node_gap"] <= tol}
    return metrics, verdicts


def _run_verify(cp, spec, seed, outputs, out_dir):
    sec = cp["verify"]
    with open(sec["x_csv"], "r", encoding="utf-8") as fh:
        x = grid_path_from_csv(fh.read())
    with open(sec["k_csv"], "r", encoding="utf-8") as fh:
        k = bv_path_from_csv(fh.read())
    x0 = _vec(sec.get("x0", "0"))
    if x0.size == 1 and spec.dim > 1:
        x0 = np.full(spec.dim, x0[0])
    m = _driver_from_config(cp, "verify", x.t, spec.dim)
    cand = gsp.GspSolution(x=x, k=k, diagnostics={})
    probes = _probe_pairs(cp, spec, seed) if cp.has_section("gsp") else ops.graph_sample(
        spec, (np.full(spec.dim, -2.0), np.full(spec.dim, 2.0)), 50, 1.0, seed + 1)
    report = gsp.verify_gsp(spec, x0, m, cand, probes)
    path = os.path.join(out_dir, "verify.txt")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(report.to_record())
    outputs.append(path)
    metrics = {"node_defect": report.node_defect,
               "min_probe_integral": report.min_probe_integral,
               "fitz_gap": report.path_fitz_gap}
    verdicts = {"node_identity": report.node_identity_ok,
                "variational_inequality": report.variational_ok,
                "fitz_gap_small": report.fitz_ok}
    return metrics, verdicts


_RUNNERS = {
    "fitz-check": _run_fitz_check,
    "gsp-solve": _run_gsp_solve,
    "gsp-minimize": _run_gsp_minimize,
    "sde-run": _run_sde,
    "svi-run": _run_svi,
    "bsde-run": _run_bsde,
    "verify": _run_verify,
}


def run(config_path: str, out_dir=None, seed_override=None) -> tuple[int, str]:
    """Execute one experiment; returns (exit code, manifest path or message)."""
    try:
        cp = _load_config(config_path)
        kind = cp["run"].get("kind", "").strip()
        if kind not in KINDS:
            raise ConfigError(f"unknown experiment kind {kind!r}")
        if seed_override is not None:
            seed = int(seed_override)
        else:
            if "seed" not in cp["run"]:
                raise ConfigError("config must carry an explicit seed")
            seed = cp["run"].getint("seed")
        if out_dir is None:
            out_dir = cp["run"].get("out", None) or os.environ.get(OUT_ENV_VAR, "out")
        os.makedirs(out_dir, exist_ok=True)
        spec = _operator_from_config(cp) if kind != "verify" or cp.has_section("operator") \
            else None
    except ConfigError as exc:
        return 2, f"config error: {exc}"
    except OSError as exc:
        return 2, f"config error: {exc}"
    outputs = []
    start = time.monotonic()
    try:
        metrics, verdicts = _RUNNERS[kind](cp, spec, seed, outputs, out_dir)
    except ConfigError as exc:
        return 2, f"config error: {exc}"
    except (KeyError, OSError) as exc:
        return 2, f"config error: {exc}"
    except (ops.ResolventError, btree.NodeFixedPointError, RuntimeError,
            ValueError, FloatingPointError) as exc:
        return 3, f"numerical failure: {exc}"
    wall = time.monotonic() - start
    manifest = {
        "kind": kind,
        "config": {s: dict(cp[s]) for s in cp.sections()},
        "version": __version__,
        "seed": seed,
        "wall_time_s": wall,
        "outputs": [os.path.basename(p) for p in outputs],
        "metrics": {k: (None if isinstance(v, float) and np.isnan(v) else float(v))
                    for k, v in metrics.items()},
        "verdicts": {k: bool(v) for k, v in verdicts.items()},
    }
    man_path = os.path.join(out_dir, "manifest.json")
    with open(man_path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return (0 if all(verdicts.values()) else 1), man_path


def compare(manifest_a: str, manifest_b: str, tol: float = 0.0):
    """Per-metric diff of two manifests of the same experiment kind."""
    with open(manifest_a, "r", encoding="utf-8") as fh:
        a = json.load(fh)
    with open(manifest_b, "r", encoding="utf-8") as fh:
        b = json.load(fh)
    if a["kind"] != b["kind"]:
        raise ConfigError(f"experiment kinds differ: {a['kind']} vs {b['kind']}")
    rows = []
    flagged = False
    for key in sorted(set(a["metrics"]) | set(b["metrics"])):
        va = a["metrics"].get(key)
        vb = b["metrics"].get(key)
        if va is None or vb is None:
            rows.append((key, va, vb, None, True))
            flagged = True
            continue
        diff = abs(va - vb)
        drift = diff > tol
        flagged = flagged or drift
        rows.append((key, va, vb, diff, drift))
    lines = ["metric,a,b,abs_diff,flagged"]
    for key, va, vb, diff, drift in rows:
        lines.append(",".join([
            key,
            "" if va is None else _fmt(va),
            "" if vb is None else _fmt(vb),
            "" if diff is None else _fmt(diff),
            str(bool(drift)).lower(),
        ]))
    return flagged, "\n".join(lines) + "\n"


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="monoflow",
                                     description="monotone-inclusion experiment runner")
    sub = parser.add_subparsers(dest="command", required=True)
    p_run = sub.add_parser("run", help="execute an experiment config")
    p_run.add_argument("config")
    p_run.add_argument("--out", default=None, help="output directory")
    p_run.add_argument("--seed", default=None, type=int, help="seed override")
    p_cmp = sub.add_parser("compare", help="diff two run manifests")
    p_cmp.add_argument("manifest_a")
    p_cmp.add_argument("manifest_b")
    p_cmp.add_argument("--tol", default=0.0, type=float)
    args = parser.parse_args(argv)
    if args.command == "run":
        code, msg = run(args.config, out_dir=args.out, seed_override=args.seed)
        print(msg)
        return code
    if args.command == "compare":
        try:
            flagged, table = compare(args.manifest_a, args.manifest_b, tol=args.tol)
        except ConfigError as exc:
            print(f"config error: {exc}", file=sys.stderr)
            return 2
        print(table, end="")
        return 1 if flagged else 0
    return 2


if __name__ == "__main__":
    sys.exit(main())
