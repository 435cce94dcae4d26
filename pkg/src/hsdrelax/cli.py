"""Command-line front end.

Every run reads one JSON config document, writes ``<command>.json``,
``<command>.csv`` and ``<command>_series.csv`` into the output directory,
and embeds the tool version and a hash of the effective config in each
file. Floats are printed with 17 significant digits, so reruns with the
same config and seed are byte-identical.

Exit codes: 0 success (results may carry "unconverged" flags), 2 invalid
config, 3 runtime failure. Errors are reported as a JSON document on stdout.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path
from typing import Callable, Dict, List, Optional

import numpy as np

from . import __version__
from . import approx, hierarchy, oracle
from .cellsolver import BulkProblem, SolverOptions, SurfaceProblem, solve_bulk, solve_surface
from .core import DensityPair, SamplingPlan, check_density_class, make_pair
from .sbvmesh import Grid, SBVField, affine_field

TOOL = "hsdrelax"
COMMANDS = ("relax-bulk", "relax-surface", "recurse", "energy", "approximate", "check-class", "verify-example")
CONFIG_ERROR = 2
RUNTIME_ERROR = 3


class ConfigError(ValueError):
    pass


# --------------------------------------------------------------------------
# deterministic output


def fmt(x) -> str:
    """17 significant digits; NaN and infinities as JSON-safe tokens."""
    x = float(x)
    if math.isnan(x):
        return "NaN"
    if math.isinf(x):
        return "Infinity" if x > 0 else "-Infinity"
    return format(x, ".17g")


def _plain(obj):
    if isinstance(obj, np.ndarray):
        return [_plain(v) for v in obj.tolist()]
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def dump_json(obj, indent: int = 0) -> str:
    obj = _plain(obj)
    pad = "  " * (indent + 1)
    end = "  " * indent
    if isinstance(obj, bool) or obj is None:
        return json.dumps(obj)
    if isinstance(obj, int):
        return str(obj)
    if isinstance(obj, float):
        s = fmt(obj)
        return "null" if s in ("NaN", "Infinity", "-Infinity") else s
    if isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{pad}{json.dumps(k)}: {dump_json(v, indent + 1)}" for k, v in obj.items()]
        return "{\n" + ",\n".join(items) + "\n" + end + "}"
    if isinstance(obj, list):
        if not obj:
            return "[]"
        if all(not isinstance(v, (dict, list)) for v in obj):
            return "[" + ", ".join(dump_json(v) for v in obj) + "]"
        return "[\n" + ",\n".join(pad + dump_json(v, indent + 1) for v in obj) + "\n" + end + "]"
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def _cell(v) -> str:
    v = _plain(v)
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return fmt(v)
    if isinstance(v, list):
        flat = np.asarray(v, dtype=float).ravel()
        return " ".join(fmt(a) for a in flat)
    if v is None:
        return ""
    return str(v)


def dump_csv(header: List[str], rows: List[list], meta: dict) -> str:
    buf = io.StringIO()
    buf.write(f"# {meta['tool']} {meta['version']} command={meta['command']} config_hash={meta['config_hash']}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_cell(v) for v in r])
    return buf.getvalue()


def config_hash(config: dict) -> str:
    canon = json.dumps(_plain(config), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()


# --------------------------------------------------------------------------
# config helpers

_DENSITY_KEYS = {"bulk", "surface", "p", "bulk_scale", "surface_scale"}
# probes outside the admissible class, accepted only by check-class
_PROBE_SURFACES = {"norm-squared": lambda x, lam, nu: float(np.sum(np.asarray(lam, dtype=float) ** 2))}


def _check_keys(doc: dict, allowed: set, where: str) -> None:
    if not isinstance(doc, dict):
        raise ConfigError(f"{where} must be a JSON object")
    extra = sorted(set(doc) - allowed)
    if extra:
        raise ConfigError(f"unknown keys in {where}: {', '.join(extra)}")


def _density(doc: Optional[dict], allow_probe: bool = False) -> DensityPair:
    doc = doc or {}
    _check_keys(doc, _DENSITY_KEYS, "density")
    surface = doc.get("surface", "trace-interfacial")
    probe = None
    if allow_probe and surface in _PROBE_SURFACES:
        probe, surface = surface, "norm-interfacial"
    try:
        pair = make_pair(
            bulk=doc.get("bulk", "quadratic"),
            surface=surface,
            p=float(doc.get("p", 2.0)),
            bulk_scale=float(doc.get("bulk_scale", 1.0)),
            surface_scale=float(doc.get("surface_scale", 1.0)),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"density: {exc}") from exc
    if probe is not None:
        pair = replace(
            pair,
            surface=_PROBE_SURFACES[probe],
            surface_kernel=None,
            surface_name=probe,
            surface_sublinear=False,
            surface_bv_elliptic=False,
        )
    return pair


def _options(doc: Optional[dict], seed: int, threads: int) -> SolverOptions:
    doc = dict(doc or {})
    doc["seed"] = seed
    doc["threads"] = threads
    try:
        return SolverOptions.from_dict(doc)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"solver: {exc}") from exc


def _matrix(v, d: int, N: int, what: str) -> np.ndarray:
    try:
        a = np.asarray(v, dtype=float).reshape(d, N)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{what} must be a {d}x{N} matrix") from exc
    if not np.all(np.isfinite(a)):
        raise ConfigError(f"{what} has non-finite entries")
    return a


def _int(doc, key, default, lo=1) -> int:
    v = doc.get(key, default)
    if isinstance(v, bool) or not isinstance(v, (int, float)) or int(v) != v or v < lo:
        raise ConfigError(f"{key} must be an integer >= {lo}")
    return int(v)


def _num(doc, key, default) -> float:
    v = doc.get(key, default)
    if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
        raise ConfigError(f"{key} must be a finite number")
    return float(v)


def _dims(doc) -> tuple:
    N = _int(doc, "N", 2)
    if N not in (1, 2):
        raise ConfigError("N must be 1 or 2")
    d = _int(doc, "d", N)
    return d, N


def _pmap(fn: Callable, items: list, threads: int) -> list:
    if threads > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            return list(ex.map(fn, items))
    return [fn(it) for it in items]


def _rel(a: float, b: float) -> float:
    return abs(a - b) / abs(b) if b != 0 else abs(a - b)


def _load_deformation(source, base_dir: Path):
    if isinstance(source, str):
        path = Path(source)
        if not path.is_absolute():
            path = base_dir / path
        try:
            source = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read deformation {path}: {exc}") from exc
    try:
        return hierarchy.HierarchicalDeformation.from_json(source)
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"deformation: {exc}") from exc


class Context:
    def __init__(self, command, config, seed, threads, tolerance, cache_path, out_dir, base_dir):
        self.command = command
        self.config = config
        self.seed = seed
        self.threads = threads
        self.tolerance = tolerance
        self.cache_path = cache_path
        self.out_dir = out_dir
        self.base_dir = base_dir
        self.cache = hierarchy.DensityCache()
        if cache_path is not None and Path(cache_path).exists():
            try:
                self.cache = hierarchy.DensityCache.load(cache_path)
            except (OSError, ValueError, KeyError) as exc:
                raise ConfigError(f"cannot load cache {cache_path}: {exc}") from exc

    def rng(self, stream: int = 0) -> np.random.Generator:
        return np.random.default_rng([self.seed, stream])

    def tol(self, default: float) -> float:
        return default if self.tolerance is None else self.tolerance


# --------------------------------------------------------------------------
# commands; each returns (payload, (header, rows), (series_header, series_rows))


def _bulk_reference(pair: DensityPair, A, B) -> Optional[float]:
    if not pair.trace_class or A.shape[0] != A.shape[1]:
        return None
    return oracle.exact_Wk(A, [B], lambda M: pair.W(None, M))


def cmd_relax_bulk(ctx: Context):
    c = ctx.config
    _check_keys(c, {"density", "solver", "N", "d", "n", "resolutions", "pairs", "samples", "range", "x", "seed"}, "config")
    pair = _density(c.get("density"))
    opts = _options(c.get("solver"), ctx.seed, ctx.threads)
    d, N = _dims(c)
    res = c.get("resolutions") or [_int(c, "n", 8)]
    if not isinstance(res, list) or not all(isinstance(k, int) and k >= 1 for k in res):
        raise ConfigError("resolutions must be a list of positive integers")
    x = np.zeros(N) if c.get("x") is None else np.asarray(c["x"], dtype=float).reshape(N)
    if "pairs" in c:
        cases = [(_matrix(p["A"], d, N, "A"), _matrix(p["B"], d, N, "B")) for p in c["pairs"]]
    else:
        r = _num(c, "range", 2.0)
        rng = ctx.rng(1)
        cases = [(rng.uniform(-r, r, (d, N)), rng.uniform(-r, r, (d, N))) for _ in range(_int(c, "samples", 3))]
    tol = ctx.tol(0.10)

    def work(case):
        A, B = case
        out = []
        for n in sorted(res):
            sr = solve_bulk(BulkProblem(x, A, B, pair, n, opts))
            out.append((n, sr))
        return out

    results = _pmap(work, cases, ctx.threads)
    rows, series, docs = [], [], []
    for i, ((A, B), per_n) in enumerate(zip(cases, results)):
        ref = _bulk_reference(pair, A, B)
        for n, sr in per_n:
            rel = None if ref is None else _rel(sr.value, ref)
            rows.append([i, n, A, B, sr.value, ref, rel, sr.mode, sr.residuals[0], sr.residuals[1], ";".join(sr.flags)])
            series.append([i, n, sr.value, ref])
            docs.append({"sample": i, "n": n, "A": A, "B": B, "reference": ref, "rel_error": rel, "result": sr.as_dict()})
    vals = [r[6] for r in rows if r[1] == max(res) and r[6] is not None]
    payload = {"results": docs, "tolerance": tol, "passed": all(v <= tol for v in vals) if vals else None}
    head = ["sample", "n", "A", "B", "value", "reference", "rel_error", "mode", "trace_residual", "mean_residual", "flags"]
    return payload, (head, rows), (["sample", "n", "value", "reference"], series)


def cmd_relax_surface(ctx: Context):
    c = ctx.config
    _check_keys(c, {"density", "solver", "N", "n", "resolutions", "cases", "samples", "range", "x", "seed"}, "config")
    pair = _density(c.get("density"))
    opts = _options(c.get("solver"), ctx.seed, ctx.threads)
    d, N = _dims(c)
    res = c.get("resolutions") or [_int(c, "n", 8)]
    x = np.zeros(N) if c.get("x") is None else np.asarray(c["x"], dtype=float).reshape(N)
    if "cases" in c:
        cases = [(np.asarray(k["lam"], dtype=float).reshape(d), np.asarray(k["nu"], dtype=float).reshape(N)) for k in c["cases"]]
    else:
        r = _num(c, "range", 2.0)
        rng = ctx.rng(2)
        cases = []
        for _ in range(_int(c, "samples", 5)):
            lam = rng.uniform(-r, r, d)
            th = rng.uniform(0, 2 * np.pi)
            nu = np.array([1.0 if th < np.pi else -1.0]) if N == 1 else np.array([np.cos(th), np.sin(th)])
            cases.append((lam, nu))
    tol = ctx.tol(0.02)

    def work(case):
        lam, nu = case
        return [(n, solve_surface(SurfaceProblem(x, lam, nu, pair, n, opts))) for n in sorted(res)]

    results = _pmap(work, cases, ctx.threads)
    rows, series, docs = [], [], []
    for i, ((lam, nu), per_n) in enumerate(zip(cases, results)):
        ref = pair.psi(x, lam, nu)
        for n, sr in per_n:
            rel = _rel(sr.value, ref)
            rows.append([i, n, lam, nu, sr.value, ref, rel, ";".join(sr.flags)])
            series.append([i, n, sr.value, ref])
            docs.append({"sample": i, "n": n, "lam": lam, "nu": nu, "psi": ref, "rel_error": rel, "result": sr.as_dict()})
    top = [r[6] for r in rows if r[1] == max(res)]
    payload = {"results": docs, "tolerance": tol, "passed": all(v <= tol for v in top)}
    head = ["sample", "n", "lam", "nu", "value", "psi", "rel_error", "flags"]
    return payload, (head, rows), (["sample", "n", "value", "psi"], series)


def _W0_of(pair: DensityPair):
    return lambda M: pair.W(None, M)


def cmd_recurse(ctx: Context):
    c = ctx.config
    _check_keys(c, {"density", "solver", "N", "stage", "backend", "n", "points", "samples", "range", "x", "seed"}, "config")
    pair = _density(c.get("density"))
    opts = _options(c.get("solver"), ctx.seed, ctx.threads)
    d, N = _dims(c)
    k = _int(c, "stage", 2)
    backend = c.get("backend", "auto")
    if backend not in ("auto", hierarchy.ORACLE, hierarchy.NESTED):
        raise ConfigError(f"unknown backend {backend!r}")
    x = np.zeros(N) if c.get("x") is None else np.asarray(c["x"], dtype=float).reshape(N)
    if "points" in c:
        pts = []
        for p in c["points"]:
            Bs = p["B"]
            if len(Bs) != k:
                raise ConfigError(f"each point needs {k} frozen matrices")
            pts.append((_matrix(p["A"], d, N, "A"), [_matrix(B, d, N, "B") for B in Bs]))
    else:
        r = _num(c, "range", 3.0 if N == 1 else 2.0)
        rng = ctx.rng(3)
        pts = [(rng.uniform(-r, r, (d, N)), [rng.uniform(-r, r, (d, N)) for _ in range(k)]) for _ in range(_int(c, "samples", 5))]
    try:
        root = hierarchy.base_handle(pair, backend=backend, n=_int(c, "n", 8), options=opts, cache=ctx.cache)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    tol = ctx.tol(1e-6 if N == 1 else 0.10)

    def work(pt):
        A, Bs = pt
        return hierarchy.handle_for(root, Bs).W(x, A)

    values = _pmap(work, pts, ctx.threads)
    rows, series, docs = [], [], []
    for i, ((A, Bs), v) in enumerate(zip(pts, values)):
        ref = oracle.exact_Wk(A, Bs, _W0_of(pair)) if pair.trace_class else None
        err = None if ref is None else abs(v - ref)
        rel = None if ref is None else _rel(v, ref)
        rows.append([i, A, Bs, v, ref, err, rel])
        series.append([i, err if err is not None else v])
        docs.append({"sample": i, "A": A, "B": Bs, "value": v, "oracle": ref, "abs_error": err, "rel_error": rel})
    rels = [r[6] for r in rows if r[6] is not None]
    payload = {"stage": k, "backend": root.backend, "results": docs, "tolerance": tol,
               "passed": all(v <= tol for v in rels) if rels else None}
    head = ["sample", "A", "B", "value", "oracle", "abs_error", "rel_error"]
    return payload, (head, rows), (["sample", "residual"], series)


def cmd_energy(ctx: Context):
    c = ctx.config
    _check_keys(c, {"density", "solver", "deformation", "level", "backend", "n", "seed"}, "config")
    if "deformation" not in c:
        raise ConfigError("energy needs a deformation (file path or hsd-v1 document)")
    pair = _density(c.get("density"))
    opts = _options(c.get("solver"), ctx.seed, ctx.threads)
    dfm = _load_deformation(c["deformation"], ctx.base_dir)
    level = _int(c, "level", 1)
    backend = c.get("backend", "auto")
    try:
        ea = hierarchy.assign_energy(dfm, pair, level=level, backend=backend, n=_int(c, "n", 8), options=opts, cache=ctx.cache)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    ref = None
    if pair.trace_class and level == 1 and dfm.g.d == dfm.g.grid.dim:
        ref = oracle.exact_E1(dfm, _W0_of(pair))
    doc = ea.as_dict()
    doc["oracle"] = ref
    doc["abs_error"] = None if ref is None else abs(ea.total - ref)
    tol = ctx.tol(1e-10)
    doc["tolerance"] = tol
    doc["passed"] = None if ref is None else doc["abs_error"] <= tol
    row = [level, ea.bulk_value, ea.surface_value, ea.total, ref, doc["abs_error"], ea.backend]
    head = ["level", "bulk", "surface", "total", "oracle", "abs_error", "backend"]
    series = [[k + 1, v] for k, v in enumerate(ea.disarrangement_norms)]
    return doc, (head, [row]), (["level", "disarrangement_l1"], series)


def cmd_approximate(ctx: Context):
    c = ctx.config
    _check_keys(c, {"deformation", "indices", "mode", "sampling", "directions", "seed"}, "config")
    if "deformation" not in c:
        raise ConfigError("approximate needs a deformation (file path or hsd-v1 document)")
    dfm = _load_deformation(c["deformation"], ctx.base_dir)
    idx = c.get("indices") or [[4, 8, 16, 32]] * dfm.L
    if not isinstance(idx, list) or len(idx) != dfm.L:
        raise ConfigError(f"indices must list one index set per level ({dfm.L})")
    tol = ctx.tol(0.05)
    try:
        fam = approx.build_family(
            dfm, idx, mode=c.get("mode", "auto"), directions=c.get("directions"),
            sampling=c.get("sampling", "corner"), threads=ctx.threads,
        )
    except approx.UnsupportedConstruction as exc:
        raise ConfigError(str(exc)) from exc
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    battery = approx.default_battery(dfm.g.grid.dim, seed=ctx.seed, box=dfm.g.grid.box)
    rep = approx.verify_convergence(fam, dfm, battery, tolerance=tol)
    tv = approx.verify_tv_bound(fam, dfm) if dfm.L == 1 else None
    payload = {
        "convergence": rep.as_dict(),
        "tv_bound": None if tv is None else tv.as_dict(),
        "family": approx.family_to_json(fam),
        "passed": rep.passed and (tv is None or tv.bounded),
    }
    table = rep.csv_rows()
    series = [[list(r["index"]), r["l1_distance"], r["moment_max"][-1]] for r in rep.rows]
    return payload, (table[0], table[1:]), (["index", "l1_distance", "moment_residual"], series)


def cmd_check_class(ctx: Context):
    c = ctx.config
    _check_keys(c, {"density", "sampling", "seed"}, "config")
    pair = _density(c.get("density"), allow_probe=True)
    sdoc = dict(c.get("sampling") or {})
    sdoc["seed"] = ctx.seed
    if ctx.tolerance is not None:
        sdoc["tol"] = ctx.tolerance
    try:
        plan = SamplingPlan(**{k: tuple(v) if isinstance(v, list) else v for k, v in sdoc.items()})
    except TypeError as exc:
        raise ConfigError(f"sampling: {exc}") from exc
    rep = check_density_class(pair, plan)
    payload = {"density": {"bulk": pair.bulk_name, "surface": pair.surface_name}, "passed": rep.passed,
               "failures": rep.failures(), "verdicts": rep.as_dict()}
    rows = [[k, v.passed, v.required, v.measured, v.note] for k, v in rep.verdicts.items()]
    series = [[k, v.measured] for k, v in rep.verdicts.items()]
    return payload, (["property", "passed", "required", "measured", "note"], rows), (["property", "measured"], series)


_VERIFY_DEFAULTS = {
    "bulk": {"samples": 2, "n": 16},
    "surface": {"samples": 5, "n": 8},
    "stage2": {"samples_1d": 5, "samples_2d": 1, "n": 8, "restarts": 2},
    "energy": True,
}


def cmd_verify_example(ctx: Context):
    c = ctx.config
    _check_keys(c, {"density", "bulk", "surface", "stage2", "energy", "seed"}, "config")
    pair = _density(c.get("density"))
    if not pair.trace_class:
        raise ConfigError("verify-example needs a convex catalog bulk with the trace-type surface density")
    cfg = {k: (dict(v, **(c.get(k) or {})) if isinstance(v, dict) else c.get(k, v)) for k, v in _VERIFY_DEFAULTS.items()}
    opts = SolverOptions(seed=ctx.seed, threads=ctx.threads)
    W0 = _W0_of(pair)
    summary = []

    def add(check, case, analytic, numeric, tol, absolute=False):
        err = abs(numeric - analytic) if absolute else _rel(numeric, analytic)
        summary.append([check, case, analytic, numeric, err, tol, err <= tol])

    rng = ctx.rng(10)
    for i in range(int(cfg["bulk"]["samples"])):
        A, B = rng.uniform(-2, 2, (2, 2)), rng.uniform(-2, 2, (2, 2))
        v = solve_bulk(BulkProblem(np.zeros(2), A, B, pair, int(cfg["bulk"]["n"]), opts)).value
        add("bulk-2d", i, oracle.exact_Wk(A, [B], W0), v, ctx.tol(0.10))
    rng = ctx.rng(11)
    for i in range(int(cfg["surface"]["samples"])):
        lam = rng.uniform(-2, 2, 2)
        th = rng.uniform(0, 2 * np.pi)
        nu = np.array([np.cos(th), np.sin(th)])
        v = solve_surface(SurfaceProblem(np.zeros(2), lam, nu, pair, int(cfg["surface"]["n"]), opts)).value
        add("surface-2d", i, oracle.exact_psik(lam, nu), v, ctx.tol(0.02))
    s2 = cfg["stage2"]
    rng = ctx.rng(12)
    root1 = hierarchy.base_handle(pair, backend=hierarchy.NESTED, n=int(s2["n"]), options=opts, cache=ctx.cache)
    for i in range(int(s2["samples_1d"])):
        a, b2, b1 = rng.uniform(-3, 3, 3)
        v = hierarchy.handle_for(root1, [[[b2]], [[b1]]]).W(np.zeros(1), [[a]])
        add("stage2-1d", i, oracle.exact_Wk([[a]], [[[b2]], [[b1]]], W0), v, ctx.tol(1e-6))
    root2 = hierarchy.base_handle(pair, backend=hierarchy.NESTED, n=int(s2["n"]),
                                  options=replace(opts, restarts=int(s2["restarts"])), cache=ctx.cache)
    for i in range(int(s2["samples_2d"])):
        A, B2, B1 = [rng.uniform(-2, 2, (2, 2)) for _ in range(3)]
        v = hierarchy.handle_for(root2, [B2, B1]).W(np.zeros(2), A)
        add("stage2-2d", i, oracle.exact_Wk(A, [B2, B1], W0), v, ctx.tol(0.10))
    if cfg["energy"]:
        grid = Grid(1, 2, box=((0.0, 1.0),))
        g = affine_field(grid, [[1.0]])
        dfm = hierarchy.HierarchicalDeformation(g, (np.full((1, 1), 0.5), np.zeros((1, 1))))
        e = hierarchy.assign_energy(dfm, pair, backend=hierarchy.ORACLE, cache=ctx.cache).total
        add("energy", "smooth", oracle.exact_E1(dfm, W0), e, ctx.tol(1e-10), absolute=True)
        # same slopes, right half lifted by 2: a single jump [g] = 2 at x = 1/2
        jumped_g = SBVField(grid, g.offsets + np.array([[0.0], [2.0]]), g.slopes)
        jumped = hierarchy.HierarchicalDeformation(jumped_g, dfm.G_levels)
        e = hierarchy.assign_energy(jumped, pair, backend=hierarchy.ORACLE, cache=ctx.cache).total
        add("energy", "jump", oracle.exact_E1(jumped, W0), e, ctx.tol(1e-10), absolute=True)
    head = ["check", "case", "analytic", "numeric", "error", "tolerance", "passed"]
    docs = [dict(zip(head, r)) for r in summary]
    payload = {"summary": docs, "passed": all(r[-1] for r in summary)}
    series = [[r[0], r[1], r[4]] for r in summary]
    return payload, (head, summary), (["check", "case", "error"], series)


HANDLERS: Dict[str, Callable] = {
    "relax-bulk": cmd_relax_bulk,
    "relax-surface": cmd_relax_surface,
    "recurse": cmd_recurse,
    "energy": cmd_energy,
    "approximate": cmd_approximate,
    "check-class": cmd_check_class,
    "verify-example": cmd_verify_example,
}


# --------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog=TOOL, description="Relaxation of hierarchical structured deformations.")
    ap.add_argument("--version", action="version", version=f"{TOOL} {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=str, default=None, help="JSON config document")
        p.add_argument("--seed", type=int, default=None, help="RNG seed (unsigned 64-bit)")
        p.add_argument("--cache", type=str, default=None, help="density cache file")
        p.add_argument("--out", type=str, default=None, help="output directory")
        p.add_argument("--threads", type=int, default=1)
        p.add_argument("--tolerance", type=float, default=None)
    return ap


def _error(kind: str, message: str, out_dir: Optional[Path]) -> None:
    doc = dump_json({"tool": TOOL, "version": __version__, "error": {"kind": kind, "message": message}}) + "\n"
    sys.stdout.write(doc)
    if out_dir is not None:
        try:
            out_dir.mkdir(parents=True, exist_ok=True)
            (out_dir / "error.json").write_text(doc)
        except OSError:
            pass


def run(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else CONFIG_ERROR
    out_dir = Path(args.out or os.environ.get("HSDRELAX_OUT") or ".")
    cache_path = args.cache or os.environ.get("HSDRELAX_CACHE")
    try:
        config, base_dir = {}, Path(".")
        if args.config:
            path = Path(args.config)
            try:
                config = json.loads(path.read_text())
            except (OSError, json.JSONDecodeError) as exc:
                raise ConfigError(f"cannot read config {path}: {exc}") from exc
            base_dir = path.parent
        if not isinstance(config, dict):
            raise ConfigError("config must be a JSON object")
        seed = args.seed if args.seed is not None else config.get("seed", 0)
        if isinstance(seed, bool) or not isinstance(seed, int) or not 0 <= seed < 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        if args.threads < 1:
            raise ConfigError("threads must be positive")
        if args.tolerance is not None and not (args.tolerance > 0 and math.isfinite(args.tolerance)):
            raise ConfigError("tolerance must be a positive number")
        ctx = Context(args.command, config, seed, args.threads, args.tolerance, cache_path, out_dir, base_dir)
        payload, (head, rows), (shead, srows) = HANDLERS[args.command](ctx)
    except ConfigError as exc:
        _error("config", str(exc), out_dir if args.out else None)
        return CONFIG_ERROR
    except Exception as exc:  # noqa: BLE001 - reported as a runtime failure
        _error("runtime", f"{type(exc).__name__}: {exc}", out_dir if args.out else None)
        return RUNTIME_ERROR
    effective = {"command": args.command, "config": config, "seed": seed, "tolerance": args.tolerance}
    meta = {"tool": TOOL, "version": __version__, "command": args.command, "config_hash": config_hash(effective)}
    doc = {"meta": dict(meta, seed=seed, tolerance=args.tolerance, config=config), **payload}
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        stem = args.command
        files = {
            f"{stem}.json": dump_json(doc) + "\n",
            f"{stem}.csv": dump_csv(head, rows, meta),
            f"{stem}_series.csv": dump_csv(shead, srows, meta),
        }
        for name, text in files.items():
            (out_dir / name).write_text(text)
        if cache_path:
            ctx.cache.save(cache_path)
    except OSError as exc:
        _error("runtime", f"cannot write results: {exc}", None)
        return RUNTIME_ERROR
    sys.stdout.write(dump_json({"status": "ok", "command": args.command, "passed": payload.get("passed"),
                                "files": sorted(files), "config_hash": meta["config_hash"]}) + "\n")
    return 0


def main(argv: Optional[List[str]] = None) -> None:
    sys.exit(run(argv))


if __name__ == "__main__":
    main()
