"""Recursive relaxation: stage-k densities and hierarchical energies.

A :class:`RelaxedDensityHandle` represents ``W_k(x, ., B_k, ..., B_1)`` and
``psi_k`` for a fixed frozen tuple. Stage 0 is the base pair; each call to
:func:`relax_stage` freezes one more matrix. Values come either from the
closed-form trace example (selected by catalog identity) or from nested
cell-formula solves:

* 1D: ``W_k`` stays convex and ``psi_k = psi_0``, so each stage is the
  exact 1D bulk cell formula applied to the stage below.
* 2D, stage 1: the bulk cell solver with the base pair.
* 2D, stage k >= 2: one joint convex program. Elements of the stage-k field
  are grouped into slope classes (interior, each boundary side, corners);
  every class carries its own stage-(k-1) field whose boundary trace is the
  class slope. Minimizing jointly over all fields equals the nested minimum
  restricted to class-wise constant slopes, so the value is an upper bound.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import threading
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, List, Optional, Sequence

import numpy as np
import scipy.sparse as sp

from . import oracle
from .cellsolver import (
    BulkProblem,
    BulkTerm,
    ConstrainedProgram,
    SolverOptions,
    SurfaceProblem,
    SurfaceTerm,
    _GAUSS3,
    _boundary_rows,
    _bulk_seeds,
    _jump_operator,
    bulk_grid,
    field_layout,
    minimize_program,
    solve_bulk,
    solve_surface,
)
from .core import DensityConstants, DensityPair, as_matrix, as_unit
from .sbvmesh import SBVField, eval_energy, field_from_json, field_to_json, mesh_of, total_variation

logger = logging.getLogger(__name__)

__all__ = [
    "HierarchicalDeformation",
    "DensityCache",
    "RelaxedDensityHandle",
    "EnergyAssignment",
    "StabilityReport",
    "base_handle",
    "relax_stage",
    "handle_for",
    "surface_stability_check",
    "assign_energy",
    "ORACLE",
    "NESTED",
]

ORACLE = "closed-form-oracle"
NESTED = "nested-solver"
CACHE_VERSION = "densitycache-v1"
QUANTUM = 1e-9


# --------------------------------------------------------------------------
# hierarchical deformations


@dataclass(frozen=True, eq=False)
class HierarchicalDeformation:
    """A field ``g`` with L cellwise-constant matrix fields ``G_1..G_L``."""

    g: SBVField
    G_levels: tuple
    p: float = 2.0

    def __post_init__(self):
        M = self.g.mesh.n_elements
        shape = (self.g.d, self.g.grid.dim)
        levels = []
        for k, G in enumerate(self.G_levels):
            G = np.array(G, dtype=float)
            if G.shape == shape:
                G = np.broadcast_to(G, (M,) + shape).copy()
            G = G.reshape((M,) + shape)
            if not np.all(np.isfinite(G)):
                raise ValueError(f"G_{k + 1} has non-finite entries")
            G.setflags(write=False)
            levels.append(G)
        if not levels:
            raise ValueError("need at least one level (L >= 1)")
        if not self.p > 1:
            raise ValueError("exponent p must exceed 1")
        object.__setattr__(self, "G_levels", tuple(levels))

    @property
    def L(self) -> int:
        return len(self.G_levels)

    def level(self, ell: int) -> np.ndarray:
        """``G_ell`` per cell, with ``G_0 = grad g``."""
        return self.g.slopes if ell == 0 else self.G_levels[ell - 1]

    def to_json(self) -> dict:
        return {
            "version": "hsd-v1",
            "g": field_to_json(self.g),
            "G_levels": [G.tolist() for G in self.G_levels],
            "p": self.p,
        }

    @classmethod
    def from_json(cls, doc) -> "HierarchicalDeformation":
        if isinstance(doc, str):
            doc = json.loads(doc)
        if doc.get("version") != "hsd-v1":
            raise ValueError(f"unsupported deformation version {doc.get('version')!r}")
        return cls(field_from_json(doc["g"]), tuple(doc["G_levels"]), float(doc.get("p", 2.0)))


# --------------------------------------------------------------------------
# memo cache


class DensityCache:
    """Thread-safe memo of density values keyed by quantized arguments."""

    def __init__(self):
        self._data = {}
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0

    def get(self, key: str):
        with self._lock:
            val = self._data.get(key)
            if val is None:
                self.misses += 1
            else:
                self.hits += 1
            return val

    def put(self, key: str, value: float) -> None:
        with self._lock:
            self._data.setdefault(key, float(value))

    def clear(self) -> None:
        with self._lock:
            self._data.clear()

    def __len__(self) -> int:
        return len(self._data)

    def to_json(self) -> dict:
        with self._lock:
            return {"version": CACHE_VERSION, "entries": dict(sorted(self._data.items()))}

    @classmethod
    def from_json(cls, doc) -> "DensityCache":
        if doc.get("version") != CACHE_VERSION:
            raise ValueError(f"unsupported cache version {doc.get('version')!r}")
        c = cls()
        c._data = {str(k): float(v) for k, v in doc["entries"].items()}
        return c

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1, sort_keys=True))

    @classmethod
    def load(cls, path) -> "DensityCache":
        p = Path(path)
        if not p.exists():
            return cls()
        return cls.from_json(json.loads(p.read_text()))


def _quantize(v) -> np.ndarray:
    return np.round(np.asarray(v, dtype=float) / QUANTUM).astype(np.int64)


def _dequantize(q) -> np.ndarray:
    return np.asarray(q, dtype=float) * QUANTUM


def _pair_tag(pair: DensityPair) -> str:
    if pair.bulk_name is None or pair.surface_name is None:
        return f"custom-{id(pair)}"
    return json.dumps([pair.bulk_name, pair.surface_name, pair.params], sort_keys=True)


# --------------------------------------------------------------------------
# handles


@dataclass(frozen=True, eq=False)
class RelaxedDensityHandle:
    """Stage-k densities with frozen tuple ``(B_k, ..., B_1)``."""

    base: DensityPair
    stage: int = 0
    frozen: tuple = ()
    backend: str = NESTED
    n: int = 8
    options: SolverOptions = field(default_factory=SolverOptions)
    cache: DensityCache = field(default_factory=DensityCache)
    max_depth: int = 4
    parent: Optional["RelaxedDensityHandle"] = None

    def __post_init__(self):
        if len(self.frozen) != self.stage:
            raise ValueError("frozen tuple length must equal the stage")
        if self.backend not in (ORACLE, NESTED):
            raise ValueError(f"unknown backend {self.backend!r}")
        if self.stage > self.max_depth:
            raise RecursionError(f"stage {self.stage} exceeds the recursion depth cap {self.max_depth}")

    @property
    def surface_stable(self) -> bool:
        """``psi_k = psi_0`` for every k (BV-elliptic, or sub-additive in 1D)."""
        b = self.base
        return b.surface_bv_elliptic or (self.frozen_dim == 1 and b.surface_sublinear)

    @property
    def frozen_dim(self) -> Optional[int]:
        if self.frozen:
            return self.frozen[0].shape[1]
        return None

    def _key(self, kind: str, *args) -> str:
        opts = self.options.as_dict()
        opts.pop("threads", None)
        payload = [
            kind,
            self.stage,
            self.backend,
            self.n,
            opts,
            _pair_tag(self.base),
            [_quantize(B).tolist() for B in self.frozen],
            [a.tolist() for a in args],
        ]
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()

    # bulk

    def W(self, x, A) -> float:
        A = as_matrix(A)
        x = np.atleast_1d(np.asarray(x, dtype=float)) if x is not None else np.zeros(A.shape[1])
        if self.stage == 0:
            return self.base.W(x, A)
        qx, qA = _quantize(x), _quantize(A)
        key = self._key("W", qx, qA)
        hit = self.cache.get(key)
        if hit is not None:
            return hit
        val = self._eval_W(_dequantize(qx), _dequantize(qA))
        self.cache.put(key, val)
        return val

    def _eval_W(self, x, A) -> float:
        frozen = [_dequantize(_quantize(B)) for B in self.frozen]
        if self.backend == ORACLE:
            return oracle.exact_Wk(A, frozen, lambda B: self.base.W(x, B))
        N = A.shape[1]
        if N == 1 or self.stage == 1:
            prob = BulkProblem(x, A, frozen[0], self.parent.as_pair(), self.n, self.options)
            return solve_bulk(prob).value
        return _solve_lifted(self, x, A).value

    # surface

    def psi(self, x, lam, nu) -> float:
        lam = np.atleast_1d(np.asarray(lam, dtype=float))
        nu = as_unit(nu)
        x = np.atleast_1d(np.asarray(x, dtype=float)) if x is not None else np.zeros(nu.size)
        if self.stage == 0 or self.backend == ORACLE or self.surface_stable:
            return self.base.psi(x, lam, nu)
        ql, qn, qx = _quantize(lam), _quantize(nu), _quantize(x)
        key = self._key("psi", qx, ql, qn)
        hit = self.cache.get(key)
        if hit is not None:
            return hit
        prob = SurfaceProblem(_dequantize(qx), _dequantize(ql), nu, self.parent.as_pair(), self.n, self.options)
        val = solve_surface(prob).value
        self.cache.put(key, val)
        return val

    def as_pair(self) -> DensityPair:
        """Stage-k densities as a pair usable by the cell solvers."""
        if self.stage == 0:
            return self.base
        b = self.base
        stable = self.surface_stable
        return DensityPair(
            bulk=self.W,
            surface=self.psi,
            exponent_q=1.0,
            constants=DensityConstants(),
            surface_kernel=b.surface_kernel if stable else None,
            # in 1D each stage is a convex function plus psi of an affine map
            convex_bulk=b.convex_bulk and self.frozen_dim == 1,
            surface_sublinear=b.surface_sublinear,
            surface_bv_elliptic=b.surface_bv_elliptic,
            surface_coercive=b.surface_coercive,
            x_dependent=b.x_dependent,
        )


def base_handle(
    base: DensityPair,
    backend: str = "auto",
    n: int = 8,
    options: Optional[SolverOptions] = None,
    cache: Optional[DensityCache] = None,
    max_depth: int = 4,
) -> RelaxedDensityHandle:
    """Stage-0 handle. ``auto`` picks the closed form for the trace example."""
    if backend == "auto":
        backend = ORACLE if base.trace_class else NESTED
    if backend == ORACLE and not base.trace_class:
        raise ValueError("the closed-form backend only covers catalog convex bulk with trace-type surface")
    return RelaxedDensityHandle(
        base=base,
        backend=backend,
        n=n,
        options=options or SolverOptions(),
        cache=cache if cache is not None else DensityCache(),
        max_depth=max_depth,
    )


def relax_stage(handle: RelaxedDensityHandle, B_next) -> RelaxedDensityHandle:
    """Stage k+1 handle with ``B_next`` frozen in front of the tuple."""
    B = as_matrix(B_next)
    if handle.frozen and B.shape != handle.frozen[0].shape:
        raise ValueError("frozen matrices must share one shape")
    return replace(handle, stage=handle.stage + 1, frozen=(B,) + handle.frozen, parent=handle)


def handle_for(base_h: RelaxedDensityHandle, B_tuple: Sequence) -> RelaxedDensityHandle:
    """Relax ``base_h`` through ``B_tuple = (B_k, ..., B_1)`` (B_1 first)."""
    h = base_h
    for B in reversed(list(B_tuple)):
        h = relax_stage(h, B)
    return h


# --------------------------------------------------------------------------
# joint program for 2D stage k >= 2


def _classes(mesh):
    """Slope class per element: 0 interior, 1..4 sides, 5 corners."""
    sides = [set() for _ in range(mesh.n_elements)]
    for e, nrm in zip(mesh.bface_elem, mesh.bface_normal):
        sides[int(e)].add(tuple(np.round(nrm, 6)))
    order = {}
    cls = np.zeros(mesh.n_elements, dtype=int)
    for e, s in enumerate(sides):
        if len(s) == 0:
            cls[e] = 0
        elif len(s) == 1:
            (t,) = s
            cls[e] = order.setdefault(t, len(order) + 1)
        else:
            cls[e] = 5
    return cls


class _Builder:
    def __init__(self):
        self.n_vars = 0
        self.c_trip = ([], [], [])
        self.rhs = []
        self.bulk = []
        self.surface = []

    def alloc(self, size: int) -> int:
        start = self.n_vars
        self.n_vars += size
        return start

    def add_rows(self, mat: sp.spmatrix, col0: int, rhs, extra=None):
        """Append constraint rows ``mat @ x[col0:] (+ extra) = rhs``."""
        coo = mat.tocoo()
        r0 = len(self.rhs)
        self.c_trip[0].extend((coo.row + r0).tolist())
        self.c_trip[1].extend((coo.col + col0).tolist())
        self.c_trip[2].extend(coo.data.tolist())
        if extra is not None:
            rr, cc, vv = extra
            self.c_trip[0].extend([r + r0 for r in rr])
            self.c_trip[1].extend(cc)
            self.c_trip[2].extend(vv)
        self.rhs.extend(np.ravel(rhs).tolist())

    def shifted(self, mat: sp.spmatrix, col0: int):
        coo = mat.tocoo()
        return coo.row, coo.col + col0, coo.data, coo.shape[0]

    def program(self) -> ConstrainedProgram:
        n = self.n_vars

        def build(r, c, v, rows):
            return sp.csr_matrix((v, (r, c)), shape=(rows, n))

        C = sp.csr_matrix((self.c_trip[2], (self.c_trip[0], self.c_trip[1])), shape=(len(self.rhs), n))
        bulk = [BulkTerm(build(*op), w, k, shp) for op, w, k, shp in self.bulk]
        surf = [SurfaceTerm(build(*op), nr, w, k, d) for op, nr, w, k, d in self.surface]
        return ConstrainedProgram(n, C, np.array(self.rhs), bulk, surf)


@dataclass
class _Block:
    stage: int
    grid: object
    layout: field_layout
    col0: int
    B: np.ndarray
    weight: float
    children: list  # (representative element, child block)
    surface_pair: DensityPair


def _add_block(b: _Builder, handle: RelaxedDensityHandle, x, trace, weight: float) -> _Block:
    """Stage-``handle.stage`` competitor whose trace is ``trace`` and mean ``B_k``.

    ``trace`` is ``("const", A)`` or ``("slope", parent_block, element)``.
    """
    opts = handle.options
    B = handle.frozen[0]
    d, N = B.shape
    grid = bulk_grid(N, handle.n, opts.split, opts.layers)
    mesh = mesh_of(grid)
    L = field_layout(mesh.n_elements, d, N)
    col0 = b.alloc(L.size)
    parent = handle.parent

    # boundary trace
    bnd, pts = _boundary_rows(L, mesh)
    if trace[0] == "const":
        b.add_rows(bnd, col0, pts @ trace[1].T)
    else:
        pb, pe = trace[1], trace[2]
        rr, cc, vv = [], [], []
        for k, p in enumerate(pts):
            for i in range(d):
                for j in range(N):
                    rr.append(k * d + i)
                    cc.append(pb.col0 + pb.layout.slope(pe, i, j))
                    vv.append(-p[j])
        b.add_rows(bnd, col0, np.zeros(len(pts) * d), extra=(rr, cc, vv))
    # mean gradient
    rows, cols, vals = [], [], []
    for e in range(mesh.n_elements):
        for i in range(d):
            for j in range(N):
                rows.append(i * N + j)
                cols.append(L.slope(e, i, j))
                vals.append(mesh.areas[e] / grid.volume)
    b.add_rows(sp.coo_matrix((vals, (rows, cols)), shape=(d * N, L.size)), col0, B)

    # interfaces carry psi_{k-1}
    surf_pair = parent.as_pair() if not handle.surface_stable else handle.base
    jop, jn, jw = _jump_operator(L, mesh, _GAUSS3)
    if jop.shape[0]:
        b.surface.append((b.shifted(jop, col0), jn, weight * jw, surf_pair.surface_kernel_at(x), d))

    block = _Block(handle.stage, grid, L, col0, B, weight, [], surf_pair)
    if handle.stage == 1:
        b.bulk.append((b.shifted(L.slope_op(), col0), weight * mesh.areas, handle.base.bulk_kernel_at(x), (L.M, d, N)))
        return block

    cls = _classes(mesh)
    for c in np.unique(cls):
        members = np.flatnonzero(cls == c)
        rep = int(members[0])
        rr, cc, vv = [], [], []
        r = 0
        for e in members[1:]:
            for i in range(d):
                for j in range(N):
                    rr += [r, r]
                    cc += [L.slope(int(e), i, j), L.slope(rep, i, j)]
                    vv += [1.0, -1.0]
                    r += 1
        if r:
            b.add_rows(sp.coo_matrix((vv, (rr, cc)), shape=(r, L.size)), col0, np.zeros(r))
        area = float(mesh.areas[members].sum()) / grid.volume
        child = _add_block(b, parent, x, ("slope", block, rep), weight * area)
        block.children.append((rep, child))
    return block


def _unpack(block: _Block, xv: np.ndarray) -> SBVField:
    return block.layout.unpack(block.grid, xv[block.col0 : block.col0 + block.layout.size])


def _exact_block(block: _Block, xv, base: DensityPair, x) -> float:
    u = _unpack(block, xv)
    if block.stage == 1:
        return block.weight * eval_energy(u, base, x_frozen=x).total
    val = block.weight * eval_energy(u, block.surface_pair, x_frozen=x).surface_value
    return val + sum(_exact_block(ch, xv, base, x) for _, ch in block.children)


def _seed_block(block: _Block, xv: np.ndarray, trace_A: np.ndarray, index: int, opts: SolverOptions):
    seeds = _bulk_seeds(block.grid, trace_A, block.B, index + 1, opts.seed)
    u = seeds[index]
    xv[block.col0 : block.col0 + block.layout.size] = block.layout.pack(u)
    for rep, ch in block.children:
        _seed_block(ch, xv, u.slopes[rep], index, opts)


@dataclass
class _LiftedResult:
    value: float
    outer: SBVField
    iterations: int
    converged: bool


def _solve_lifted(handle: RelaxedDensityHandle, x, A) -> _LiftedResult:
    b = _Builder()
    root = _add_block(b, handle, x, ("const", A), 1.0)
    prog = b.program()
    base = handle.base

    def exact(xv):
        return _exact_block(root, xv, base, x)

    def tv_of(xv):
        return total_variation(_unpack(root, xv))

    opts = handle.options
    seeds = []
    for i in range(opts.restarts):
        xv = np.zeros(prog.n_vars)
        _seed_block(root, xv, A, i, opts)
        seeds.append(xv)
    best = minimize_program(prog, exact, tv_of, seeds, opts)
    return _LiftedResult(best.value, _unpack(root, best.x), best.iterations, best.converged)


# --------------------------------------------------------------------------
# surface stability


@dataclass
class StabilityReport:
    passed: bool
    max_abs_error: float
    max_rel_error: float
    rows: list

    def as_dict(self) -> dict:
        return {
            "passed": self.passed,
            "max_abs_error": self.max_abs_error,
            "max_rel_error": self.max_rel_error,
            "rows": self.rows,
        }


def surface_stability_check(
    handle: RelaxedDensityHandle,
    samples: int = 20,
    n: Optional[int] = None,
    rel_tol: float = 0.02,
    seed: int = 0,
    x=None,
) -> StabilityReport:
    """Check that the surface cell formula with ``psi_k`` returns ``psi_k``.

    Sampled ``(lam, nu)`` plus the anchor ``lam = 0``; ``d = N`` is taken
    from the frozen matrices when present, otherwise ``N = 2``.
    """
    N = handle.frozen_dim or 2
    d = handle.frozen[0].shape[0] if handle.frozen else N
    x = np.zeros(N) if x is None else np.asarray(x, dtype=float)
    rng = np.random.default_rng([seed, 101])
    pair = handle.as_pair()
    rows = []
    worst_abs = worst_rel = 0.0
    for k in range(samples + 1):
        lam = np.zeros(d) if k == 0 else rng.uniform(-2, 2, size=d)
        if N == 1:
            nu = np.array([1.0 if k % 2 == 0 else -1.0])
        else:
            th = rng.uniform(0, 2 * np.pi)
            nu = np.array([math.cos(th), math.sin(th)])
        target = handle.psi(x, lam, nu)
        prob = SurfaceProblem(x, lam, nu, pair, n or handle.n, handle.options)
        got = solve_surface(prob).value
        err = abs(got - target)
        rel = err / target if target > 0 else err
        worst_abs = max(worst_abs, err)
        worst_rel = max(worst_rel, rel)
        rows.append({"lam": lam.tolist(), "nu": nu.tolist(), "psi_k": target, "relaxed": got, "rel_error": rel})
    return StabilityReport(worst_rel <= rel_tol, worst_abs, worst_rel, rows)


# --------------------------------------------------------------------------
# energies


@dataclass
class EnergyAssignment:
    level: int
    bulk_value: float
    surface_value: float
    total: float
    disarrangement_norms: list
    backend: str

    def as_dict(self) -> dict:
        return {
            "level": self.level,
            "bulk": self.bulk_value,
            "surface": self.surface_value,
            "total": self.total,
            "disarrangement_norms": list(self.disarrangement_norms),
            "backend": self.backend,
        }


def assign_energy(
    deformation: HierarchicalDeformation,
    base: DensityPair,
    level: int = 1,
    backend: str = "auto",
    n: int = 8,
    options: Optional[SolverOptions] = None,
    cache: Optional[DensityCache] = None,
    g_tilde: Optional[SBVField] = None,
) -> EnergyAssignment:
    """Energy at ``level`` with per-cell frozen tuple ``(G_level, ..., G_L)``."""
    Lv = deformation.L
    if not 1 <= level <= Lv:
        raise ValueError(f"level must lie in 1..{Lv}")
    g = deformation.g if g_tilde is None else g_tilde
    if g.grid != deformation.g.grid:
        raise ValueError("g_tilde must share the grid of the deformation")
    root = base_handle(base, backend=backend, n=n, options=options, cache=cache)
    m = g.mesh
    bulk = 0.0
    for e in range(m.n_elements):
        tup = [deformation.level(j)[e] for j in range(level, Lv + 1)]
        h = handle_for(root, tup)
        try:
            w = h.W(m.centers[e], g.slopes[e])
        except Exception as exc:
            raise RuntimeError(f"density evaluation failed on cell {e}: {exc}") from exc
        bulk += m.areas[e] * w
    # surface density of the same stage; for stable densities psi_k = psi_0
    if root.backend == ORACLE or root.base.surface_bv_elliptic or (g.grid.dim == 1 and base.surface_sublinear):
        surface = eval_energy(g, base).surface_value
    else:
        probe = handle_for(root, [deformation.level(j)[0] for j in range(level, Lv + 1)])
        spair = replace(probe.as_pair(), bulk=_zero_bulk, surface_kernel=None)
        surface = eval_energy(g, spair).surface_value
    norms = []
    for ell in range(1, Lv + 1):
        diff = deformation.level(ell - 1) - deformation.level(ell)
        norms.append(float(np.sum(m.areas * np.linalg.norm(diff.reshape(m.n_elements, -1), axis=1))))
    return EnergyAssignment(level, float(bulk), float(surface), float(bulk + surface), norms, root.backend)


def _zero_bulk(x, A) -> float:
    return 0.0
