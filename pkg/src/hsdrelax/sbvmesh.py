"""Broken piecewise-affine fields on 1D intervals and 2D square grids.

A field stores one affine piece per element, ``u(y) = c_e + S_e (y - y_e)``
with ``y_e`` the element centroid. Jumps live on the faces between
elements and are implied by the two adjacent traces, so the jump along a
face is an affine function of the arc parameter.

2D grids come in two flavours: plain squares (``split="none"``) and squares
cut along both diagonals into four triangles (``split="crossed"``). The
crossed split adds faces with normals at 45 degrees, which lets slip-type
laminates along diagonals be represented exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Optional

import numpy as np

from .core import DensityPair, DensityError, as_unit

__all__ = [
    "Grid",
    "Mesh",
    "SBVField",
    "EnergyBreakdown",
    "mesh_of",
    "eval_energy",
    "total_variation",
    "affine_field",
    "step_field",
    "constant_field",
    "refine_field",
    "locate",
    "abs_linear_integral",
    "norm_linear_integral",
    "field_to_json",
    "field_from_json",
    "SBVFIELD_VERSION",
]

SBVFIELD_VERSION = "sbvfield-v1"

_GAUSS2 = (np.array([0.5 - 0.5 / np.sqrt(3.0), 0.5 + 0.5 / np.sqrt(3.0)]), np.array([0.5, 0.5]))


def _default_box(dim):
    return tuple((-0.5, 0.5) for _ in range(dim))


@dataclass(frozen=True)
class Grid:
    """Uniform grid of ``n`` cells per side on ``box``, mapped by ``rotation``.

    Physical coordinates are ``y = rotation @ z`` for reference points ``z``
    in ``box``. A rotation whose first column is ``nu`` turns the grid into a
    unit cube with two faces orthogonal to ``nu``.
    """

    dim: int
    n: int
    box: Optional[tuple] = None
    rotation: Optional[tuple] = None
    split: str = "none"
    # extra breaks at distance h/2, h/4, ... from each face of the box
    layers: int = 0

    def __post_init__(self):
        if self.dim not in (1, 2):
            raise ValueError("only N = 1 and N = 2 grids are supported")
        if int(self.n) != self.n or self.n < 1:
            raise ValueError("cells per side must be a positive integer")
        box = self.box if self.box is not None else _default_box(self.dim)
        box = tuple((float(a), float(b)) for a, b in box)
        if len(box) != self.dim or any(b <= a for a, b in box):
            raise ValueError(f"invalid box {box}")
        object.__setattr__(self, "box", box)
        R = np.eye(self.dim) if self.rotation is None else np.asarray(self.rotation, dtype=float)
        if R.shape != (self.dim, self.dim) or not np.allclose(R.T @ R, np.eye(self.dim), atol=1e-12, rtol=0):
            raise ValueError("rotation must be an orthonormal N x N matrix")
        object.__setattr__(self, "rotation", tuple(tuple(float(v) for v in row) for row in R))
        if self.split not in ("none", "crossed"):
            raise ValueError(f"unknown split {self.split!r}")
        if self.split == "crossed" and self.dim != 2:
            raise ValueError("the crossed split needs N = 2")
        if int(self.layers) != self.layers or self.layers < 0:
            raise ValueError("layers must be a nonnegative integer")
        if self.layers and self.n < 2:
            raise ValueError("boundary layers need n >= 2")

    @property
    def R(self) -> np.ndarray:
        return np.array(self.rotation)

    @property
    def volume(self) -> float:
        return float(np.prod([b - a for a, b in self.box]))

    @property
    def cells_per_side(self) -> int:
        return self.n + 2 * self.layers

    @property
    def n_elements(self) -> int:
        k = self.cells_per_side**self.dim
        if self.split == "crossed":
            k += 3 * int(_crossed_cells(self).sum())
        return k

    def breaks(self, axis: int) -> np.ndarray:
        a, b = self.box[axis]
        uniform = np.linspace(a, b, self.n + 1)
        if not self.layers:
            return uniform
        h = (b - a) / self.n
        extra = [a + h / 2**j for j in range(1, self.layers + 1)]
        extra += [b - h / 2**j for j in range(1, self.layers + 1)]
        return np.sort(np.concatenate([uniform, extra]))

    def as_dict(self) -> dict:
        return {
            "dim": self.dim,
            "n": self.n,
            "box": [list(b) for b in self.box],
            "rotation": [list(r) for r in self.rotation],
            "split": self.split,
            "layers": self.layers,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "Grid":
        return cls(
            dim=int(doc["dim"]),
            n=int(doc["n"]),
            box=tuple(tuple(b) for b in doc.get("box") or _default_box(int(doc["dim"]))),
            rotation=tuple(tuple(r) for r in doc["rotation"]) if doc.get("rotation") else None,
            split=doc.get("split", "none"),
            layers=int(doc.get("layers", 0)),
        )


@dataclass(frozen=True)
class Mesh:
    """Element and face geometry of a grid, in physical coordinates."""

    grid: Grid
    centers: np.ndarray  # (M, N)
    areas: np.ndarray  # (M,)
    vertices: tuple  # per element, (k, N) arrays
    quad_points: np.ndarray  # (M, nq, N)
    quad_weights: np.ndarray  # (M, nq), rows sum to the element area
    face_minus: np.ndarray  # (F,)
    face_plus: np.ndarray
    face_p0: np.ndarray  # (F, N)
    face_p1: np.ndarray
    face_normal: np.ndarray  # (F, N), from minus to plus
    face_length: np.ndarray  # (F,), 1 for 0-dimensional faces
    bface_elem: np.ndarray  # boundary faces
    bface_p0: np.ndarray
    bface_p1: np.ndarray
    bface_normal: np.ndarray  # outward
    bface_length: np.ndarray
    boundary_elements: np.ndarray = field(default=None)

    @property
    def n_elements(self) -> int:
        return len(self.areas)

    @property
    def n_faces(self) -> int:
        return len(self.face_length)


def _tri_quad(v):
    # degree-2 rule: edge midpoints
    a, b, c = v
    pts = np.array([(a + b) / 2, (b + c) / 2, (c + a) / 2])
    area = 0.5 * abs((b - a)[0] * (c - a)[1] - (b - a)[1] * (c - a)[0])
    return pts, np.full(3, area / 3), area


def _square_quad(lo, hi):
    g, w = _GAUSS2
    xs = lo[0] + (hi[0] - lo[0]) * g
    ys = lo[1] + (hi[1] - lo[1]) * g
    pts = np.array([[x, y] for x in xs for y in ys])
    area = (hi[0] - lo[0]) * (hi[1] - lo[1])
    return pts, np.full(4, area / 4), area


@lru_cache(maxsize=64)
def mesh_of(grid: Grid) -> Mesh:
    R = grid.R
    if grid.dim == 1:
        return _mesh_1d(grid, R)
    return _mesh_2d(grid, R)


def _finish(grid, R, verts, quads, faces, bfaces):
    centers_ref = np.array([v.mean(axis=0) for v in verts])
    # mixed meshes pad shorter rules with zero-weight points at the centroid
    nq = max(len(q[1]) for q in quads)
    quad_pts = np.array(
        [np.vstack([q[0], np.tile(c, (nq - len(q[1]), 1))]) for q, c in zip(quads, centers_ref)]
    )
    quad_w = np.array([np.concatenate([q[1], np.zeros(nq - len(q[1]))]) for q in quads])
    areas = np.array([q[2] for q in quads])

    def rot(a):
        a = np.asarray(a, dtype=float)
        return a @ R.T

    fm = np.array([f[0] for f in faces], dtype=int)
    fp = np.array([f[1] for f in faces], dtype=int)
    p0 = np.array([f[2] for f in faces], dtype=float).reshape(-1, grid.dim)
    p1 = np.array([f[3] for f in faces], dtype=float).reshape(-1, grid.dim)
    nrm = np.array([f[4] for f in faces], dtype=float).reshape(-1, grid.dim)
    length = np.array([f[5] for f in faces], dtype=float)
    be = np.array([f[0] for f in bfaces], dtype=int)
    bp0 = np.array([f[1] for f in bfaces], dtype=float).reshape(-1, grid.dim)
    bp1 = np.array([f[2] for f in bfaces], dtype=float).reshape(-1, grid.dim)
    bn = np.array([f[3] for f in bfaces], dtype=float).reshape(-1, grid.dim)
    bl = np.array([f[4] for f in bfaces], dtype=float)
    arrays = dict(
        centers=rot(centers_ref),
        areas=areas,
        vertices=tuple(rot(v) for v in verts),
        quad_points=rot(quad_pts.reshape(-1, grid.dim)).reshape(quad_pts.shape),
        quad_weights=quad_w,
        face_minus=fm,
        face_plus=fp,
        face_p0=rot(p0),
        face_p1=rot(p1),
        face_normal=rot(nrm),
        face_length=length,
        bface_elem=be,
        bface_p0=rot(bp0),
        bface_p1=rot(bp1),
        bface_normal=rot(bn),
        bface_length=bl,
        boundary_elements=np.unique(be),
    )
    for v in arrays.values():
        if isinstance(v, np.ndarray):
            v.setflags(write=False)
    return Mesh(grid=grid, **arrays)


def _mesh_1d(grid, R):
    x = grid.breaks(0)
    n = grid.cells_per_side
    g, w = _GAUSS2
    verts = [np.array([[x[i]], [x[i + 1]]]) for i in range(n)]
    quads = [
        ((x[i] + (x[i + 1] - x[i]) * g).reshape(-1, 1), w * (x[i + 1] - x[i]), x[i + 1] - x[i])
        for i in range(n)
    ]
    faces = [(i, i + 1, [x[i + 1]], [x[i + 1]], [1.0], 1.0) for i in range(n - 1)]
    bfaces = [(0, [x[0]], [x[0]], [-1.0], 1.0), (n - 1, [x[n]], [x[n]], [1.0], 1.0)]
    return _finish(grid, R, verts, quads, faces, bfaces)


# triangle slots inside a crossed square
_LEFT, _RIGHT, _BOTTOM, _TOP = 0, 1, 2, 3


def _crossed_cells(grid) -> np.ndarray:
    """Boolean (n, n) mask of cells cut along both diagonals.

    Only full-size cells are cut; the thinner cells of boundary layers stay
    whole, which keeps grids nested under doubling of ``n``.
    """
    k = grid.cells_per_side
    if grid.dim != 2 or grid.split != "crossed":
        return np.zeros((k, k), dtype=bool)
    full = []
    for ax in range(2):
        br = grid.breaks(ax)
        h = (grid.box[ax][1] - grid.box[ax][0]) / grid.n
        full.append(np.isclose(np.diff(br), h, rtol=1e-9, atol=0))
    return full[0][:, None] & full[1][None, :]


def _mesh_2d(grid, R):
    n = grid.cells_per_side
    xs, ys = grid.breaks(0), grid.breaks(1)
    crossed = _crossed_cells(grid)
    first = np.zeros((n, n), dtype=int)
    count = 0
    for i in range(n):
        for j in range(n):
            first[i, j] = count
            count += 4 if crossed[i, j] else 1

    def side(i, j, k):
        # element carrying side k of cell (i, j)
        return first[i, j] + k if crossed[i, j] else first[i, j]

    verts, quads, faces, bfaces = [], [], [], []
    for i in range(n):
        for j in range(n):
            a = np.array([xs[i], ys[j]])
            b = np.array([xs[i + 1], ys[j]])
            c = np.array([xs[i + 1], ys[j + 1]])
            d = np.array([xs[i], ys[j + 1]])
            if crossed[i, j]:
                m = (a + c) / 2
                for tri in ((a, d, m), (b, c, m), (a, b, m), (d, c, m)):
                    v = np.array(tri)
                    verts.append(v)
                    quads.append(_tri_quad(v))
            else:
                verts.append(np.array([a, b, c, d]))
                quads.append(_square_quad(a, c))

    def add_face(e0, e1, p, q):
        p = np.asarray(p, float)
        q = np.asarray(q, float)
        t = q - p
        L = float(np.hypot(*t))
        nrm = np.array([t[1], -t[0]]) / L
        if nrm @ (verts[e1].mean(axis=0) - verts[e0].mean(axis=0)) < 0:
            nrm = -nrm
        faces.append((e0, e1, p, q, nrm, L))

    for i in range(n):
        for j in range(n):
            a = [xs[i], ys[j]]
            b = [xs[i + 1], ys[j]]
            c = [xs[i + 1], ys[j + 1]]
            d = [xs[i], ys[j + 1]]
            if crossed[i, j]:
                m = [(xs[i] + xs[i + 1]) / 2, (ys[j] + ys[j + 1]) / 2]
                e = first[i, j]
                add_face(e + _LEFT, e + _BOTTOM, a, m)
                add_face(e + _LEFT, e + _TOP, d, m)
                add_face(e + _RIGHT, e + _BOTTOM, b, m)
                add_face(e + _RIGHT, e + _TOP, c, m)
            if i + 1 < n:
                add_face(side(i, j, _RIGHT), side(i + 1, j, _LEFT), b, c)
            if j + 1 < n:
                add_face(side(i, j, _TOP), side(i, j + 1, _BOTTOM), d, c)
    for j in range(n):
        h = ys[j + 1] - ys[j]
        bfaces.append((side(0, j, _LEFT), [xs[0], ys[j]], [xs[0], ys[j + 1]], [-1.0, 0.0], h))
        bfaces.append((side(n - 1, j, _RIGHT), [xs[n], ys[j]], [xs[n], ys[j + 1]], [1.0, 0.0], h))
    for i in range(n):
        h = xs[i + 1] - xs[i]
        bfaces.append((side(i, 0, _BOTTOM), [xs[i], ys[0]], [xs[i + 1], ys[0]], [0.0, -1.0], h))
        bfaces.append((side(i, n - 1, _TOP), [xs[i], ys[n]], [xs[i + 1], ys[n]], [0.0, 1.0], h))
    return _finish(grid, R, verts, quads, faces, bfaces)


def _cell_tables(grid):
    crossed = _crossed_cells(grid)
    counts = np.where(crossed, 4, 1).ravel()
    first = np.concatenate([[0], np.cumsum(counts)[:-1]])
    return crossed.ravel(), first


def locate(grid: Grid, points) -> np.ndarray:
    """Index of the element containing each physical point (closed cells)."""
    P = np.atleast_2d(np.asarray(points, dtype=float)) @ grid.R
    n = grid.cells_per_side
    ij = []
    for ax in range(grid.dim):
        br = grid.breaks(ax)
        k = np.searchsorted(br, P[:, ax], side="right") - 1
        ij.append(np.clip(k, 0, n - 1))
    if grid.dim == 1:
        return ij[0]
    sq = ij[0] * n + ij[1]
    if grid.split == "none":
        return sq
    crossed, first = _cell_tables(grid)
    bx, by = grid.breaks(0), grid.breaks(1)
    hx = bx[ij[0] + 1] - bx[ij[0]]
    hy = by[ij[1] + 1] - by[ij[1]]
    dx = (P[:, 0] - bx[ij[0]] - hx / 2) / hx
    dy = (P[:, 1] - by[ij[1]] - hy / 2) / hy
    slot = np.where(
        np.abs(dx) >= np.abs(dy),
        np.where(dx < 0, _LEFT, _RIGHT),
        np.where(dy < 0, _BOTTOM, _TOP),
    )
    return first[sq] + np.where(crossed[sq], slot, 0)


# --------------------------------------------------------------------------
# fields


@dataclass(frozen=True, eq=False)
class SBVField:
    """Per-element affine data; offsets (M, d) and slopes (M, d, N)."""

    grid: Grid
    offsets: np.ndarray
    slopes: np.ndarray

    def __post_init__(self):
        c = np.array(self.offsets, dtype=float)
        S = np.array(self.slopes, dtype=float)
        M = self.grid.n_elements
        if c.ndim == 1:
            c = c.reshape(M, -1)
        d = c.shape[1]
        S = S.reshape(M, d, self.grid.dim)
        if c.shape[0] != M:
            raise ValueError(f"expected {M} elements, got {c.shape[0]}")
        if not (np.all(np.isfinite(c)) and np.all(np.isfinite(S))):
            raise ValueError("offsets and slopes must be finite")
        c.setflags(write=False)
        S.setflags(write=False)
        object.__setattr__(self, "offsets", c)
        object.__setattr__(self, "slopes", S)

    @property
    def d(self) -> int:
        return self.offsets.shape[1]

    @property
    def mesh(self) -> Mesh:
        return mesh_of(self.grid)

    def values_at(self, elems, points) -> np.ndarray:
        """Evaluate the affine piece of ``elems`` at physical ``points``."""
        m = self.mesh
        P = np.atleast_2d(np.asarray(points, dtype=float))
        e = np.asarray(elems, dtype=int)
        return self.offsets[e] + np.einsum("kij,kj->ki", self.slopes[e], P - m.centers[e])

    def __call__(self, points) -> np.ndarray:
        P = np.atleast_2d(np.asarray(points, dtype=float))
        return self.values_at(locate(self.grid, P), P)

    def jump_endpoints(self):
        """Jumps ``u+ - u-`` at both endpoints of every interior face."""
        m = self.mesh
        a0 = self.values_at(m.face_plus, m.face_p0) - self.values_at(m.face_minus, m.face_p0)
        a1 = self.values_at(m.face_plus, m.face_p1) - self.values_at(m.face_minus, m.face_p1)
        return a0, a1

    def __add__(self, other: "SBVField") -> "SBVField":
        if other.grid != self.grid:
            raise ValueError("fields live on different grids")
        return SBVField(self.grid, self.offsets + other.offsets, self.slopes + other.slopes)

    def __sub__(self, other: "SBVField") -> "SBVField":
        if other.grid != self.grid:
            raise ValueError("fields live on different grids")
        return SBVField(self.grid, self.offsets - other.offsets, self.slopes - other.slopes)

    def shifted(self, const) -> "SBVField":
        return SBVField(self.grid, self.offsets + np.asarray(const, dtype=float), self.slopes)


@dataclass
class EnergyBreakdown:
    bulk_value: float
    surface_value: float
    total: float
    per_face: np.ndarray

    def as_dict(self) -> dict:
        return {"bulk": self.bulk_value, "surface": self.surface_value, "total": self.total}


def abs_linear_integral(a0, a1):
    """Exact mean of ``|a0 + (a1 - a0) t|`` over t in [0, 1] (vectorized)."""
    a0 = np.asarray(a0, dtype=float)
    a1 = np.asarray(a1, dtype=float)
    same = a0 * a1 >= 0
    s = np.abs(a0) + np.abs(a1)
    with np.errstate(divide="ignore", invalid="ignore"):
        cross = np.where(s > 0, (a0 * a0 + a1 * a1) / (2 * s), 0.0)
    return np.where(same, 0.5 * s, cross)


def _half_sqrt_prim(t, rho2):
    r = np.sqrt(t * t + rho2)
    with np.errstate(divide="ignore", invalid="ignore"):
        rho = np.sqrt(rho2)
        log_term = np.where(rho2 > 0, rho2 * np.arcsinh(np.divide(t, rho, where=rho > 0, out=np.zeros_like(t))), 0.0)
    return 0.5 * (t * r + log_term)


def norm_linear_integral(a0, a1):
    """Exact mean of ``|a0 + (a1 - a0) t|`` (Euclidean) over t in [0, 1]."""
    a0 = np.atleast_2d(np.asarray(a0, dtype=float))
    b = np.atleast_2d(np.asarray(a1, dtype=float)) - a0
    c2 = np.einsum("ki,ki->k", b, b)
    n0 = np.sqrt(np.einsum("ki,ki->k", a0, a0))
    mid = np.linalg.norm(a0 + 0.5 * b, axis=1)
    c = np.sqrt(c2)
    tiny = c <= 1e-8 * np.maximum(n0, 1e-300)
    safe_c2 = np.where(tiny, 1.0, c2)
    ab = np.einsum("ki,ki->k", a0, b)
    s = ab / safe_c2
    rho2 = np.maximum(n0 * n0 - ab * ab / safe_c2, 0.0) / safe_c2
    exact = c * (_half_sqrt_prim(1.0 + s, rho2) - _half_sqrt_prim(s, rho2))
    return np.where(tiny, mid, exact)


def _bulk_values(u: SBVField, pair: DensityPair, x_frozen):
    m = u.mesh
    if x_frozen is not None:
        if pair.bulk_kernel is not None and not pair.x_dependent:
            vals, _ = pair.bulk_kernel.value_grad(u.slopes)
            vals = np.asarray(vals, dtype=float)
            bad = ~np.isfinite(vals) | (vals < 0)
            if np.any(bad):
                e = int(np.argmax(bad))
                raise DensityError(f"bulk density returned {vals[e]} at A={u.slopes[e].tolist()}")
            return vals * m.areas
        return np.array([pair.W(x_frozen, S) * a for S, a in zip(u.slopes, m.areas)])
    out = np.empty(m.n_elements)
    for e in range(m.n_elements):
        out[e] = sum(w * pair.W(p, u.slopes[e]) for p, w in zip(m.quad_points[e], m.quad_weights[e]))
    return out


def _surface_values(u: SBVField, pair: DensityPair, x_frozen):
    m = u.mesh
    if m.n_faces == 0:
        return np.zeros(0)
    a0, a1 = u.jump_endpoints()
    kern = pair.surface_kernel
    closed = kern is not None and kern.kind in ("trace", "norm") and (x_frozen is not None or not pair.x_dependent)
    if closed:
        if kern.kind == "trace":
            if u.d != u.grid.dim:
                raise ValueError("trace-type surface density needs d = N")
            s0 = np.einsum("ki,ki->k", a0, m.face_normal)
            s1 = np.einsum("ki,ki->k", a1, m.face_normal)
            mean = abs_linear_integral(s0, s1)
        else:
            mean = norm_linear_integral(a0, a1)
        return kern.scale * m.face_length * mean
    g, w = _GAUSS2
    out = np.empty(m.n_faces)
    for f in range(m.n_faces):
        if u.grid.dim == 1:
            pts, wts = [0.0], [1.0]
        else:
            pts, wts = g, w
        acc = 0.0
        for t, wt in zip(pts, wts):
            lam = a0[f] + t * (a1[f] - a0[f])
            x = x_frozen if x_frozen is not None else m.face_p0[f] + t * (m.face_p1[f] - m.face_p0[f])
            acc += wt * pair.psi(x, lam, m.face_normal[f])
        out[f] = m.face_length[f] * acc
    return out


def eval_energy(u: SBVField, pair: DensityPair, x_frozen=None) -> EnergyBreakdown:
    """Bulk plus interfacial energy of ``u``.

    With ``x_frozen`` the densities are evaluated at that fixed point (the
    localized energies of the cell formulas); otherwise at quadrature points.
    """
    if x_frozen is not None:
        x_frozen = np.atleast_1d(np.asarray(x_frozen, dtype=float))
        if x_frozen.shape != (u.grid.dim,):
            raise ValueError(f"x_frozen must be an {u.grid.dim}-vector")
    bulk = _bulk_values(u, pair, x_frozen)
    per_face = _surface_values(u, pair, x_frozen)
    if not np.all(np.isfinite(per_face)):
        raise DensityError("surface density produced a non-finite face integral")
    b = float(np.sum(bulk))
    s = float(np.sum(per_face))
    return EnergyBreakdown(b, s, b + s, per_face)


def total_variation(u: SBVField) -> float:
    """Mass of |Du|: Frobenius norm of the slopes plus jump magnitudes."""
    m = u.mesh
    bulk = float(np.sum(m.areas * np.linalg.norm(u.slopes.reshape(len(m.areas), -1), axis=1)))
    if m.n_faces == 0:
        return bulk
    a0, a1 = u.jump_endpoints()
    return bulk + float(np.sum(m.face_length * norm_linear_integral(a0, a1)))


# --------------------------------------------------------------------------
# constructors


def affine_field(grid: Grid, A) -> SBVField:
    """The linear map ``y -> A y`` on ``grid`` (no jumps)."""
    A = np.asarray(A, dtype=float)
    if A.ndim < 2:
        A = A.reshape(-1, grid.dim)
    if A.shape[1] != grid.dim:
        raise ValueError(f"A must have {grid.dim} columns")
    m = mesh_of(grid)
    M = m.n_elements
    return SBVField(grid, m.centers @ A.T, np.broadcast_to(A, (M,) + A.shape))


def constant_field(grid: Grid, value) -> SBVField:
    v = np.atleast_1d(np.asarray(value, dtype=float))
    M = grid.n_elements
    return SBVField(grid, np.tile(v, (M, 1)), np.zeros((M, v.size, grid.dim)))


def step_field(grid: Grid, lam, mu, nu) -> SBVField:
    """Zero-slope field equal to ``lam`` where ``y.nu >= 0`` and ``mu`` elsewhere.

    The plane ``y.nu = 0`` must be a union of grid faces.
    """
    nu = as_unit(nu)
    if nu.size != grid.dim:
        raise ValueError("normal has the wrong dimension")
    lam = np.atleast_1d(np.asarray(lam, dtype=float))
    mu = np.atleast_1d(np.asarray(mu, dtype=float))
    m = mesh_of(grid)
    side = np.empty(m.n_elements, dtype=bool)
    for e, v in enumerate(m.vertices):
        s = v @ nu
        if s.min() < -1e-12 and s.max() > 1e-12:
            raise ValueError("interface y.nu = 0 cuts through an element; choose a grid aligned with nu")
        side[e] = m.centers[e] @ nu >= 0
    c = np.where(side[:, None], lam[None, :], mu[None, :])
    return SBVField(grid, c, np.zeros((m.n_elements, lam.size, grid.dim)))


def refine_field(u: SBVField, fine: Grid) -> SBVField:
    """Represent ``u`` exactly on a grid that nests inside its own grid."""
    mf = mesh_of(fine)
    coarse = locate(u.grid, mf.centers)
    cm = u.mesh
    off = u.offsets[coarse] + np.einsum("kij,kj->ki", u.slopes[coarse], mf.centers - cm.centers[coarse])
    out = SBVField(fine, off, u.slopes[coarse])
    # every fine element must lie inside its coarse parent
    pts = np.concatenate([v * (1 - 1e-9) + c * 1e-9 for v, c in zip(mf.vertices, mf.centers)])
    owner = np.repeat(coarse, [len(v) for v in mf.vertices])
    if not np.array_equal(locate(u.grid, pts), owner):
        raise ValueError("grids are not nested")
    return out


# --------------------------------------------------------------------------
# serialization


def field_to_json(u: SBVField) -> dict:
    return {
        "version": SBVFIELD_VERSION,
        "grid": u.grid.as_dict(),
        "cells": [
            {"offset": c.tolist(), "slope": S.tolist()} for c, S in zip(u.offsets, u.slopes)
        ],
    }


def field_from_json(doc) -> SBVField:
    if isinstance(doc, str):
        doc = json.loads(doc)
    if doc.get("version") != SBVFIELD_VERSION:
        raise ValueError(f"unsupported field version {doc.get('version')!r}")
    grid = Grid.from_dict(doc["grid"])
    cells = doc["cells"]
    return SBVField(
        grid,
        np.array([c["offset"] for c in cells], dtype=float),
        np.array([c["slope"] for c in cells], dtype=float),
    )
