"""Matrix helpers, energy densities and the density-class checker.

Densities are plain callables ``bulk(x, A)`` and ``surface(x, lam, nu)``.
Catalog densities additionally carry vectorized *kernels* that return
smoothed values and gradients; the cell solvers need those to optimize.
User densities without kernels fall back to finite differences.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.stats import qmc

__all__ = [
    "DensityError",
    "DensityConstants",
    "DensityPair",
    "BulkKernel",
    "SurfaceKernel",
    "SamplingPlan",
    "PropertyVerdict",
    "ClassReport",
    "as_matrix",
    "as_unit",
    "disarrangement_tensor",
    "trace",
    "catalog_bulk",
    "catalog_surface",
    "make_pair",
    "check_density_class",
    "BULK_CATALOG",
    "SURFACE_CATALOG",
]

UNIT_TOL = 1e-12


class DensityError(ValueError):
    """A density returned a non-finite or negative value."""


def as_matrix(A, d: Optional[int] = None, N: Optional[int] = None) -> np.ndarray:
    """Coerce scalars, vectors and nested lists to a finite 2D float array."""
    M = np.asarray(A, dtype=float)
    if M.ndim == 0:
        M = M.reshape(1, 1)
    elif M.ndim == 1:
        M = M.reshape(-1, 1) if N == 1 else M.reshape(1, -1) if d == 1 else M.reshape(-1, 1)
    if M.ndim != 2:
        raise ValueError(f"expected a matrix, got shape {M.shape}")
    if not np.all(np.isfinite(M)):
        raise ValueError("matrix entries must be finite")
    if d is not None and M.shape[0] != d or N is not None and M.shape[1] != N:
        raise ValueError(f"expected a {d}x{N} matrix, got {M.shape}")
    return M


def as_unit(nu) -> np.ndarray:
    v = np.atleast_1d(np.asarray(nu, dtype=float))
    if abs(np.linalg.norm(v) - 1.0) > UNIT_TOL:
        raise ValueError(f"normal {v.tolist()} is not a unit vector")
    return v


def trace(A) -> float:
    M = as_matrix(A)
    if M.shape[0] != M.shape[1]:
        raise ValueError("trace is only defined for square matrices")
    return float(np.trace(M))


def disarrangement_tensor(gradient, G) -> np.ndarray:
    """Return ``gradient - G``, the macroscopic trace of slips and separations."""
    grad = np.asarray(gradient, dtype=float)
    G = np.asarray(G, dtype=float)
    if grad.shape != G.shape:
        raise ValueError(f"shape mismatch: {grad.shape} vs {G.shape}")
    return grad - G


# --------------------------------------------------------------------------
# kernels


def _smooth_abs(s, eps):
    if eps == 0.0:
        return np.abs(s), np.sign(s)
    r = np.sqrt(s * s + eps * eps)
    return r, s / r


class BulkKernel:
    """Vectorized ``W(S)`` for stacks of slopes ``S`` of shape (M, d, N)."""

    convex = False

    def value_grad(self, S: np.ndarray, eps: float = 0.0):
        raise NotImplementedError


class QuadraticKernel(BulkKernel):
    convex = True

    def __init__(self, scale: float = 1.0):
        self.scale = scale

    def value_grad(self, S, eps=0.0):
        return self.scale * np.einsum("mij,mij->m", S, S), 2.0 * self.scale * S


class PowerKernel(BulkKernel):
    convex = True

    def __init__(self, p: float, scale: float = 1.0):
        if p < 1:
            raise ValueError("p-power density needs p >= 1")
        self.p = p
        self.scale = scale

    def value_grad(self, S, eps=0.0):
        sq = np.einsum("mij,mij->m", S, S)
        if eps > 0.0:
            sq = sq + eps * eps
        r = np.sqrt(sq)
        val = self.scale * r**self.p
        with np.errstate(divide="ignore", invalid="ignore"):
            fac = np.where(r > 0, self.scale * self.p * r ** (self.p - 2.0), 0.0)
        return val, fac[:, None, None] * S


class SurfaceKernel:
    """Vectorized ``psi(lam, nu)`` for stacks ``lam`` (K, d) and ``nu`` (K, N)."""

    # "trace" and "norm" kinds admit closed-form integration along faces
    kind: Optional[str] = None
    scale = 1.0

    def value_grad(self, lam: np.ndarray, nu: np.ndarray, eps: float = 0.0):
        raise NotImplementedError


class TraceKernel(SurfaceKernel):
    kind = "trace"

    def __init__(self, scale: float = 1.0):
        self.scale = scale

    def value_grad(self, lam, nu, eps=0.0):
        if lam.shape[1] != nu.shape[1]:
            raise ValueError("trace-type surface density needs d = N")
        s = np.einsum("ki,ki->k", lam, nu)
        val, ds = _smooth_abs(s, eps)
        return self.scale * val, self.scale * ds[:, None] * nu


class NormKernel(SurfaceKernel):
    kind = "norm"

    def __init__(self, scale: float = 1.0):
        self.scale = scale

    def value_grad(self, lam, nu, eps=0.0):
        sq = np.einsum("ki,ki->k", lam, lam) + eps * eps
        r = np.sqrt(sq)
        with np.errstate(divide="ignore", invalid="ignore"):
            g = np.where(r[:, None] > 0, lam / r[:, None], 0.0)
        return self.scale * r, self.scale * g


class CallableBulkKernel(BulkKernel):
    """Finite-difference kernel wrapping an arbitrary ``W(x, A)`` at frozen x."""

    def __init__(self, fn, x, h: float = 1e-6):
        self.fn = fn
        self.x = x
        self.h = h

    def value_grad(self, S, eps=0.0):
        M = S.shape[0]
        vals = np.empty(M)
        grads = np.zeros_like(S)
        for m in range(M):
            A = S[m]
            vals[m] = self.fn(self.x, A)
            for idx in np.ndindex(A.shape):
                Ap = A.copy()
                Am = A.copy()
                Ap[idx] += self.h
                Am[idx] -= self.h
                grads[m][idx] = (self.fn(self.x, Ap) - self.fn(self.x, Am)) / (2 * self.h)
        return vals, grads


class CallableSurfaceKernel(SurfaceKernel):
    def __init__(self, fn, x, h: float = 1e-6):
        self.fn = fn
        self.x = x
        self.h = h

    def value_grad(self, lam, nu, eps=0.0):
        K, d = lam.shape
        vals = np.empty(K)
        grads = np.zeros_like(lam)
        for k in range(K):
            vals[k] = self.fn(self.x, lam[k], nu[k])
            for i in range(d):
                lp = lam[k].copy()
                lm = lam[k].copy()
                lp[i] += self.h
                lm[i] -= self.h
                grads[k, i] = (self.fn(self.x, lp, nu[k]) - self.fn(self.x, lm, nu[k])) / (2 * self.h)
        return vals, grads


# --------------------------------------------------------------------------
# density pairs


def _zero_modulus(s: float) -> float:
    return 0.0


@dataclass(frozen=True)
class DensityConstants:
    c_W: float = 1.0
    C_W: float = 1.0
    c_psi: float = 1.0
    C_psi: float = 1.0
    A0: Optional[np.ndarray] = None
    omega_W: Callable[[float], float] = _zero_modulus
    omega_psi: Callable[[float], float] = _zero_modulus


@dataclass(frozen=True)
class DensityPair:
    """Bulk and surface energy densities with their declared class data.

    ``bulk_name``/``surface_name`` record catalog identity; the closed-form
    backend of the recursion is selected on those names only.
    """

    bulk: Callable
    surface: Callable
    exponent_q: float
    constants: DensityConstants = field(default_factory=DensityConstants)
    bulk_kernel: Optional[BulkKernel] = None
    surface_kernel: Optional[SurfaceKernel] = None
    bulk_name: Optional[str] = None
    surface_name: Optional[str] = None
    convex_bulk: bool = False
    # sub-additive and positively 1-homogeneous, as declared by the caller
    surface_sublinear: bool = False
    # jointly convex in lam (x) nu, hence stable under the surface cell formula
    surface_bv_elliptic: bool = False
    # coercive lower bound c_psi|lam| <= psi; trace-type densities only satisfy
    # the relaxed form 0 <= psi <= C|lam|
    surface_coercive: bool = True
    x_dependent: bool = False
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.exponent_q < 1:
            raise ValueError("exponent_q must be >= 1")
        c = self.constants
        for name in ("c_W", "C_W", "c_psi", "C_psi"):
            if not getattr(c, name) > 0:
                raise ValueError(f"declared constant {name} must be positive")

    def W(self, x, A) -> float:
        val = float(self.bulk(x, A))
        if not math.isfinite(val) or val < 0:
            raise DensityError(f"bulk density returned {val} at x={_fmt(x)}, A={_fmt(A)}")
        return val

    def psi(self, x, lam, nu) -> float:
        val = float(self.surface(x, lam, nu))
        if not math.isfinite(val) or val < 0:
            raise DensityError(
                f"surface density returned {val} at x={_fmt(x)}, lam={_fmt(lam)}, nu={_fmt(nu)}"
            )
        return val

    def bulk_kernel_at(self, x) -> BulkKernel:
        if self.bulk_kernel is not None and not self.x_dependent:
            return self.bulk_kernel
        return CallableBulkKernel(self.bulk, x)

    def surface_kernel_at(self, x) -> SurfaceKernel:
        if self.surface_kernel is not None and not self.x_dependent:
            return self.surface_kernel
        return CallableSurfaceKernel(self.surface, x)

    @property
    def trace_class(self) -> bool:
        """True when the pair is the closed-form trace example by catalog identity."""
        return (
            self.surface_name == "trace-interfacial"
            and self.bulk_name in ("quadratic", "p-power")
            and float(self.params.get("surface_scale", 1.0)) == 1.0
        )


def _fmt(v) -> str:
    return np.array2string(np.asarray(v, dtype=float), precision=6)


def _frob(A) -> float:
    return float(np.linalg.norm(np.asarray(A, dtype=float)))


def catalog_bulk(name: str, p: float = 2.0, scale: float = 1.0):
    """Return ``(callable, kernel, q, constants-dict)`` for a catalog bulk density."""
    if name == "quadratic":
        kern = QuadraticKernel(scale)
        return (lambda x, A: scale * float(np.sum(np.square(np.asarray(A, dtype=float))))), kern, 2.0, {"c_W": min(scale, 1.0), "C_W": scale}
    if name == "p-power":
        kern = PowerKernel(p, scale)
        return (lambda x, A: scale * _frob(A) ** p), kern, float(p), {"c_W": min(scale, 1.0), "C_W": scale * p}
    raise KeyError(f"unknown bulk density {name!r}")


def catalog_surface(name: str, scale: float = 1.0):
    if name == "trace-interfacial":

        def fn(x, lam, nu):
            lam = np.atleast_1d(np.asarray(lam, dtype=float))
            nu = np.atleast_1d(np.asarray(nu, dtype=float))
            if lam.shape != nu.shape:
                raise ValueError("trace-type surface density needs d = N")
            return scale * abs(float(lam @ nu))

        return fn, TraceKernel(scale), {"c_psi": scale, "C_psi": scale}
    if name == "norm-interfacial":

        def fn(x, lam, nu):
            return scale * float(np.linalg.norm(np.atleast_1d(lam)))

        return fn, NormKernel(scale), {"c_psi": scale, "C_psi": scale}
    raise KeyError(f"unknown surface density {name!r}")


BULK_CATALOG = ("quadratic", "p-power")
SURFACE_CATALOG = ("trace-interfacial", "norm-interfacial")


def make_pair(
    bulk: str = "quadratic",
    surface: str = "trace-interfacial",
    p: float = 2.0,
    bulk_scale: float = 1.0,
    surface_scale: float = 1.0,
) -> DensityPair:
    """Build a catalog density pair by name."""
    W, wk, q, wc = catalog_bulk(bulk, p=p, scale=bulk_scale)
    psi, sk, sc = catalog_surface(surface, scale=surface_scale)
    return DensityPair(
        bulk=W,
        surface=psi,
        exponent_q=q,
        constants=DensityConstants(**wc, **sc),
        bulk_kernel=wk,
        surface_kernel=sk,
        bulk_name=bulk,
        surface_name=surface,
        convex_bulk=True,
        surface_sublinear=True,
        surface_bv_elliptic=True,
        surface_coercive=surface != "trace-interfacial",
        params={"p": p, "bulk_scale": bulk_scale, "surface_scale": surface_scale},
    )


# --------------------------------------------------------------------------
# class checker

PROPERTIES = (
    "pr1",
    "pr2",
    "pr3",
    "W3-bounded",
    "symmetry",
    "pr4",
    "homogeneity",
    "subadditivity",
    "pr5",
)


@dataclass(frozen=True)
class SamplingPlan:
    """Where and how densely each property of the class is probed.

    Samples come from a scrambled Sobol sequence, so a larger ``count`` with
    the same ``seed`` extends (never replaces) a smaller plan. Deterministic
    ``anchors`` are probed first.
    """

    d: int = 2
    N: int = 2
    count: int = 1000
    entry_range: tuple = (-5.0, 5.0)
    t_range: tuple = (1e-3, 5.0)
    x_box: tuple = (-0.5, 0.5)
    seed: int = 0
    anchors: bool = True
    noncoercive: bool = False
    tol: float = 1e-9


@dataclass
class PropertyVerdict:
    passed: bool
    measured: Optional[float]
    witness: Optional[dict] = None
    worst_witness: Optional[dict] = None
    required: bool = True
    note: str = ""

    def as_dict(self) -> dict:
        return {
            "passed": self.passed,
            "required": self.required,
            "measured": self.measured,
            "witness": self.witness,
            "worst_witness": self.worst_witness,
            "note": self.note,
        }


@dataclass
class ClassReport:
    verdicts: dict

    @property
    def passed(self) -> bool:
        return all(v.passed or not v.required for v in self.verdicts.values())

    def failures(self) -> list:
        return [k for k, v in self.verdicts.items() if v.required and not v.passed]

    def as_dict(self) -> dict:
        return {k: v.as_dict() for k, v in self.verdicts.items()}


class _Sampler:
    def __init__(self, plan: SamplingPlan, stream: int):
        self.plan = plan
        self.stream = stream

    def draw(self, dim: int) -> np.ndarray:
        """``count`` points in [0,1)^dim; prefix-stable in ``count``."""
        m = max(1, int(math.ceil(math.log2(max(self.plan.count, 2)))))
        eng = qmc.Sobol(d=dim, scramble=True, seed=np.random.default_rng([self.plan.seed, self.stream]))
        return eng.random_base2(m)[: self.plan.count]


def _scale(u, lo, hi):
    return lo + (hi - lo) * u


def _unit_rows(v):
    n = np.linalg.norm(v, axis=1, keepdims=True)
    n[n == 0] = 1.0
    out = v / n
    out[np.all(v == 0, axis=1)] = np.eye(v.shape[1])[0]
    return out


def _anchor_vectors(dim):
    e = np.eye(dim)
    return [e[0], -e[0], e[-1], e[0] + e[-1], np.zeros(dim)]


def check_density_class(pair: DensityPair, plan: Optional[SamplingPlan] = None, properties=None) -> ClassReport:
    """Falsification test of every class property on quasi-random samples.

    Verdicts use the constants declared on ``pair``; the reported
    ``measured`` value is the smallest (or largest, for lower bounds)
    constant that would make the property hold on the samples seen.
    """
    plan = plan or SamplingPlan()
    props = tuple(properties) if properties is not None else PROPERTIES
    d, N, tol = plan.d, plan.N, plan.tol
    lo, hi = plan.entry_range
    c = pair.constants
    q = pair.exponent_q
    out = {}

    def mats(stream):
        u = _Sampler(plan, stream).draw(d * N)
        Ms = list(_scale(u, lo, hi).reshape(-1, d, N))
        if plan.anchors:
            Ms = [np.eye(d, N), np.zeros((d, N)), 2 * np.eye(d, N)] + Ms
        return Ms

    def vecs(stream, dim):
        u = _Sampler(plan, stream).draw(dim)
        vs = list(_scale(u, lo, hi))
        if plan.anchors:
            vs = _anchor_vectors(dim) + vs
        return vs

    def normals(stream):
        u = _Sampler(plan, stream).draw(N)
        ns = list(_unit_rows(_scale(u, -1.0, 1.0)))
        if plan.anchors:
            ns = [np.eye(N)[0]] + ns
        return ns

    def points(stream):
        u = _Sampler(plan, stream).draw(N)
        xs = list(_scale(u, *plan.x_box))
        if plan.anchors:
            xs = [np.zeros(N)] + xs
        return xs

    def ts(stream):
        u = _Sampler(plan, stream).draw(1)[:, 0]
        vals = list(_scale(u, *plan.t_range))
        if plan.anchors:
            vals = [2.0, 0.5] + vals
        return vals

    def run(name, tuples, excess, measure=None, required=True, note=""):
        """``excess(tuple) > tol`` signals a violation."""
        first = None
        worst = None
        worst_val = -np.inf
        measured = None
        for tup in tuples:
            e = excess(*tup)
            if e > worst_val:
                worst_val = e
                worst = tup
            if e > tol and first is None:
                first = tup
            if measure is not None:
                m = measure(*tup)
                if m is not None:
                    measured = m if measured is None else measure.combine(measured, m)
        passed = first is None
        out[name] = PropertyVerdict(
            passed=passed,
            measured=None if measured is None else float(measured),
            witness=None if first is None else _witness(name, first),
            worst_witness=None if passed else _witness(name, worst),
            required=required,
            note=note,
        )

    xs0 = points(1)
    xs1 = points(2)
    As = mats(3)
    A2s = mats(4)
    lams = vecs(5, d)
    lam2s = vecs(6, d)
    nus = normals(7)
    tvals = ts(8)

    def cyc(seq, k):
        return seq[k % len(seq)]

    count = max(len(As), len(lams))

    if "pr1" in props:

        def ex(x0, x1, A):
            dW = abs(pair.W(x1, A) - pair.W(x0, A))
            return dW - c.omega_W(float(np.linalg.norm(x1 - x0))) * (1 + _frob(A) ** q)

        def meas(x0, x1, A):
            dx = float(np.linalg.norm(x1 - x0))
            if dx == 0:
                return None
            return abs(pair.W(x1, A) - pair.W(x0, A)) / (1 + _frob(A) ** q)

        meas.combine = max
        tup = [(cyc(xs0, k), cyc(xs1, k), cyc(As, k)) for k in range(count)]
        run("pr1", tup, ex, meas, note=_modulus_note(c.omega_W))

    if "pr2" in props:

        def ex(x, A1, A2):
            lhs = abs(pair.W(x, A1) - pair.W(x, A2))
            return lhs - c.C_W * _frob(A1 - A2) * (1 + _frob(A1) ** (q - 1) + _frob(A2) ** (q - 1))

        def meas(x, A1, A2):
            den = _frob(A1 - A2) * (1 + _frob(A1) ** (q - 1) + _frob(A2) ** (q - 1))
            if den == 0:
                return None
            return abs(pair.W(x, A1) - pair.W(x, A2)) / den

        meas.combine = max
        tup = [(cyc(xs0, k), cyc(As, k), cyc(A2s, k + 1)) for k in range(count)]
        run("pr2", tup, ex, meas)

    if "pr3" in props:
        required = not plan.noncoercive

        def ex(x, A):
            return c.c_W * _frob(A) ** q - 1 / c.c_W - pair.W(x, A)

        tup = [(cyc(xs0, k), cyc(As, k)) for k in range(count)]
        run(
            "pr3",
            tup,
            ex,
            None,
            required=required,
            note="" if required else "not required in the non-coercive class",
        )
        out["pr3"].measured = _fit_coercivity([(_frob(A) ** q, pair.W(x, A)) for x, A in tup])

    if "W3-bounded" in props:
        A0 = c.A0 if c.A0 is not None else np.zeros((d, N))
        vals = [pair.W(x, A0) for x in xs0]
        bound = max(vals)
        out["W3-bounded"] = PropertyVerdict(
            passed=bool(np.isfinite(bound)),
            measured=float(bound),
            note="sup over sampled x of W(x, A0)",
        )

    if "symmetry" in props:

        def ex(x, lam, nu):
            return abs(pair.psi(x, lam, nu) - pair.psi(x, -lam, -nu))

        tup = [(cyc(xs0, k), cyc(lams, k), cyc(nus, k)) for k in range(count)]
        run("symmetry", tup, ex, None)

    if "pr4" in props:
        lower_required = pair.surface_coercive and not plan.noncoercive

        def ex(x, lam, nu):
            val = pair.psi(x, lam, nu)
            nl = float(np.linalg.norm(lam))
            up = val - c.C_psi * nl
            low = c.c_psi * nl - val if lower_required else -np.inf
            return max(up, low)

        tup = [(cyc(xs0, k), cyc(lams, k), cyc(nus, k)) for k in range(count)]
        run(
            "pr4",
            tup,
            ex,
            None,
            note="" if lower_required else "lower bound not required: relaxed form 0 <= psi <= C|lam|",
        )
        ratios = [pair.psi(x, l, n) / np.linalg.norm(l) for x, l, n in tup if np.linalg.norm(l) > 0]
        out["pr4"].measured = float(max(ratios)) if ratios else 0.0
        out["pr4"].note = (out["pr4"].note + f"; measured lower ratio {min(ratios) if ratios else 0.0:.6g}").lstrip("; ")

    if "homogeneity" in props:

        def ex(x, lam, nu, t):
            a = pair.psi(x, t * lam, nu)
            b = t * pair.psi(x, lam, nu)
            return abs(a - b) - tol * max(1.0, abs(b))

        tup = [(cyc(xs0, k), cyc(lams, k), cyc(nus, k), cyc(tvals, k)) for k in range(count)]
        run("homogeneity", tup, ex, None)

    if "subadditivity" in props:

        def ex(x, l1, l2, nu):
            a = pair.psi(x, l1 + l2, nu)
            b = pair.psi(x, l1, nu) + pair.psi(x, l2, nu)
            return a - b - tol * max(1.0, abs(b))

        tup = [(cyc(xs0, k), cyc(lams, k), cyc(lam2s, k + 1), cyc(nus, k)) for k in range(count)]
        run("subadditivity", tup, ex, None)

    if "pr5" in props:

        def ex(x0, x1, lam, nu):
            dpsi = abs(pair.psi(x1, lam, nu) - pair.psi(x0, lam, nu))
            return dpsi - c.omega_psi(float(np.linalg.norm(x1 - x0))) * float(np.linalg.norm(lam))

        tup = [(cyc(xs0, k), cyc(xs1, k), cyc(lams, k), cyc(nus, k)) for k in range(count)]
        run("pr5", tup, ex, None, note=_modulus_note(c.omega_psi))

    return ClassReport({k: out[k] for k in PROPERTIES if k in out})


def _modulus_note(omega) -> str:
    at0 = omega(1e-12)
    return "" if at0 <= 1e-9 else f"declared modulus does not vanish at 0 (omega(1e-12)={at0:.3g})"


def _fit_coercivity(pairs) -> float:
    """Largest c in (0, 1] with ``c*a - 1/c <= w`` for every sampled (a, w)."""

    def ok(cc):
        return all(cc * a - 1 / cc <= w + 1e-12 for a, w in pairs)

    lo_c, hi_c = 0.0, 1.0
    if ok(hi_c):
        return 1.0
    for _ in range(60):
        mid = 0.5 * (lo_c + hi_c)
        if mid > 0 and ok(mid):
            lo_c = mid
        else:
            hi_c = mid
    return lo_c


def _witness(name, tup) -> dict:
    keys = {
        "pr1": ("x0", "x1", "A"),
        "pr2": ("A1", "A2"),
        "pr3": ("x", "A"),
        "symmetry": ("x", "lam", "nu"),
        "pr4": ("x", "lam", "nu"),
        "homogeneity": ("x", "lam", "nu", "t"),
        "subadditivity": ("x", "lam1", "lam2", "nu"),
        "pr5": ("x0", "x1", "lam", "nu"),
    }[name]
    return {k: np.asarray(v, dtype=float).tolist() for k, v in zip(keys, tup)}
