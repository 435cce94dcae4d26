"""Closed-form relaxed densities for convex bulk with trace-type interfaces.

With ``psi_0(lam, nu) = |lam . nu|`` and convex ``W_0`` every recursion
stage is explicit:

    W_k(A, B_k, ..., B_1) = |tr(A - B_k)| + sum_{j=2..k} |tr(B_j - B_{j-1})| + W_0(B_1)
    psi_k = psi_0

These formulas serve as ground truth for the numerical solvers.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .core import as_matrix, make_pair
from .sbvmesh import abs_linear_integral

__all__ = ["TraceExampleDensity", "exact_Wk", "exact_psik", "exact_E1", "exact_integrand"]


@dataclass(frozen=True)
class TraceExampleDensity:
    """A convex base bulk density paired with ``|lam . nu|``."""

    W0: Callable
    p: float = 2.0
    name: str = "quadratic"

    @classmethod
    def from_catalog(cls, name: str = "quadratic", p: float = 2.0) -> "TraceExampleDensity":
        pair = make_pair(bulk=name, p=p)
        return cls(lambda B: pair.W(None, B), pair.exponent_q, name)


def _square(A: np.ndarray) -> np.ndarray:
    A = as_matrix(A)
    if A.shape[0] != A.shape[1]:
        raise ValueError(f"trace needs a square matrix, got {A.shape[0]}x{A.shape[1]}")
    return A


def _default_W0(B):
    return float(np.sum(np.asarray(B, dtype=float) ** 2))


def exact_Wk(A, B_tuple: Sequence, W0: Callable = _default_W0) -> float:
    """Stage-k density; ``B_tuple = (B_k, ..., B_1)`` with k >= 1."""
    if len(B_tuple) < 1:
        raise ValueError("need at least one frozen matrix")
    A = _square(A)
    Bs = [_square(B) for B in B_tuple]
    if any(B.shape != A.shape for B in Bs):
        raise ValueError("all matrices must share the shape of A")
    val = abs(float(np.trace(A - Bs[0])))
    # Bs[i] = B_{k-i}; consecutive pairs give |tr(B_j - B_{j-1})|
    for hi, lo in zip(Bs[:-1], Bs[1:]):
        val += abs(float(np.trace(hi - lo)))
    return val + float(W0(Bs[-1]))


def exact_psik(lam, nu) -> float:
    lam = np.atleast_1d(np.asarray(lam, dtype=float))
    nu = np.atleast_1d(np.asarray(nu, dtype=float))
    if lam.shape != nu.shape:
        raise ValueError("trace-type surface density needs d = N")
    return abs(float(lam @ nu))


def exact_integrand(grad_g, G_levels: Sequence, W0: Callable = _default_W0) -> float:
    """``sum_l |tr(G_l - G_{l-1})| + W_0(G_L)`` with ``G_0 = grad g``."""
    return exact_Wk(grad_g, list(G_levels), W0)


def exact_E1(deformation, W0: Callable = _default_W0) -> float:
    """Level-one energy of a hierarchical deformation with piecewise-constant levels.

    The bulk part integrates the closed-form integrand cell by cell; the
    interfacial part integrates ``|[g] . nu|`` exactly along every face.
    """
    g = deformation.g
    if g.d != g.grid.dim:
        raise ValueError("the closed form needs d = N")
    m = g.mesh
    levels = deformation.G_levels
    bulk = 0.0
    for e in range(m.n_elements):
        bulk += m.areas[e] * exact_integrand(g.slopes[e], [G[e] for G in levels], W0)
    surface = 0.0
    if m.n_faces:
        a0, a1 = g.jump_endpoints()
        s0 = np.einsum("ki,ki->k", a0, m.face_normal)
        s1 = np.einsum("ki,ki->k", a1, m.face_normal)
        surface = float(np.sum(m.face_length * abs_linear_integral(s0, s1)))
    return bulk + surface
