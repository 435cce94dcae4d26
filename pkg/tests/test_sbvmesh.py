import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hsdrelax.core import make_pair
from hsdrelax.sbvmesh import (
    Grid,
    SBVField,
    abs_linear_integral,
    affine_field,
    constant_field,
    eval_energy,
    field_from_json,
    field_to_json,
    locate,
    mesh_of,
    norm_linear_integral,
    refine_field,
    step_field,
    total_variation,
)

from oracles import face_integrals

# frozen values from the independent face-quadrature oracle for seed 0
RANDOM_TRACE_SURFACE = 5.197397459552873
RANDOM_NORM_SURFACE = 8.659894913710104


def random_field(grid, d=2, seed=0):
    rng = np.random.default_rng(seed)
    M = grid.n_elements
    return SBVField(grid, rng.normal(size=(M, d)), rng.normal(size=(M, d, grid.dim)))


def test_affine_identity_energy():
    u = affine_field(Grid(2, 1), np.eye(2))
    e = eval_energy(u, make_pair())
    assert (e.bulk_value, e.surface_value, e.total) == (2.0, 0.0, 2.0)
    assert total_variation(u) == pytest.approx(np.sqrt(2))


def test_step_in_1d():
    grid = Grid(1, 2)
    u = step_field(grid, [3.0], [0.0], [1.0])
    e = eval_energy(u, make_pair(surface="norm-interfacial"))
    assert (e.bulk_value, e.surface_value, e.total) == (0.0, 3.0, 3.0)


def test_staircase_total_variation():
    n = 8
    grid = Grid(1, n, box=((0.0, 1.0),))
    u = SBVField(grid, (np.arange(n) / n)[:, None], np.zeros((n, 1, 1)))
    # n - 1 interior jumps of 1/n; the exact value is (n - 1)/n
    assert total_variation(u) == pytest.approx((n - 1) / n, abs=1e-15)


def test_zero_affine_field():
    u = affine_field(Grid(2, 3), np.zeros((2, 2)))
    assert eval_energy(u, make_pair()).total == 0.0


def test_step_field_examples():
    grid = Grid(2, 4)
    u = step_field(grid, [1.0, 0.0], [0.0, 0.0], [1.0, 0.0])
    pair = make_pair()
    e = eval_energy(u, pair)
    assert e.surface_value == pytest.approx(1.0, abs=1e-15)
    flat = step_field(grid, [1.0, 2.0], [1.0, 2.0], [0.0, 1.0])
    assert total_variation(flat) == 0.0
    with pytest.raises(ValueError):
        step_field(Grid(2, 3), [1.0, 0.0], [0.0, 0.0], [1.0, 0.0])
    with pytest.raises(ValueError):
        step_field(grid, [1.0, 0.0], [0.0, 0.0], [0.0, 0.0])


def test_random_field_against_face_oracle():
    grid = Grid(2, 4)
    u = random_field(grid)
    trace = make_pair()
    norm = make_pair(surface="norm-interfacial")
    got_t = eval_energy(u, trace).surface_value
    got_n = eval_energy(u, norm).surface_value
    ref_t = face_integrals(u, lambda j, nu: abs(j @ nu))
    ref_n = face_integrals(u, lambda j, nu: float(np.linalg.norm(j)))
    assert got_t == pytest.approx(ref_t, rel=1e-8)
    assert got_n == pytest.approx(ref_n, rel=1e-8)
    assert ref_t == pytest.approx(RANDOM_TRACE_SURFACE, rel=1e-10)
    assert ref_n == pytest.approx(RANDOM_NORM_SURFACE, rel=1e-10)
    bulk = float(np.sum(mesh_of(grid).areas * np.sum(u.slopes**2, axis=(1, 2))))
    assert eval_energy(u, trace).bulk_value == pytest.approx(bulk, rel=1e-12)
    tv = float(np.sum(mesh_of(grid).areas * np.linalg.norm(u.slopes.reshape(16, -1), axis=1)))
    assert total_variation(u) == pytest.approx(tv + ref_n, rel=1e-8)


def test_total_is_bulk_plus_surface():
    for split in ("none", "crossed"):
        u = random_field(Grid(2, 3, split=split), seed=3)
        e = eval_energy(u, make_pair())
        assert e.total == pytest.approx(e.bulk_value + e.surface_value, rel=1e-12)
        assert e.surface_value == pytest.approx(float(np.sum(e.per_face)), rel=1e-12)


def test_refinement_leaves_energy_unchanged():
    for coarse, fine in (
        (Grid(2, 2), Grid(2, 4)),
        (Grid(2, 2, split="crossed"), Grid(2, 4, split="crossed")),
        (Grid(2, 4, split="crossed", layers=2), Grid(2, 8, split="crossed", layers=3)),
        (Grid(1, 3), Grid(1, 9)),
    ):
        u = random_field(coarse, d=coarse.dim, seed=1)
        v = refine_field(u, fine)
        for pair in (make_pair(), make_pair(surface="norm-interfacial")):
            if coarse.dim == 1 and pair.surface_name == "trace-interfacial":
                pair = make_pair(surface="trace-interfacial")
            a, b = eval_energy(u, pair), eval_energy(v, pair)
            assert b.total == pytest.approx(a.total, rel=1e-10)
            assert b.surface_value == pytest.approx(a.surface_value, rel=1e-10, abs=1e-12)
        assert total_variation(v) == pytest.approx(total_variation(u), rel=1e-10)


def test_refinement_requires_nesting():
    with pytest.raises(ValueError):
        refine_field(random_field(Grid(2, 2)), Grid(2, 3))


def test_energy_is_additive_over_halves():
    # a field on [0,2]x[0,1] splits into two unit squares with no jump across x = 1
    grid = Grid(2, 2, box=((0.0, 2.0), (0.0, 1.0)))
    u = random_field(grid, seed=5)
    full = eval_energy(u, make_pair(surface="norm-interfacial"))
    m = mesh_of(grid)
    left = m.centers[:, 0] < 1.0
    bulk = float(np.sum(m.areas * np.sum(u.slopes**2, axis=(1, 2))))
    parts = [
        float(np.sum(m.areas[mask] * np.sum(u.slopes[mask] ** 2, axis=(1, 2)))) for mask in (left, ~left)
    ]
    assert sum(parts) == pytest.approx(bulk, rel=1e-14)
    assert full.bulk_value == pytest.approx(bulk, rel=1e-12)


def test_frozen_x_evaluation_and_callable_density():
    from dataclasses import replace

    pair = make_pair()
    het = replace(pair, bulk=lambda x, A: (1.0 + x[0] ** 2) * float(np.sum(A**2)), bulk_kernel=None, x_dependent=True)
    u = affine_field(Grid(2, 4), np.eye(2))
    frozen = eval_energy(u, het, x_frozen=np.array([1.0, 0.0])).bulk_value
    assert frozen == pytest.approx(4.0)
    varying = eval_energy(u, het).bulk_value
    # int over (-1/2,1/2)^2 of 2(1 + x^2) with a degree-3 rule on each cell is exact
    assert varying == pytest.approx(2 * (1 + 1 / 12), rel=1e-12)


def test_dimension_mismatch():
    u = random_field(Grid(2, 2), d=3)
    with pytest.raises(ValueError):
        eval_energy(u, make_pair())


def test_grid_validation():
    with pytest.raises(ValueError):
        Grid(3, 2)
    with pytest.raises(ValueError):
        Grid(2, 0)
    with pytest.raises(ValueError):
        Grid(2, 2, rotation=((1.0, 0.1), (0.0, 1.0)))
    with pytest.raises(ValueError):
        Grid(1, 2, split="crossed")


def test_locate_and_call():
    grid = Grid(2, 4, split="crossed", layers=1)
    m = mesh_of(grid)
    assert np.array_equal(locate(grid, m.centers), np.arange(m.n_elements))
    u = random_field(grid)
    assert np.allclose(u(m.centers), u.offsets)


def test_json_roundtrip():
    grid = Grid(2, 2, rotation=((0.6, -0.8), (0.8, 0.6)), split="crossed", layers=1)
    u = random_field(grid, seed=2)
    doc = json.loads(json.dumps(field_to_json(u)))
    assert doc["version"] == "sbvfield-v1"
    v = field_from_json(doc)
    assert v.grid == u.grid
    assert np.array_equal(v.offsets, u.offsets) and np.array_equal(v.slopes, u.slopes)
    with pytest.raises(ValueError):
        field_from_json({"version": "sbvfield-v0"})


def test_closed_form_face_integrals():
    assert abs_linear_integral(1.0, -1.0) == pytest.approx(0.5)
    assert abs_linear_integral(2.0, 4.0) == pytest.approx(3.0)
    assert abs_linear_integral(0.0, 0.0) == 0.0
    t = np.linspace(0, 1, 200001)
    a0, a1 = np.array([[1.0, -2.0]]), np.array([[-1.5, 0.5]])
    vals = np.linalg.norm(a0 + np.outer(t, a1 - a0), axis=1)
    ref = np.trapezoid(vals, t) if hasattr(np, "trapezoid") else np.trapz(vals, t)
    assert norm_linear_integral(a0, a1)[0] == pytest.approx(ref, rel=1e-9)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.floats(-10, 10))
def test_total_variation_shift_invariant(seed, c):
    u = random_field(Grid(2, 2, split="crossed"), seed=seed)
    assert total_variation(u.shifted(np.array([c, -c]))) == pytest.approx(total_variation(u), rel=1e-9, abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.floats(-5, 5), st.floats(-5, 5), st.floats(0, 2 * np.pi))
def test_step_surface_equals_psi(l1, l2, th):
    from hsdrelax.cellsolver import surface_grid

    nu = np.array([np.cos(th), np.sin(th)])
    lam = np.array([l1, l2])
    grid = surface_grid(nu, 4)
    u = step_field(grid, lam, np.zeros(2), nu)
    for pair in (make_pair(), make_pair(surface="norm-interfacial")):
        assert eval_energy(u, pair).surface_value == pytest.approx(pair.psi(None, lam, nu), rel=1e-12, abs=1e-12)


def test_constant_field():
    u = constant_field(Grid(1, 3), [2.0, -1.0])
    assert u.d == 2 and total_variation(u) == 0.0
