import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hsdrelax.approx import (
    ApproximationPlan,
    UnsupportedConstruction,
    build_family,
    build_hierarchical_sequence,
    default_battery,
    family_from_json,
    family_to_json,
    jump_mass,
    l1_distance,
    primitive_constant,
    primitive_field,
    sd_norm,
    staircase,
    verify_convergence,
    verify_tv_bound,
)
from hsdrelax.hierarchy import HierarchicalDeformation
from hsdrelax.sbvmesh import Grid, SBVField, affine_field, constant_field, total_variation

UNIT = ((0.0, 1.0),)


def target_1d(levels=(0.0,), slope=1.0, n=1):
    g = affine_field(Grid(1, n, box=UNIT), [[slope]])
    return HierarchicalDeformation(g, tuple(np.full((1, 1), v) for v in levels))


# primitives


def test_primitive_1d_is_running_integral():
    grid = Grid(1, 4, box=UNIT)
    f = np.array([1.0, -1.0, 2.0, 0.0])
    u = primitive_field(grid, f)
    assert np.array_equal(u.slopes[:, 0, 0], f)
    ends = u(np.array([[0.0], [0.25], [0.5], [0.75], [1.0 - 1e-15]]))[:, 0]
    assert ends == pytest.approx([0.0, 0.25, 0.0, 0.5, 0.5], abs=1e-14)
    assert jump_mass(u) == pytest.approx(0.0, abs=1e-14)
    assert primitive_constant(u, f) == 0.0


def test_primitive_laminate_2d():
    grid = Grid(2, 4)
    m = grid.n_elements
    centers = primitive_field(grid, np.zeros((2, 2))).mesh.centers
    # f depends on x_1 only; its second column jumps, so u must jump
    f = np.zeros((m, 2, 2))
    f[:, 0, 0] = 1.0
    f[:, 0, 1] = np.where(centers[:, 0] > 0, 1.0, -1.0)
    u = primitive_field(grid, f)
    assert np.array_equal(u.slopes, f)
    assert jump_mass(u) > 0
    assert primitive_constant(u, f) > 0


def test_primitive_unsupported():
    grid = Grid(2, 2)
    c = primitive_field(grid, np.zeros((2, 2))).mesh.centers
    f = np.zeros((4, 2, 2))
    f[:, 0, 0] = np.sign(c[:, 0]) * np.sign(c[:, 1])
    with pytest.raises(UnsupportedConstruction):
        primitive_field(grid, f)
    with pytest.raises(ValueError):
        primitive_field(grid, np.zeros((2, 2)), direction=[0.0, 0.0])


# staircases


def test_staircase_examples():
    u = affine_field(Grid(1, 1, box=UNIT), [[1.0]])
    s = staircase(u, 8)
    assert s.offsets[:, 0] == pytest.approx(np.arange(8) / 8)
    assert l1_distance(s, u) == pytest.approx(1 / 16, abs=1e-15)
    c = constant_field(Grid(2, 3), [1.0, 2.0])
    sc = staircase(c, 5)
    assert np.all(sc.offsets == np.array([1.0, 2.0]))
    assert staircase(u, 8, sampling="midpoint").offsets[0, 0] == pytest.approx(1 / 16)
    with pytest.raises(ValueError):
        staircase(u, 0)


def test_staircase_total_variation_converges_in_1d():
    rng = np.random.default_rng(3)
    grid = Grid(1, 4, box=UNIT)
    u = SBVField(grid, rng.normal(size=(4, 1)), rng.normal(size=(4, 1, 1)))
    s = staircase(u, 32)
    assert total_variation(s) == pytest.approx(total_variation(u), rel=0.05)
    assert total_variation(staircase(u, 128)) == pytest.approx(total_variation(u), rel=0.02)


# hierarchical sequences


def test_single_level_fixture_distances():
    t = target_1d()
    for n in (4, 8, 16, 32):
        a = build_hierarchical_sequence(ApproximationPlan(t, (n,)))
        assert np.all(a.field.slopes == 0.0)
        assert l1_distance(a.field, t.g) == pytest.approx(1 / (2 * n), abs=1e-12)


def test_two_level_fixture_gradient_is_last_level():
    t = target_1d(levels=(0.5, 0.0))
    for idx in ((4, 8), (8, 4), (3, 5)):
        a = build_hierarchical_sequence(ApproximationPlan(t, idx))
        assert np.all(a.field.slopes == 0.0)
        assert np.all(a.partials[0].slopes == 0.5)
        assert a.field.grid.n == np.lcm(*idx)


def test_classical_target_returns_g():
    g = affine_field(Grid(2, 2), [[1.0, 2.0], [0.0, -1.0]])
    t = HierarchicalDeformation(g, (g.slopes,))
    a = build_hierarchical_sequence(ApproximationPlan(t, (4,)))
    assert l1_distance(a.field, g) == pytest.approx(0.0, abs=1e-12)


def test_plan_validation():
    t = target_1d(levels=(0.5, 0.0))
    with pytest.raises(ValueError):
        ApproximationPlan(t, (4,))
    with pytest.raises(ValueError):
        ApproximationPlan(t, (4, 0))
    with pytest.raises(ValueError):
        ApproximationPlan(t, (4, 4), mode="spline")
    g = affine_field(Grid(2, 2, split="crossed"), np.eye(2))
    with pytest.raises(ValueError):
        ApproximationPlan(HierarchicalDeformation(g, (np.zeros((2, 2)),)), (2,))


def test_laminate_2d_sequence():
    g = affine_field(Grid(2, 2), np.eye(2))
    t = HierarchicalDeformation(g, (np.diag([0.0, 1.0]),))
    a = build_hierarchical_sequence(ApproximationPlan(t, (8,)))
    assert np.all(a.field.slopes == np.diag([0.0, 1.0]))
    # the staircase runs along x_1 only: distance 1/(2n) times the side length
    assert l1_distance(a.field, g) == pytest.approx(1 / 16, rel=1e-10)


# diagnostics


def test_verify_convergence_two_levels(tmp_path):
    t = target_1d(levels=(0.5, 0.0))
    fam = build_family(t, [(4, 8, 16), (4, 8, 16)])
    rep = verify_convergence(fam, t, tolerance=0.05)
    assert rep.flags["l1_monotone"] and rep.flags["moments_monotone"]
    assert rep.passed
    assert len(rep.csv_rows()) == 10
    loaded = family_from_json(json.loads(json.dumps(family_to_json(fam))))
    again = verify_convergence(loaded, t, tolerance=0.05)
    assert again.as_dict() == rep.as_dict()


def test_verify_convergence_needs_full_grid():
    t = target_1d(levels=(0.5, 0.0))
    fam = build_family(t, [(4, 8), (4, 8)])
    del fam.members[(8, 8)]
    with pytest.raises(ValueError):
        verify_convergence(fam, t)
    with pytest.raises(ValueError):
        family_from_json({"version": "sbvfamily-v0"})


def test_battery_contents():
    b = default_battery(2)
    assert len(b) == 9 + 8
    P = np.array([[0.5, 0.25]])
    assert b[0].fn(P) == pytest.approx([1.0])


def test_tv_bound_fixture():
    t = target_1d()
    assert sd_norm(t) == pytest.approx(1.5)
    rep = verify_tv_bound(build_family(t, [(4, 8, 16, 32)]), t)
    # |Du_n| = (n - 1)/n saturates at 1
    assert rep.ratios == pytest.approx([(n - 1) / n / 1.5 for n in (4, 8, 16, 32)], rel=1e-12)
    assert rep.bounded
    assert rep.constant <= 1.0


def test_tv_bound_classical_target():
    g = affine_field(Grid(1, 2, box=UNIT), [[2.0]])
    t = HierarchicalDeformation(g, (g.slopes,))
    rep = verify_tv_bound(build_family(t, [(4, 8)]), t)
    assert rep.constant <= 1.0 + 1e-12
    with pytest.raises(ValueError):
        verify_tv_bound(build_family(target_1d((0.5, 0.0)), [(4,), (4,)]), target_1d((0.5, 0.0)))


def test_tv_bound_random_laminate():
    rng = np.random.default_rng(11)
    grid = Grid(1, 4, box=UNIT)
    g = SBVField(grid, rng.normal(size=(4, 1)), rng.normal(size=(4, 1, 1)))
    t = HierarchicalDeformation(g, (rng.normal(size=(4, 1, 1)),))
    rep = verify_tv_bound(build_family(t, [(4, 8, 16, 32, 64)]), t)
    assert rep.bounded


@settings(max_examples=40, deadline=None)
@given(
    st.lists(st.floats(-3, 3), min_size=3, max_size=3),
    st.lists(st.floats(-3, 3), min_size=3, max_size=3),
    st.integers(1, 6),
    st.integers(1, 6),
)
def test_gradient_is_last_level_and_l1_shrinks(gslopes, levels, n1, n2):
    grid = Grid(1, 3, box=UNIT)
    g = SBVField(grid, np.zeros((3, 1)), np.array(gslopes).reshape(3, 1, 1))
    G1 = np.array(levels).reshape(3, 1, 1)
    t = HierarchicalDeformation(g, (G1, np.zeros((3, 1, 1))))
    a = build_hierarchical_sequence(ApproximationPlan(t, (n1, n2)))
    assert np.all(a.field.slopes == 0.0)
    one = HierarchicalDeformation(g, (G1,))
    d = [l1_distance(build_hierarchical_sequence(ApproximationPlan(one, (3 * 2**k,))).field, g) for k in range(3)]
    assert d[1] <= d[0] + 1e-12 and d[2] <= d[1] + 1e-12
