"""Acceptance criteria, one test per criterion.

Each test records a single PASS/FAIL line; the lines are printed at the end
of the pytest run (and by ``python tests/test_acceptance.py``).
"""

import json
import os
import subprocess
import sys
import tempfile
import time
from pathlib import Path

import numpy as np
import pytest

from hsdrelax.approx import ApproximationPlan, build_family, build_hierarchical_sequence, l1_distance, verify_tv_bound
from hsdrelax.cellsolver import (
    BulkProblem,
    SolverOptions,
    SurfaceProblem,
    clear_memo,
    solve_bulk,
    solve_surface,
    surface_grid,
)
from hsdrelax.core import SamplingPlan, check_density_class, make_pair
from hsdrelax.hierarchy import NESTED, ORACLE, HierarchicalDeformation, assign_energy, base_handle, handle_for
from hsdrelax.oracle import exact_psik, exact_Wk
from hsdrelax.sbvmesh import Grid, SBVField, affine_field

from oracles import labeling_minimum

RESULTS = {}

TITLES = {
    1: "bulk identity, 1D exact mode",
    2: "bulk identity, 2D numeric mode",
    3: "surface stability",
    4: "stage-2 recursion",
    5: "hierarchical energy fixtures",
    6: "approximation sequences",
    7: "density-class ledger",
    8: "density estimates, sampled",
    9: "CLI determinism",
}


def record(k, ok, detail):
    RESULTS[k] = (bool(ok), detail)
    line = f"criterion {k} [{'PASS' if ok else 'FAIL'}] {TITLES[k]}: {detail}"
    print(line)
    return line


def summary_lines():
    return [
        f"criterion {k} [{'PASS' if RESULTS[k][0] else 'FAIL'}] {TITLES[k]}: {RESULTS[k][1]}"
        if k in RESULTS
        else f"criterion {k} [NOT RUN] {TITLES[k]}"
        for k in sorted(TITLES)
    ]


X1, X2 = np.zeros(1), np.zeros(2)


def test_criterion_1_bulk_1d_exact():
    pair = make_pair(surface="norm-interfacial")
    rng = np.random.default_rng(101)
    samples = rng.uniform(-3, 3, size=(50, 2))
    t0 = time.perf_counter()
    worst = 0.0
    for a, b in samples:
        v = solve_bulk(BulkProblem(X1, [[a]], [[b]], pair, 8)).value
        ref = b * b + abs(a - b)
        worst = max(worst, abs(v - ref) / ref)
    dt = time.perf_counter() - t0
    ok = worst <= 1e-8 and dt < 1.0
    record(1, ok, f"max rel error {worst:.3g} (tol 1e-8), {dt:.3f} s (limit 1 s)")
    assert ok


def test_criterion_2_bulk_2d_numeric():
    pair = make_pair()
    rng = np.random.default_rng(202)
    clear_memo()
    t0 = time.perf_counter()
    worst, monotone = 0.0, True
    for _ in range(10):
        A, B = rng.uniform(-2, 2, (2, 2)), rng.uniform(-2, 2, (2, 2))
        vals = [solve_bulk(BulkProblem(X2, A, B, pair, n)).value for n in (4, 8, 16)]
        ref = exact_Wk(A, [B])
        worst = max(worst, abs(vals[-1] - ref) / ref)
        monotone &= vals[1] <= vals[0] and vals[2] <= vals[1]
    dt = time.perf_counter() - t0
    ok = worst <= 0.10 and monotone and dt < 300
    record(2, ok, f"max rel error at n=16 {worst:.4f} (tol 0.10), nonincreasing={monotone}, {dt:.1f} s (limit 300 s)")
    assert ok


def test_criterion_3_surface_stability():
    pair = make_pair()
    rng = np.random.default_rng(303)
    worst = 0.0
    for _ in range(20):
        lam = rng.uniform(-2, 2, 2)
        th = rng.uniform(0, 2 * np.pi)
        nu = np.array([np.cos(th), np.sin(th)])
        v = solve_surface(SurfaceProblem(X2, lam, nu, pair, 8)).value
        ref = exact_psik(lam, nu)
        worst = max(worst, abs(v - ref) / ref)
    # exhaustive two-value labelings on a 3x3 grid
    gap, below = 0.0, 0.0
    for _ in range(5):
        lam = rng.uniform(-2, 2, 2)
        th = rng.uniform(0, 2 * np.pi)
        nu = np.array([np.cos(th), np.sin(th)])
        best, _ = labeling_minimum(surface_grid(nu, 3), lam, nu, lambda J, n: np.abs(J @ n))
        v = solve_surface(SurfaceProblem(X2, lam, nu, pair, 3)).value
        gap = max(gap, abs(best - v))
        below = max(below, exact_psik(lam, nu) - best)
    ok = worst <= 0.02 and gap <= 1e-6 and below <= 1e-6
    record(3, ok, f"max rel error {worst:.3g} (tol 0.02); labeling oracle gap {gap:.3g}, "
                  f"best labeling below psi by {max(below, 0.0):.3g} (tol 1e-6)")
    assert ok


def test_criterion_4_stage_two_recursion():
    pair = make_pair()
    rng = np.random.default_rng(404)
    root = base_handle(pair, backend=NESTED)
    worst1 = 0.0
    for _ in range(20):
        a, b2, b1 = rng.uniform(-3, 3, 3)
        v = handle_for(root, [[[b2]], [[b1]]]).W(X1, [[a]])
        worst1 = max(worst1, abs(v - exact_Wk([[a]], [[[b2]], [[b1]]])))
    rng = np.random.default_rng(4)
    root2 = base_handle(pair, backend=NESTED, n=8, options=SolverOptions(restarts=2))
    worst2 = 0.0
    for _ in range(5):
        A, B2, B1 = [rng.uniform(-2, 2, (2, 2)) for _ in range(3)]
        v = handle_for(root2, [B2, B1]).W(X2, A)
        ref = exact_Wk(A, [B2, B1])
        worst2 = max(worst2, abs(v - ref) / ref)
    ok = worst1 <= 1e-6 and worst2 <= 0.10
    record(4, ok, f"1D max abs error {worst1:.3g} (tol 1e-6); 2D n=8 max rel error {worst2:.4f} (tol 0.10)")
    assert ok


def _fixture(jump):
    grid = Grid(1, 2, box=((0.0, 1.0),))
    g = affine_field(grid, [[1.0]])
    g = SBVField(grid, g.offsets + np.array([[0.0], [jump]]), g.slopes)
    return HierarchicalDeformation(g, (np.full((1, 1), 0.5), np.zeros((1, 1))))


def test_criterion_5_energy():
    pair = make_pair()
    e0 = assign_energy(_fixture(0.0), pair, backend=ORACLE).total
    e2 = assign_energy(_fixture(2.0), pair, backend=ORACLE).total
    ok = abs(e0 - 1.0) <= 1e-10 and abs(e2 - 3.0) <= 1e-10
    record(5, ok, f"smooth {e0!r} (expected 1), jump {e2!r} (expected 3), tol 1e-10")
    assert ok


def test_criterion_6_approximation():
    grid = Grid(1, 1, box=((0.0, 1.0),))
    g = affine_field(grid, [[1.0]])
    two = HierarchicalDeformation(g, (np.full((1, 1), 0.5), np.zeros((1, 1))))
    grad_ok = True
    for idx in ((4, 4), (4, 8), (8, 4), (16, 32), (3, 7)):
        u = build_hierarchical_sequence(ApproximationPlan(two, idx)).field
        grad_ok &= bool(np.all(u.slopes == two.level(2)[0]))
    one = HierarchicalDeformation(g, (np.zeros((1, 1)),))
    ns = (4, 8, 16, 32)
    l1_err = max(
        abs(l1_distance(build_hierarchical_sequence(ApproximationPlan(one, (n,))).field, g) - 1 / (2 * n)) for n in ns
    )
    tv = verify_tv_bound(build_family(one, [ns]), one)
    spread = tv.constant / tv.ratios[0] - 1.0
    tv_ok = tv.bounded and spread <= 0.01
    ok = grad_ok and l1_err <= 1e-12 and tv_ok
    record(6, ok, f"grad u = G_2 on every cell: {grad_ok}; max |L1 - 1/(2n)| {l1_err:.3g} (tol 1e-12); "
                  f"TV ratios {[round(r, 4) for r in tv.ratios]}, max exceeds n=4 value by {spread:.2%} (tol 1%)")
    assert grad_ok and l1_err <= 1e-12
    assert tv_ok, "TV constant grows with n: the staircase has |Du_n| = (n-1)/n"


def test_criterion_7_density_class():
    from dataclasses import replace

    rep = check_density_class(make_pair())
    sq = replace(
        make_pair(surface="norm-interfacial"),
        surface=lambda x, lam, nu: float(np.sum(np.asarray(lam) ** 2)),
        surface_kernel=None,
        surface_name="norm-squared",
    )
    bad = check_density_class(sq, SamplingPlan(count=128))
    v = bad.verdicts["homogeneity"]
    w = v.witness or {}
    witness_ok = False
    if {"lam", "t"} <= set(w):
        lam, t = np.array(w["lam"]), float(w["t"])
        witness_ok = abs(np.sum((t * lam) ** 2) - t * np.sum(lam**2)) > 1e-6
    ok = rep.passed and not v.passed and witness_ok
    record(7, ok, f"catalog pair passes all {len(rep.verdicts)} properties: {rep.passed}; "
                  f"|lam|^2 fails homogeneity: {not v.passed}, witness verified: {witness_ok}")
    assert ok


def test_criterion_8_estimates():
    pair = make_pair()
    p = 2.0
    rng = np.random.default_rng(808)
    S = rng.uniform(-3, 3, size=(1000, 3))

    def H(a, b):
        return solve_bulk(BulkProblem(X1, [[a]], [[b]], pair, 8)).value

    rows = [(a, b1, b2, H(a, b1), H(a, b2)) for a, b1, b2 in S]
    ratios = [
        abs(h1 - h2) / (abs(b1 - b2) * (1 + abs(b1) ** (p - 1) + abs(b2) ** (p - 1)))
        for a, b1, b2, h1, h2 in rows
        if b1 != b2
    ]
    C = max(ratios)
    lip_ok = all(
        abs(h1 - h2) <= C * abs(b1 - b2) * (1 + abs(b1) ** (p - 1) + abs(b2) ** (p - 1)) * (1 + 1e-12)
        for a, b1, b2, h1, h2 in rows
    )
    # two-sided bound c (|A| + |B|^p) - 1/c <= H <= C (1 + |A| + |B|^p)
    X = np.array([abs(a) + abs(b1) ** p for a, b1, _, _, _ in rows])
    Hs = np.array([h1 for *_, h1, _ in rows])
    c_lo = float(np.min((Hs + np.sqrt(Hs**2 + 4 * X)) / (2 * X)))
    C_hi = float(np.max(Hs / (1 + X)))
    two_ok = bool(np.all(c_lo * X - 1 / c_lo <= Hs + 1e-12) and np.all(Hs <= C_hi * (1 + X) + 1e-12))
    ok = lip_ok and two_ok and C <= 1.0 + 1e-12 and c_lo >= 0.5 and C_hi <= 1.5
    record(8, ok, f"fitted Lipschitz constant {C:.4f} (bound 1); fitted lower constant {c_lo:.4f} (bound 1/2), "
                  f"upper constant {C_hi:.4f} (bound 3/2); inequalities hold on 1000 samples: {lip_ok and two_ok}")
    assert ok


CLI_CONFIGS = {
    "relax-bulk": {"N": 2, "resolutions": [2, 4], "samples": 2, "solver": {"restarts": 2}},
    "relax-surface": {"N": 2, "n": 4, "samples": 3},
    "recurse": {"N": 1, "stage": 2, "backend": "nested-solver", "samples": 5},
    "energy": {"deformation": "fixture.json"},
    "approximate": {"deformation": "fixture.json", "indices": [[4, 8], [4, 8]]},
    "check-class": {"sampling": {"count": 64}},
    "verify-example": {
        "bulk": {"samples": 1, "n": 4},
        "surface": {"samples": 2, "n": 4},
        "stage2": {"samples_1d": 3, "samples_2d": 0},
    },
}


def test_criterion_9_cli_determinism():
    env = dict(os.environ)
    env.pop("HSDRELAX_OUT", None)
    env.pop("HSDRELAX_CACHE", None)
    mismatched = []
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        (tmp / "fixture.json").write_text(json.dumps(_fixture(2.0).to_json()))
        for cmd, cfg in CLI_CONFIGS.items():
            path = tmp / f"{cmd}.json"
            path.write_text(json.dumps(cfg))
            outs = []
            for run in ("a", "b"):
                out = tmp / run / cmd
                proc = subprocess.run(
                    [sys.executable, "-m", "hsdrelax", cmd, "--config", str(path), "--seed", "12345", "--out", str(out)],
                    capture_output=True,
                    env=env,
                )
                if proc.returncode != 0:
                    mismatched.append(f"{cmd} exit {proc.returncode}")
                outs.append({f.name: f.read_bytes() for f in sorted(out.iterdir())} if out.exists() else {})
            if not outs[0] or outs[0] != outs[1]:
                mismatched.append(cmd)
    ok = not mismatched
    record(9, ok, f"{len(CLI_CONFIGS)} subcommands rerun in fresh processes; "
                  + ("all outputs byte-identical" if ok else f"differences: {mismatched}"))
    assert ok


if __name__ == "__main__":
    code = pytest.main([__file__, "-q", "-p", "no:cacheprovider"])
    sys.exit(code)
