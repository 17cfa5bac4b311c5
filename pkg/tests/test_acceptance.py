"""End-to-end acceptance checks, one test per criterion.

Each test records a PASS/FAIL line (shown in the terminal summary) and then
asserts.  The desk-scale runs (criteria 3, 6, 7, 8) take minutes; reference
fields are cached under ``$MRLT_CACHE`` (default ``.mrlt_cache``).
"""

from fractions import Fraction as F

import numpy as np
import pytest

from mrlt import lt_scheduler as lt
from mrlt.cli_runner import RunConfig, convergence_harness, reference_run_manager, simulate
from mrlt.diagnostics import amplification_polynomial, gain_lambda, cost_mu, interface_error_terms, l1_error
from mrlt.models import euler_pressure, get_problem
from mrlt.mr_analysis import inverse_transform, mr_transform, project_tree
from mrlt.stepping import cell_averages, run_mr, run_uniform
from mrlt.time_schemes import SchemeKind
from mrlt.tree_mesh import BoundarySpec, uniform_tree

S = SchemeKind


def uniform_tree_with(model, L):
    tree = uniform_tree(model.d, L, model.ncomp, model.bounds, model.boundary)
    tree.data["q_new"][L][:] = cell_averages(model, L).reshape(model.ncomp, -1)
    project_tree(tree, "q_new")
    for k in range(L + 1):
        tree.data["q_n"][k][:] = tree.data["q_new"][k]
    return tree


def leaf_range(tree, slot="q_new", comp=0):
    lo, hi = np.inf, -np.inf
    for k in range(tree.L + 1):
        leaves = tree.topology(k).leaves
        if leaves.size:
            v = tree.data[slot][k][comp, leaves]
            lo, hi = min(lo, v.min()), max(hi, v.max())
    return lo, hi


def desk_run(problem, scheme, L, epsilon, on_step=None, **kw):
    model = get_problem(problem)
    d = model.defaults
    cfg = RunConfig(
        problem=problem,
        scheme=S.parse(scheme),
        max_level=L,
        epsilon=epsilon,
        cfl=kw.get("cfl", d["cfl"]),
        tend=kw.get("tend", d["tend"]),
    ).validate()
    return simulate(cfg, model, on_step), model, cfg


def reference(problem, L_ref, level, cfg, cache):
    return reference_run_manager(problem, L_ref, level, cfl=cfg.cfl, tend=cfg.tend, cache_dir=cache)


# ---------------------------------------------------------------------------
# 1


def test_c1_perfect_reconstruction(verdict):
    rng = np.random.default_rng(2024)
    worst = 0.0
    for i in range(20):
        d = (1, 2)[i % 2]
        L = int(rng.integers(4, 9))
        f = rng.standard_normal((2**L,) * d)
        bc = BoundarySpec.uniform(d, ("neumann", "periodic")[(i // 2) % 2])
        details, root = mr_transform(f, bc)
        worst = max(worst, float(np.abs(inverse_transform(details, root, bc) - f).max()))
    ok = worst <= 1e-12
    verdict("C1 perfect reconstruction", ok, f"max abs error {worst:.2e} over 20 fields")
    assert ok


# ---------------------------------------------------------------------------
# 2


def test_c2_amplification_polynomials(verdict):
    checks = {
        "uniform RK3": amplification_polynomial(S.MR_RK3, "uniform") == [1, 1, F(1, 2), F(1, 6)],
        "fine side": amplification_polynomial(S.MRLT_NERK3, "fine-side") == [1, 1, F(1, 2), F(1, 12), F(1, 24)],
        "coarse side": amplification_polynomial(S.MRLT_NERK3, "coarse-side")
        == [1, 1, F(1, 2), F(1, 8), F(1, 144), F(1, 576)],
    }
    eps = interface_error_terms(S.MRLT_NERK3)
    checks["eps1"] = eps["eps1"].is_zero()
    checks["eps2"] = eps["eps2"] == [0, 0, F(-1, 4)]
    checks["eps3"] = eps["eps3"] == [0, 0, F(1, 8), F(-1, 16)]
    checks["eps4"] = eps["eps4"] == [0, 0, F(1, 8), F(-1, 96), F(-1, 384)]
    bad = [k for k, v in checks.items() if not v]
    ok = not bad
    verdict("C2 amplification polynomials", ok, "mismatch: " + ", ".join(bad) if bad else "all exact")
    assert ok


# ---------------------------------------------------------------------------
# 3

C3_WINDOWS = {
    S.FV_RK2: (1.9, 2.1),
    S.MR_RK2: (1.9, 2.1),
    S.MRLT_RK2: (0.8, 1.2),
    S.MRLT_NERK2: (1.9, 2.1),
    S.FV_RK3: (2.9, 3.1),
    S.MR_RK3: (2.9, 3.1),
    S.MRLT_NERK3: (1.7, 2.1),
}


@pytest.fixture(scope="module")
def convergence_table():
    return convergence_harness(tuple(C3_WINDOWS))


@pytest.mark.parametrize("scheme", list(C3_WINDOWS), ids=lambda s: s.value)
def test_c3_convergence_order(scheme, convergence_table, verdict):
    lo, hi = C3_WINDOWS[scheme]
    p = convergence_table[scheme][:2]
    ok = all(lo <= x <= hi for x in p)
    verdict(f"C3 convergence {scheme.value}", ok, f"p = {p[0]:.4f}, {p[1]:.4f}; window [{lo}, {hi}]")
    assert ok


# ---------------------------------------------------------------------------
# 4


@pytest.mark.parametrize("lt_scheme, mr_scheme", [(S.MRLT_NERK2, S.MR_RK2), (S.MRLT_NERK3, S.MR_RK3)])
def test_c4_lt_degeneracy(lt_scheme, mr_scheme, verdict):
    model = get_problem("advection")
    L = 6
    dt = 0.5 / 2**L
    tend = 2**L * 4 * dt
    a = lt.run_lt(model, lt_scheme, uniform_tree_with(model, L), 0.5, tend, None, dt)
    b = run_mr(model, mr_scheme, uniform_tree_with(model, L), 0.5, tend, None, dt)
    diff = float(np.abs(a.uniform - b.uniform).max())
    ok = a.steps == b.steps == 2**L * 4 and diff <= 1e-12
    verdict(f"C4 degeneracy {lt_scheme.value} vs {mr_scheme.value}", ok, f"max diff {diff:.1e} after {b.steps} steps")
    assert ok


# ---------------------------------------------------------------------------
# 5


def test_c5_uniform_conservation(verdict):
    model = get_problem("burgers1d")
    L = 8
    dx = 1.0 / 2**L
    q0 = cell_averages(model, L)
    dt = 0.5 * dx / float(np.abs(q0).max())
    res = run_uniform(model, 2, L, 0.5, 1000 * dt, dt)
    m0, m1 = q0.sum() * dx, res.uniform.sum() * dx
    drift = abs(m1 - m0) / abs(m0)
    ok = res.steps == 1000 and drift <= 1e-12
    verdict("C5 conservation burgers1d FV/RK2", ok, f"relative drift {drift:.1e}")
    assert ok


# ---------------------------------------------------------------------------
# 6


def test_c6_burgers_desk_scale(reference_cache, verdict):
    lt_run, model, cfg = desk_run("burgers2d", "mrlt-nerk2", 8, 0.01)
    mr_run, _, _ = desk_run("burgers2d", "mr-rk2", 8, 0.01)
    ref = reference("burgers2d", 10, 8, cfg, reference_cache)
    e = float(l1_error(lt_run.uniform, ref, 8, 2)[0])
    c = lt_run.mean_compression
    ok_e = verdict("C6 burgers e_L1 MRLT/NERK2", 0.4e-2 <= e <= 3.5e-2, f"e = {e:.4e}; window [4e-3, 3.5e-2]")
    ok_t = verdict(
        "C6 burgers wall time MRLT/NERK2 < MR/RK2",
        lt_run.wall_time < mr_run.wall_time,
        f"{lt_run.wall_time:.1f}s vs {mr_run.wall_time:.1f}s",
    )
    ok_c = verdict("C6 burgers mean compression", c <= 35.0, f"{c:.2f}% (limit 35%)")
    assert ok_e and ok_t and ok_c


# ---------------------------------------------------------------------------
# 7


def test_c7_flame_desk_scale(reference_cache, verdict):
    L, eps = 10, 0.01
    seen = {"lo": np.inf, "hi": -np.inf}

    def watch(_count, _t, state):
        lo, hi = leaf_range(state) if hasattr(state, "topology") else (state.min(), state.max())
        seen["lo"], seen["hi"] = min(seen["lo"], lo), max(seen["hi"], hi)

    mr, model, cfg = desk_run("flame1d", "mr-rk2", L, eps, watch)
    lt_run, _, _ = desk_run("flame1d", "mrlt-nerk2", L, eps, watch)
    mr_half, _, _ = desk_run("flame1d", "mr-rk2", L, eps / 2, watch)
    fv, _, _ = desk_run("flame1d", "fv-rk2", L, 0.0, watch)
    ref = reference("flame1d", 12, L, cfg, reference_cache)

    e_mr = float(l1_error(mr.uniform, ref, L, 1)[0])
    e_lt = float(l1_error(lt_run.uniform, ref, L, 1)[0])
    ratio = max(e_mr, e_lt) / min(e_mr, e_lt)
    ok_order = verdict("C7 flame MR vs MRLT errors within 3x", ratio <= 3.0, f"e_MR {e_mr:.3e}, e_MRLT {e_lt:.3e}")
    ok_range = verdict(
        "C7 flame T within [-0.01, 1.01]",
        seen["lo"] >= -0.01 and seen["hi"] <= 1.01,
        f"observed [{seen['lo']:.4f}, {seen['hi']:.4f}]",
    )
    d_full = float(l1_error(mr.uniform, fv.uniform, L, 1)[0])
    d_half = float(l1_error(mr_half.uniform, fv.uniform, L, 1)[0])
    ok_eps = verdict("C7 flame halving epsilon shrinks MR-FV gap", d_half < d_full, f"{d_full:.3e} -> {d_half:.3e}")
    assert ok_order and ok_range and ok_eps


# ---------------------------------------------------------------------------
# 8


def test_c8_euler_desk_scale(reference_cache, verdict):
    eps = 0.01
    runs = {}
    for scheme, L in [
        ("mrlt-nerk2", 7),
        ("mrlt-nerk2", 8),
        ("mr-rk2", 8),
        ("mrlt-nerk3", 8),
        ("mr-rk3", 8),
    ]:
        runs[scheme, L] = desk_run("euler2d", scheme, L, eps)
    cfg = runs["mr-rk2", 8][2]
    ref8 = reference("euler2d", 9, 8, cfg, reference_cache)
    ref7 = reference("euler2d", 9, 7, cfg, reference_cache)

    worst_rho, worst_p = np.inf, np.inf
    for res, model, _ in runs.values():
        q = res.uniform
        worst_rho = min(worst_rho, float(q[0].min()))
        worst_p = min(worst_p, float(euler_pressure(q, model.params.get("gamma", 1.4)).min()))
    ok_pos = verdict("C8 euler positivity", worst_rho > 0 and worst_p > 0, f"min rho {worst_rho:.3e}, min p {worst_p:.3e}")

    e7 = float(l1_error(runs["mrlt-nerk2", 7][0].uniform, ref7, 7, 2)[0])
    e8 = float(l1_error(runs["mrlt-nerk2", 8][0].uniform, ref8, 8, 2)[0])
    ok_mono = verdict("C8 euler e_L1(rho) decreases L 7 -> 8", e8 < e7, f"{e7:.3e} -> {e8:.3e}")

    ok_gain = True
    for lt_s, mr_s in [("mrlt-nerk2", "mr-rk2"), ("mrlt-nerk3", "mr-rk3")]:
        a, b = runs[lt_s, 8][0], runs[mr_s, 8][0]
        ea = float(l1_error(a.uniform, ref8, 8, 2)[0])
        eb = float(l1_error(b.uniform, ref8, 8, 2)[0])
        lam = gain_lambda(cost_mu(eb, b.wall_time, 1.0), cost_mu(ea, a.wall_time, 1.0))
        ok = a.wall_time < b.wall_time and lam > 1.5
        ok_gain &= verdict(
            f"C8 euler gain {lt_s} over {mr_s}",
            ok,
            f"{a.wall_time:.1f}s vs {b.wall_time:.1f}s, lambda {lam:.2f}",
        )
    assert ok_pos and ok_mono and ok_gain


# ---------------------------------------------------------------------------
# 9

FORMULAS = {
    "projnode (mean)": (lambda a, b, c: lt.project_mean([a, b, c]), None),
    "refreshRk2 (2q(1/2) - qn)": (lambda qn, q: lt.extrapolate_node(qn, q), (0, F(1, 2))),
    "rk3proj": (lambda qn, qa, qc: lt.rk3_proj_end(qn, qa, qc), (0, F(1, 4), F(3, 4))),
    "ProjRK3-1": (lambda qn, qs, qa: lt.proj_rk3_threequarter(qn, qs, qa), (0, 1, F(1, 4))),
    "ProjRK3-2": (lambda qn, qs, qa: lt.proj_rk3_dstar(qn, qs, qa), (0, 1, F(1, 4))),
    "post-evolution": (lambda qn, qs, qh: lt.post_evolution(qn, qs, qh), (0, 1, F(1, 2))),
}
# instant (as a fraction of the step) each formula should land on
TARGETS = {
    "refreshRk2 (2q(1/2) - qn)": 1,
    "rk3proj": 1,
    "ProjRK3-1": F(3, 4),
    "ProjRK3-2": F(1, 2),
    "post-evolution": 1,
}


def test_c9_synchronization_formulas(verdict):
    rng = np.random.default_rng(7)
    failures = []
    for name, (fn, instants) in FORMULAS.items():
        for _ in range(5):
            c = F(int(rng.integers(-50, 50)), int(rng.integers(1, 20)))
            nargs = 3 if instants is None else len(instants)
            if fn(*([c] * nargs)) != c:
                failures.append(f"{name} constant")
            if instants is None:
                continue
            a, b = F(int(rng.integers(-50, 50)), 7), F(int(rng.integers(-50, 50)), 11)
            if fn(*[a + b * th for th in instants]) != a + b * TARGETS[name]:
                failures.append(f"{name} linear")
    # leaf extrapolation q* + dt f(q*) is exact for q' = b, q(t) = a + b t
    a, b, dt = F(3, 5), F(-2, 7), F(1, 9)
    if lt.extrapolate_leaf(a + b * dt, b, dt) != a + 2 * b * dt:
        failures.append("leaf extrapolation linear")
    if lt.quarter_from_dstar(F(0), F(1), lt.proj_rk3_dstar(F(0), F(1), F(1, 4))) != F(1, 4):
        failures.append("ProjRK3-2 inversion")
    failures = sorted(set(failures))
    ok = not failures
    verdict("C9 synchronization formulas", ok, ", ".join(failures) if failures else "constants and linear data exact")
    assert ok
