"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v``; the lines are repeated in the
"acceptance criteria" section of the terminal summary.
"""

import json
import math
import random
import time

import numpy as np
import pytest
from scipy.special import lambertw

from repimm.cli import EXIT_OK, run
from repimm.config import parse_config
from repimm.horizons import horizon_T, horizon_tau, lambert_w
from repimm.kinetic import (
    EnvelopeBounds,
    KineticConfig,
    effective_rates,
    homogeneous_deviation,
    solve,
    solve_picard,
    verify_bounds,
)
from repimm.meso import convergence_report, default_comparison_horizon
from repimm.microsim import (
    WindowSpec,
    exp_moment_series,
    factorial_moments,
    poisson_check,
    simulate_replicas,
    theorem2_series,
    window_counts,
)
from repimm.model import ConstantRate, Potential, ScalarField, SinusoidRate, TorusDomain, potential_stats
from repimm.patches import PatchParams, explicit_alpha1, solve_patch

SEED = 20240601
DOM = TorusDomain(1, 10.0, 100)
TOPHAT = Potential("tophat", 1.0, 0.5)  # mass 1
UNIT = WindowSpec((0.0,), (1.0,))


def test_criterion_01_homogeneous_kinetic_oracle(criterion):
    start = time.perf_counter()
    cfg = KineticConfig(DOM, TOPHAT, ConstantRate(1.0), dt=0.01, t_end=50.0,
                        snapshot_times=tuple(np.arange(5001) * 0.01))
    sol = solve(cfg)
    dev = homogeneous_deviation(sol, 1.0, potential_stats(TOPHAT, DOM).l1_norm)
    elapsed = time.perf_counter() - start
    criterion(1, "homogeneous kinetic oracle", dev <= 1e-6 and elapsed < 5 and len(sol.times) == 5001,
              f"max rel dev {dev:.2e} (<= 1e-6) over {len(sol.times)} snapshots, {elapsed:.2f}s (< 5s)")


def test_criterion_02_envelope_bounds(criterion):
    start = time.perf_counter()
    rate = SinusoidRate(1.0, 0.5, DOM.side_length)
    rho0 = ScalarField.zeros(DOM)
    sol = solve(KineticConfig(DOM, TOPHAT, rate, rho0, dt=0.01, t_end=50.0,
                              snapshot_times=tuple(np.arange(1001) * 0.05)))
    env = EnvelopeBounds(*effective_rates(rate, TOPHAT, rho0))
    rep = verify_bounds(sol, env, rho0, raise_on_violation=False)
    elapsed = time.perf_counter() - start
    worst = min(min(r.min_slack, r.max_slack) for r in rep.rows)
    criterion(2, "envelope bounds", worst >= -1e-9 and elapsed < 10,
              f"worst slack {worst:.2e} (>= -1e-9) over {len(rep.rows)} snapshots x 100 cells, {elapsed:.2f}s")


def test_criterion_03_picard_rk4_cross_oracle(criterion):
    # one contraction segment with b+ T = 0.9, then the same segment length continued to t = 4.5
    worst = 0.0
    for t_end in (0.9, 4.5):
        cfg = KineticConfig(DOM, TOPHAT, ConstantRate(1.0), dt=0.01, t_end=t_end)
        pic = solve_picard(cfg, horizon=0.9)
        rk = solve(cfg)
        worst = max(worst, float(np.max(np.abs(pic.densities - rk.densities))))
    criterion(3, "Picard vs RK4", worst <= 1e-8, f"sup-norm gap {worst:.2e} (<= 1e-8)")


def test_criterion_04_patch_invariant_and_instability(criterion):
    start = time.perf_counter()
    p = PatchParams(1.0, 2.0, 0.5)
    traj = solve_patch(p, 1e4, 0.01)
    resid = float(np.max(np.abs(traj.invariant_residuals())))
    a3, a4 = traj.at(1e3), traj.at(1e4)
    grow_a = a4.rho_A - a3.rho_A
    grow_b = a4.rho_B - a3.rho_B
    q = PatchParams(1.0, 2.0, 1.0)
    one = solve_patch(q, 100.0, 0.01)
    dev1 = max(
        max(abs(one.rho_A[i] - e.rho_A), abs(one.rho_B[i] - e.rho_B))
        for i in range(len(one.t))
        for e in (explicit_alpha1(1.0, 2.0, float(one.t[i])),)
    )
    elapsed = time.perf_counter() - start
    ok = resid <= 1e-8 and grow_a <= 0.05 * 2 * math.log(2) and grow_b >= 0.5 and dev1 <= 1e-6 and elapsed < 30
    criterion(4, "patch invariant and instability", ok,
              f"|residual| {resid:.2e}, rho_A gain {grow_a:.4f} (<= {0.1 * math.log(2):.4f}), "
              f"rho_B gain {grow_b:.3f} (>= 0.5), alpha=1 dev {dev1:.2e}, {elapsed:.2f}s")


def test_criterion_05_free_case_poisson_law(criterion):
    start = time.perf_counter()
    logs = simulate_replicas(ConstantRate(1.0), Potential("tophat", 0.0, 1.0), TorusDomain(1, 10.0, 20),
                             5.0, SEED, 1000)
    counts = window_counts(logs, UNIT, [5.0])[:, 0]
    pc = poisson_check(counts, 5.0)
    elapsed = time.perf_counter() - start
    criterion(5, "free-case Poisson law", pc.passed and elapsed < 10,
              f"mean {pc.mean:.3f} (|.-5| <= {pc.mean_tolerance:.3f}), var/mean {pc.dispersion:.3f}, "
              f"p {pc.p_value:.3f} (> 0.01), {elapsed:.2f}s")


@pytest.fixture(scope="module")
def repulsive_run():
    start = time.perf_counter()
    logs = simulate_replicas(ConstantRate(1.0), Potential("tophat", 1.0, 1.0), TorusDomain(1, 10.0, 20),
                             100.0, SEED, 200)
    return logs, time.perf_counter() - start


def test_criterion_06_log_bound_and_exponential_moment(criterion, repulsive_run):
    logs, sim_time = repulsive_run
    start = time.perf_counter()
    times = np.linspace(0.0, 100.0, 101)
    series = theorem2_series(logs, UNIT, times, r=1.0, phi_star=1.0, b_bar=1.0)
    ex = exp_moment_series(logs, UNIT, 1.0, times, r=1.0, b_bar=1.0)
    elapsed = sim_time + time.perf_counter() - start
    # the linear ceiling is 1 + (e - 1) * upsilon * t with upsilon = 1 for r = 1 in one dimension
    linear = 1 + math.expm1(1.0) * times
    ok = bool(series.passed.all() and ex.passed.all()) and np.allclose(ex.bound, linear) and elapsed < 120
    s1 = float(np.min(series.bound + 3 * series.moments.stderr - series.moments.mean))
    s2 = float(np.min(ex.bound + 3 * ex.stderr - ex.mean))
    criterion(6, "log bound and exponential moment", ok,
              f"{len(times)} times in [0,100]; min slack {s1:.3f} (mean) and {s2:.3f} (exp moment), "
              f"mean N(100) {series.moments.mean[-1]:.3f} vs bound {series.bound[-1]:.3f}, {elapsed:.2f}s")


def test_criterion_07_sub_poisson_factorial_moments(criterion, repulsive_run):
    logs, _ = repulsive_run
    details, ok = [], True
    for t in (1.0, 5.0, 25.0, 50.0, 100.0):
        for f in factorial_moments(logs, UNIT, t, 3, b_bar=1.0)[1:]:
            ok &= f.passed and f.ceiling == pytest.approx((1.0 * t * UNIT.volume) ** f.m)
            details.append(f"m={f.m},t={t:g}: {f.value:.3g}<={f.ceiling:.3g}")
    criterion(7, "sub-Poisson factorial moments", ok, "; ".join(details[:4]) + "; ...")


def _meso_inputs():
    dom = TorusDomain(1, 10.0, 20)
    pot = Potential("gaussian", 1.0, 0.5)
    rate = ConstantRate(1.0)
    T = default_comparison_horizon(0.0, rate.b_bar, potential_stats(pot, dom).l1_norm, cap=1.0)
    sol = solve(KineticConfig(dom, pot, rate, dt=T / 20, t_end=T, snapshot_times=tuple(np.linspace(0, T, 11))))
    return dom, pot, rate, T, sol


def test_criterion_08_mesoscopic_convergence(criterion):
    start = time.perf_counter()
    dom, pot, rate, T, sol = _meso_inputs()
    rep = convergence_report(rate, pot, sol, [1.0, 0.5, 0.25, 0.125], T, 4000, SEED, threads=4)
    elapsed = time.perf_counter() - start
    errs = {s.epsilon: s.sup_error for s in rep.summaries}
    ok = rep.monotone and errs[0.125] < errs[0.5] and not rep.extrapolated and elapsed < 600
    criterion(8, "mesoscopic convergence", ok,
              f"T={T:.5f}, 4000 replicas/eps, sup errors "
              + ", ".join(f"{e:g}:{v:.4f}" for e, v in errs.items()) + f", {elapsed:.2f}s")


def test_criterion_09_horizon_formulas(criterion):
    rng = random.Random(SEED)
    worst_forms, worst_scipy, worst_T = 0.0, 0.0, -math.inf
    for _ in range(100):
        theta0, b_bar, l1 = rng.uniform(-5, 5), rng.uniform(0.01, 10), rng.uniform(0.01, 10)
        h = horizon_tau(theta0, b_bar, l1)
        worst_forms = max(worst_forms, abs(h.tau - h.tau_alt) / h.tau)
        ref = lambertw(math.exp(-theta0) / l1).real
        worst_scipy = max(worst_scipy, abs(h.delta - ref) / ref)
        for gap in np.geomspace(1e-3, 20, 25):
            worst_T = max(worst_T, horizon_T(theta0, theta0 + gap, b_bar, l1) / h.tau)
    resid = max(abs(lambert_w(z) * math.exp(lambert_w(z)) - z) for z in np.linspace(0, 10, 1001))
    ok = worst_forms <= 1e-12 and resid <= 1e-12 and worst_T < 1 and worst_scipy <= 1e-12
    criterion(9, "horizon formulas", ok,
              f"two tau forms rel gap {worst_forms:.1e}, W residual {resid:.1e} on [0,10], "
              f"delta vs scipy {worst_scipy:.1e}, max T/tau {worst_T:.6f} (< 1)")


ACCEPTANCE_CONFIGS = {
    "kinetic": {
        "subcommand": "kinetic",
        "model": {"domain": {"dimension": 1, "side_length": 10, "grid_points": 100},
                  "potential": {"kind": "tophat", "amplitude": 1, "scale": 0.5},
                  "rate": {"kind": "sinusoid", "base": 1, "amplitude": 0.5}},
        "solver": {"dt": 0.01, "t_end": 10},
    },
    "patches": {"subcommand": "patches", "patches": {"b_A": 1, "b_B": 2, "alpha": 0.5},
                "solver": {"dt": 0.01, "t_end": 1000, "stride": 100}},
    "micro": {
        "subcommand": "micro",
        "model": {"domain": {"dimension": 1, "side_length": 10, "grid_points": 20},
                  "potential": {"kind": "tophat", "amplitude": 1, "scale": 1},
                  "rate": {"kind": "constant", "value": 1}},
        "solver": {"t_end": 100}, "micro": {"seed": SEED, "replicas": 200},
    },
    "meso": {
        "subcommand": "meso",
        "model": {"domain": {"dimension": 1, "side_length": 10, "grid_points": 20},
                  "potential": {"kind": "gaussian", "amplitude": 1, "scale": 0.5},
                  "rate": {"kind": "constant", "value": 1}},
        "solver": {}, "micro": {"seed": SEED, "replicas": 400, "pair_bins": [0, 0.5, 1, 2]},
    },
}


def test_criterion_10_determinism(criterion, tmp_path):
    mismatched, compared = [], 0
    for name, doc in ACCEPTANCE_CONFIGS.items():
        outputs = {}
        for run_id, threads in (("a", 1), ("b", 4), ("c", 4)):
            out = tmp_path / f"{name}_{run_id}"
            cfg = parse_config(json.dumps({**doc, "output": str(out)}))
            code, _ = run(cfg, threads=threads)
            assert code == EXIT_OK, f"{name} run failed"
            outputs[run_id] = {p.name: p.read_bytes() for p in sorted(out.glob("*.csv"))}
        for run_id in ("b", "c"):
            for fname, data in outputs["a"].items():
                compared += 1
                if outputs[run_id].get(fname) != data:
                    mismatched.append(f"{name}/{fname}")
        assert outputs["a"].keys() == outputs["b"].keys()
    criterion(10, "determinism", not mismatched,
              f"{compared} CSV comparisons across threads 1/4/4, mismatches: {mismatched or 'none'}")


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-q"]))
