import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.integrate import solve_ivp

from repimm.errors import BoundViolation, DomainMismatch, NegativeDensity, NoContraction, StepTooLarge
from repimm.kinetic import (
    EnvelopeBounds,
    KineticConfig,
    convolve,
    effective_rates,
    envelopes,
    homogeneous_deviation,
    homogeneous_exact,
    rhs_closure,
    rhs_kinetic,
    solve,
    solve_picard,
    verify_bounds,
)
from repimm.model import ConstantRate, Potential, ScalarField, SinusoidRate, TorusDomain, kernel_weights

DOM = TorusDomain(1, 10.0, 100)
TOPHAT = Potential("tophat", 1.0, 0.5)
SINE = SinusoidRate(1.0, 0.5, 10.0)


def field(values, dom=DOM):
    return ScalarField(dom, np.asarray(values, dtype=float).reshape(dom.shape))


def test_convolve_constant_gives_mass_times_constant():
    out = convolve(DOM, TOPHAT, field(np.full(100, 2.5)))
    mass = kernel_weights(TOPHAT, DOM).sum()
    np.testing.assert_allclose(out.values, 2.5 * mass, rtol=1e-13)


def test_convolve_impulse_reproduces_kernel():
    rho = np.zeros(100)
    rho[30] = 1.0 / DOM.cell_volume
    out = convolve(DOM, TOPHAT, field(rho)).values
    w = kernel_weights(TOPHAT, DOM) / DOM.cell_volume
    np.testing.assert_allclose(out, np.roll(w, 30), atol=1e-13)


def test_convolve_backends_agree_and_linear():
    rng = np.random.default_rng(1)
    dom = TorusDomain(2, 6.0, 24)
    pot = Potential("gaussian", 1.0, 0.5)
    a = field(rng.random(dom.shape), dom)
    b = field(rng.random(dom.shape), dom)
    fa = convolve(dom, pot, a)
    np.testing.assert_allclose(fa.values, convolve(dom, pot, a, backend="direct").values, atol=1e-10)
    np.testing.assert_allclose(convolve(dom, pot, a + b).values, fa.values + convolve(dom, pot, b).values,
                               atol=1e-12)


def test_convolve_domain_mismatch():
    with pytest.raises(DomainMismatch):
        convolve(TorusDomain(1, 10.0, 50), TOPHAT, field(np.zeros(100)))


def test_rhs_examples():
    np.testing.assert_allclose(rhs_kinetic(SINE, TOPHAT, field(np.zeros(100))).values,
                               SINE(DOM.cell_centers()), rtol=0, atol=0)
    np.testing.assert_allclose(rhs_kinetic(ConstantRate(1.0), TOPHAT, field(np.ones(100))).values,
                               math.exp(-1), rtol=1e-14)
    np.testing.assert_allclose(rhs_closure(SINE, TOPHAT, field(np.zeros(100))).values,
                               SINE(DOM.cell_centers()), atol=0)
    with pytest.raises(NegativeDensity):
        rhs_kinetic(SINE, TOPHAT, field(-np.ones(100)))


def test_closure_small_potential_second_order():
    # the exponents differ by conv(phi - (1 - e^{-phi})) <= conv(phi^2 / 2)
    rho = field(np.linspace(0, 3, 100))
    for amp in (1e-3, 2e-3):
        pot = Potential("tophat", amp, 0.5)
        gap = np.abs(rhs_closure(SINE, pot, rho).values - rhs_kinetic(SINE, pot, rho).values)
        assert gap.max() <= amp**2 * 0.5 * 3.0 * SINE.b_bar * 1.0001


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), scale=st.floats(0.1, 5))
def test_rhs_bounded_antitone_and_closure_dominates(seed, scale):
    rng = np.random.default_rng(seed)
    lo = rng.random(100) * scale
    hi = lo + rng.random(100) * scale
    r_lo = rhs_kinetic(SINE, TOPHAT, field(lo)).values
    r_hi = rhs_kinetic(SINE, TOPHAT, field(hi)).values
    assert np.all(r_lo <= SINE.b_bar)
    assert np.all(r_hi <= r_lo + 1e-15)
    assert np.all(rhs_closure(SINE, TOPHAT, field(lo)).values >= r_lo - 1e-15)


def test_homogeneous_exact_examples():
    assert homogeneous_exact(1.0, 1.0, math.e - 1) == pytest.approx(1.0, rel=1e-15)
    assert homogeneous_exact(3.0, 2.0, 0.0) == 0.0
    assert homogeneous_exact(2.0, 0.5, math.e - 1) == pytest.approx(2.0, rel=1e-15)


def test_solve_homogeneous_reaches_one_at_e_minus_one():
    sol = solve(KineticConfig(DOM, TOPHAT, ConstantRate(1.0), dt=0.01, t_end=math.e - 1))
    np.testing.assert_allclose(sol.final.values, 1.0, atol=1e-6)


def test_solve_free_case_is_linear_in_time():
    rho0 = field(np.linspace(0, 1, 100))
    zero = Potential("tophat", 0.0, 0.5)
    sol = solve(KineticConfig(DOM, zero, SINE, rho0, dt=0.01, t_end=2.0))
    np.testing.assert_allclose(sol.final.values, rho0.values + 2.0 * SINE(DOM.cell_centers()), atol=1e-12)


def test_solve_zero_horizon_returns_initial_state():
    rho0 = field(np.linspace(0, 1, 100))
    sol = solve(KineticConfig(DOM, TOPHAT, SINE, rho0, t_end=0.0))
    assert len(sol.times) == 1
    np.testing.assert_array_equal(sol.final.values, rho0.values)


def test_step_too_large():
    with pytest.raises(StepTooLarge):
        KineticConfig(DOM, TOPHAT, ConstantRate(2.0), dt=0.05)


def test_solve_matches_scipy_oracle_on_heterogeneous_grid():
    dom = TorusDomain(1, 10.0, 40)
    pot = Potential("gaussian", 1.0, 0.5)
    sol = solve(KineticConfig(dom, pot, SINE, dt=0.01, t_end=3.0))
    w = kernel_weights(pot, dom)
    b = SINE(dom.cell_centers())

    def f(t, y):
        conv = np.real(np.fft.ifft(np.fft.fft(y) * np.fft.fft(w)))
        return b * np.exp(-conv)

    ref = solve_ivp(f, (0, 3.0), np.zeros(40), method="DOP853", rtol=1e-12, atol=1e-12).y[:, -1]
    np.testing.assert_allclose(sol.final.values, ref, atol=1e-9)


def test_solution_monotone_and_closure_dominates():
    kin = solve(KineticConfig(DOM, TOPHAT, SINE, dt=0.02, t_end=5.0))
    clo = solve(KineticConfig(DOM, TOPHAT, SINE, dt=0.02, t_end=5.0, rhs_variant="closure"))
    assert np.all(np.diff(kin.densities, axis=0) >= 0)
    assert np.all(clo.densities >= kin.densities - 1e-14)


def test_grid_refinement_irrelevant_for_homogeneous_case():
    a = solve(KineticConfig(TorusDomain(1, 10.0, 100), TOPHAT, ConstantRate(1.0), t_end=2.0))
    b = solve(KineticConfig(TorusDomain(1, 10.0, 200), TOPHAT, ConstantRate(1.0), t_end=2.0))
    assert abs(a.final.values.mean() - b.final.values.mean()) < 1e-10


def test_picard_examples():
    cfg = KineticConfig(DOM, Potential("tophat", 2.0, 0.5), ConstantRate(1.0), dt=0.01, t_end=1.0)
    with pytest.raises(NoContraction):
        solve_picard(cfg, horizon=0.6)
    sol = solve_picard(KineticConfig(DOM, TOPHAT, ConstantRate(1.0), dt=0.01, t_end=0.9), horizon=0.9)
    assert homogeneous_deviation(sol, 1.0) < 1e-8
    zero = solve_picard(KineticConfig(DOM, TOPHAT, ConstantRate(0.0), dt=0.01, t_end=1.0))
    assert np.all(zero.densities == 0)
    assert set(zero.picard_iterations) == {0}


def test_picard_agrees_with_rk4_on_heterogeneous_rate():
    cfg = KineticConfig(DOM, TOPHAT, SINE, dt=0.01, t_end=3.0, method="picard")
    pic = solve(cfg)
    rk = solve(KineticConfig(DOM, TOPHAT, SINE, dt=0.01, t_end=3.0))
    np.testing.assert_allclose(pic.densities, rk.densities, atol=1e-8)


def test_effective_rates_examples():
    zero = field(np.zeros(100))
    bm, bp = effective_rates(ConstantRate(1.0), Potential("tophat", 2.0, 0.5), zero)
    assert (bm, bp) == pytest.approx((2.0, 2.0), rel=1e-13)
    rate = SinusoidRate(1.5, 0.5, 10.0)
    bm, bp = effective_rates(rate, TOPHAT, zero)
    assert bm == pytest.approx(1.0, abs=2e-3) and bp == pytest.approx(2.0, abs=2e-3)
    assert bm >= 1.0 - 1e-12 and bp <= 2.0 + 1e-12


def test_envelope_examples():
    assert envelopes(1.0, 1.0, math.e - 1) == pytest.approx((1.0, 1.0), rel=1e-15)
    om, op = envelopes(1.0, 2.0, math.log(2))
    assert om == pytest.approx(math.log(1.5), rel=1e-14)
    assert op == pytest.approx(1.0986122886681098, rel=1e-14)
    assert envelopes(0.3, 2.0, 0.0) == (0.0, 0.0)


@settings(max_examples=40, deadline=None)
@given(bm=st.floats(0, 3), gap=st.floats(0, 3), t=st.floats(0.01, 20))
def test_envelopes_ordered_and_solve_their_odes(bm, gap, t):
    env = EnvelopeBounds(bm, bm + gap)
    om, op = env.omega_minus(t), env.omega_plus(t)
    assert om <= op
    h = 1e-4
    dm = (env.omega_minus(t + h) - env.omega_minus(t - h)) / (2 * h)
    dp = (env.omega_plus(t + h) - env.omega_plus(t - h)) / (2 * h)
    # d omega-/dt = b- e^{-omega+},  d omega+/dt = b+ e^{-omega-}
    assert dm == pytest.approx(bm * math.exp(-op), abs=1e-6)
    assert dp == pytest.approx((bm + gap) * math.exp(-om), abs=1e-6)


def test_verify_bounds_homogeneous_tight_and_heterogeneous_strict():
    zero = field(np.zeros(100))
    sol = solve(KineticConfig(DOM, TOPHAT, ConstantRate(1.0), t_end=5.0))
    rep = verify_bounds(sol, EnvelopeBounds(*effective_rates(ConstantRate(1.0), TOPHAT, zero)), zero)
    assert rep.passed and abs(rep.worst_slack) < 1e-9
    rate = SinusoidRate(1.5, 0.5, 10.0)
    sol = solve(KineticConfig(DOM, TOPHAT, rate, t_end=5.0))
    rep = verify_bounds(sol, EnvelopeBounds(*effective_rates(rate, TOPHAT, zero)), zero)
    assert rep.rows[0].min_slack == 0 and rep.rows[0].max_slack == 0
    assert all(r.min_slack > 0 and r.max_slack > 0 for r in rep.rows[1:])


def test_verify_bounds_reports_violation():
    zero = field(np.zeros(100))
    sol = solve(KineticConfig(DOM, TOPHAT, ConstantRate(1.0), t_end=1.0))
    with pytest.raises(BoundViolation):
        verify_bounds(sol, EnvelopeBounds(0.1, 0.2), zero)
    rep = verify_bounds(sol, EnvelopeBounds(0.1, 0.2), zero, raise_on_violation=False)
    assert not rep.passed and rep.worst_slack < 0
