import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from repimm.errors import AssumptionViolation, GridTooCoarse
from repimm.model import (
    AttractionRate,
    ConstantRate,
    PatchRate,
    Potential,
    ScalarField,
    SinusoidRate,
    TorusDomain,
    build_attraction_rate,
    discretize,
    eval_potential,
    eval_rate,
    kernel_weights,
    potential_stats,
)


def test_tophat_inside_and_beyond_cutoff():
    pot = Potential("tophat", 1.0, 1.0)
    assert eval_potential(pot, [0.5]) == 1.0
    assert eval_potential(pot, [2.0]) == 0.0


def test_gaussian_peak():
    assert eval_potential(Potential("gaussian", 1.0, 1.0), [0.0]) == 1.0


def test_tophat_stats_1d():
    dom = TorusDomain(1, 10.0, 100)
    s = potential_stats(Potential("tophat", 1.0, 0.5), dom)
    assert s.l1_norm == 1.0
    assert s.phi_bar == 1.0
    assert s.floor_radius == 0.5
    assert s.floor_value == 1.0
    assert s.l1_norm_grid == pytest.approx(1.0, abs=1e-14)


def test_exponential_mass_matches_analytic_integral():
    # twice the integral of e^{-x} on [0, 15] from scipy quad: 1.9999993881953597
    dom = TorusDomain(1, 40.0, 400)
    s = potential_stats(Potential("exponential", 1.0, 1.0), dom)
    assert s.l1_norm == pytest.approx(1.9999993881953597, rel=1e-12)
    assert s.l1_norm_grid == pytest.approx(2.0, rel=1e-4)


def test_gaussian_2d_mass_truncated():
    # 2 pi s^2 (1 - e^{-12.5}) for the default cutoff of five scales
    pot = Potential("gaussian", 1.0, 0.5)
    assert pot.l1_norm(2) == pytest.approx(2 * math.pi * 0.25 * -math.expm1(-12.5), rel=1e-12)
    dom = TorusDomain(2, 8.0, 64)
    assert potential_stats(pot, dom).l1_norm_grid == pytest.approx(pot.l1_norm(2), rel=1e-4)


def test_zero_potential_flags_only_when_mass_needed():
    dom = TorusDomain(1, 10.0, 50)
    s = potential_stats(Potential("tophat", 0.0, 1.0), dom)
    assert s.l1_norm == 0.0
    with pytest.raises(AssumptionViolation):
        s.require_positive_mass()


def test_tabulated_linear_interpolation():
    pot = Potential("tabulated", table=((0.0, 2.0), (1.0, 1.0), (2.0, 0.0)))
    assert eval_potential(pot, [0.5]) == pytest.approx(1.5)
    assert eval_potential(pot, [3.0]) == 0.0
    # piecewise-linear area in 1-d: 2 * (1.5 + 0.5)
    assert pot.l1_norm(1) == pytest.approx(4.0)


def test_cutoff_longer_than_half_torus_rejected():
    dom = TorusDomain(1, 4.0, 40)
    with pytest.raises(AssumptionViolation):
        dom.check_potential(Potential("tophat", 1.0, 3.0))


def test_rates():
    assert eval_rate(ConstantRate(1.0), [3.3]) == 1.0
    patches = PatchRate((((0.0,), (1.0,), 1.0), ((2.0,), (3.0,), 2.0)))
    assert eval_rate(patches, [2.5]) == 2.0
    assert eval_rate(patches, [1.5]) == 0.0
    sine = SinusoidRate(1.0, 0.5, 10.0)
    assert eval_rate(sine, [2.5]) == pytest.approx(1.5)
    with pytest.raises(AssumptionViolation):
        SinusoidRate(0.2, 0.5, 10.0)


def test_attraction_rate_examples():
    kern = Potential("tophat", math.log(2), 1.0)
    assert build_attraction_rate([], kern, 1.5) == ConstantRate(1.5)
    assert build_attraction_rate([(0.0,)], Potential("tophat", 0.0, 1.0), 1.5) == ConstantRate(1.5)
    rate = build_attraction_rate([(0.0,)], kern, 1.5)
    assert isinstance(rate, AttractionRate)
    assert eval_rate(rate, [0.3]) == pytest.approx(3.0)
    assert eval_rate(rate, [2.0]) == pytest.approx(1.5)
    capped = build_attraction_rate([(0.0,)], kern, 1.5, cap=2.0)
    assert eval_rate(capped, [0.3]) == 2.0
    assert capped.b_bar == 2.0


def test_discretize_constant_and_sinusoid():
    dom = TorusDomain(1, 10.0, 64)
    f = discretize(3.0, dom)
    assert np.all(f.values == 3.0)
    g = discretize(SinusoidRate(1.0, 0.5, 10.0), dom)
    assert g.values.max() <= 1.5


def test_discretize_potential_quadrature_refines_to_mass():
    # point samples converge at first order; refine until within 1e-3
    pot = Potential("tophat", 1.0, 0.5)
    errs = [abs(discretize(pot, TorusDomain(1, 10.0, n)).integral() - 1.0) for n in (500, 5000, 20000)]
    assert errs[0] > errs[1] > errs[2]
    assert errs[-1] <= 1e-3
    with pytest.raises(GridTooCoarse):
        discretize(pot, TorusDomain(1, 10.0, 20))


def test_kernel_weights_first_order_convergence_for_gaussian_2d():
    pot = Potential("gaussian", 1.0, 0.4)
    errs = []
    for n in (16, 32, 64):
        w = kernel_weights(pot, TorusDomain(2, 6.0, n))
        errs.append(abs(w.sum() - pot.l1_norm(2)))
    assert errs[-1] <= errs[0]
    assert errs[-1] < 1e-4 * pot.l1_norm(2)


def test_scalar_field_rows_and_immutability():
    dom = TorusDomain(2, 2.0, 2)
    f = ScalarField(dom, np.arange(4.0).reshape(2, 2))
    rows = list(f.rows())
    assert rows[0] == (0, 0.5, 0.5, 0.0)
    assert rows[3] == (3, 1.5, 1.5, 3.0)
    with pytest.raises(ValueError):
        f.values[0, 0] = 1.0


potentials = st.sampled_from([
    Potential("tophat", 1.3, 0.7),
    Potential("gaussian", 0.8, 0.5),
    Potential("exponential", 2.0, 0.3),
    Potential("tabulated", table=((0.0, 1.0), (0.5, 0.4), (1.2, 0.0))),
])


@settings(max_examples=60, deadline=None)
@given(pot=potentials, x=st.lists(st.floats(-5, 5), min_size=1, max_size=2))
def test_potential_within_bounds(pot, x):
    v = eval_potential(pot, x) if len(x) == 1 else float(pot(np.array([x]))[0])
    assert 0.0 <= v <= pot.phi_bar
    if np.linalg.norm(x) > pot.cutoff:
        assert v == 0.0


@settings(max_examples=60, deadline=None)
@given(x=st.floats(0, 10), base=st.floats(0.5, 3), frac=st.floats(0, 1))
def test_rate_within_bounds(x, base, frac):
    rate = SinusoidRate(base, frac * base, 10.0)
    assert 0.0 <= eval_rate(rate, [x]) <= rate.b_bar + 1e-12


@settings(max_examples=30, deadline=None)
@given(r=st.floats(0, 0.5))
def test_tophat_floor_holds(r):
    pot = Potential("tophat", 1.0, 0.5)
    rad, val = pot.floor()
    assert eval_potential(pot, [r]) >= val
    assert rad == 0.5
