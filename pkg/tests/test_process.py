import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from conftest import unchecked_params
from dlac.exceptions import ConfigurationError, EvaluationError, IntegrationError
from dlac.process import (
    A_HIGH,
    A_LOW,
    B_W1,
    PAPER_S0,
    SIGMA_W1,
    DisturbanceSpec,
    ProcessParams,
    check_state,
    derivatives,
    load_params,
    params_from_dict,
    params_to_dict,
    project_feasible,
    rk4,
    rk4_step,
    save_params,
    stochastic_step,
    truncated_normal,
    vapor_composition,
)


def rhs_by_hand(s, a, p):
    """Term-by-term evaluation of the balances written out longhand."""
    xA1, xB1, T1, xA2, xB2, T2, xA3, xB3, T3 = [float(v) for v in s]
    Q1, Q2, Q3 = [float(v) for v in a]
    xC3 = 1 - xA3 - xB3
    den = p.alpha_A * xA3 + p.alpha_B * xB3 + p.alpha_C * xC3
    xAr, xBr, xCr = p.alpha_A * xA3 / den, p.alpha_B * xB3 / den, p.alpha_C * xC3 / den
    e1 = lambda T: math.exp(-p.E1 / (p.r * T))
    e2 = lambda T: math.exp(-p.E2 / (p.r * T))
    d = [
        p.F10 / p.V1 * (p.x_A10 - xA1) + p.Fr / p.V1 * (xAr - xA1) - p.k1 * e1(T1) * xA1,
        p.F10 / p.V1 * (p.x_B10 - xB1) + p.Fr / p.V1 * (xBr - xB1) + p.k1 * e1(T1) * xA1 - p.k2 * e2(T1) * xB1,
        p.F10 / p.V1 * (p.T10 - T1) + p.Fr / p.V1 * (T3 - T1) - p.dH1 / p.c_p * p.k1 * e1(T1) * xA1
        - p.dH2 / p.c_p * p.k2 * e2(T1) * xB1 + Q1 / (p.rho * p.c_p * p.V1),
        p.F1 / p.V2 * (xA1 - xA2) + p.F20 / p.V2 * (p.x_A20 - xA2) - p.k1 * e1(T2) * xA2,
        p.F1 / p.V2 * (xB1 - xB2) + p.F20 / p.V2 * (p.x_B20 - xB2) + p.k1 * e1(T2) * xA2 - p.k2 * e2(T2) * xB2,
        p.F1 / p.V2 * (T1 - T2) + p.F20 / p.V2 * (p.T20 - T2) - p.dH1 / p.c_p * p.k1 * e1(T2) * xA2
        - p.dH2 / p.c_p * p.k2 * e2(T2) * xB2 + Q2 / (p.rho * p.c_p * p.V2),
        p.F2 / p.V3 * (xA2 - xA3) - (p.Fr + p.Fp) / p.V3 * (xAr - xA3),
        p.F2 / p.V3 * (xB2 - xB3) - (p.Fr + p.Fp) / p.V3 * (xBr - xB3),
        p.F2 / p.V3 * (T2 - T3) + Q3 / (p.rho * p.c_p * p.V3)
        + (p.Fr + p.Fp) / (p.rho * p.c_p * p.V3) * (xAr * p.dH_vap1 + xBr * p.dH_vap2 + xCr * p.dH_vap3),
    ]
    return np.array(d)


def test_derivatives_match_longhand(params):
    s = np.array([0.31, 0.52, 463.0, 0.27, 0.55, 455.5, 0.12, 0.61, 458.2])
    a = np.array([3.1e6, 1.0e6, 2.9e6])
    np.testing.assert_allclose(derivatives(s, a, params), rhs_by_hand(s, a, params), rtol=1e-12, atol=1e-9)


def test_derivatives_vanish_without_flows_reactions_or_heat():
    p = unchecked_params(F10=0.0, F20=0.0, F1=0.0, F2=0.0, Fr=0.0, Fp=0.0, k1=0.0, k2=0.0)
    d = derivatives(PAPER_S0, np.zeros(3), p)
    assert np.all(d == 0.0)


def test_derivatives_batched(params, rng):
    s = np.tile(PAPER_S0, (4, 1)) * rng.uniform(0.95, 1.05, (4, 9))
    a = rng.uniform(A_LOW, A_HIGH, (4, 3))
    batched = derivatives(s, a, params)
    for k in range(4):
        np.testing.assert_array_equal(batched[k], derivatives(s[k], a[k], params))


def test_degenerate_separator_raises(params):
    s = PAPER_S0.copy()
    s[6] = s[7] = 0.0
    p = unchecked_params(params, alpha_C=0.0)
    with pytest.raises(EvaluationError):
        derivatives(s, A_HIGH, p)


def test_vapor_composition_examples():
    np.testing.assert_allclose(vapor_composition(1 / 3, 1 / 3, 1 / 3, 1.0, 1.0, 1.0), (1 / 3,) * 3)
    assert vapor_composition(1.0, 0.0, 0.0, 3.5, 1.0, 0.5) == (1.0, 0.0, 0.0)
    np.testing.assert_allclose(vapor_composition(0.2, 0.5, 0.3, 3, 2, 1), (0.6 / 1.9, 1.0 / 1.9, 0.3 / 1.9))
    with pytest.raises(EvaluationError):
        vapor_composition(0.0, 0.0, 0.0, 3, 2, 1)


@given(st.floats(0, 1), st.floats(0, 1), st.floats(0.1, 10), st.floats(0.1, 10), st.floats(0.1, 10))
def test_vapor_composition_sums_to_one(u, v, aA, aB, aC):
    xA = u
    xB = (1 - u) * v
    xC = 1 - xA - xB
    if aA * xA + aB * xB + aC * xC <= 1e-12:
        return
    out = np.array(vapor_composition(xA, xB, xC, aA, aB, aC))
    assert np.all((out >= 0) & (out <= 1))
    assert abs(out.sum() - 1) < 1e-12


def test_rk4_single_step_matches_taylor():
    y = rk4(lambda y: -y, 1.0, 0.1)
    taylor = 1 - 0.1 + 0.1 ** 2 / 2 - 0.1 ** 3 / 6 + 0.1 ** 4 / 24
    assert abs(y - taylor) < 1e-15
    assert abs(y - math.exp(-0.1)) < 0.1 ** 5


def test_rk4_order_on_scalar_ode():
    def solve(h):
        y = 1.0
        for _ in range(int(round(1 / h))):
            y = rk4(lambda y: -y, y, h)
        return y
    errs = [abs(solve(h) - math.exp(-1)) for h in (0.1, 0.05)]
    assert math.log2(errs[0] / errs[1]) >= 3.9


def test_rk4_order_on_process_model(params, selected):
    s_ref, a_ref = selected[1]
    s = s_ref * np.array([1.05, 0.97, 1.02, 0.98, 1.03, 0.99, 1.04, 0.96, 1.01])
    horizon = 0.05
    exact = s.copy()
    for _ in range(100):
        exact = rk4_step(exact, a_ref, horizon / 100, params, substeps=8)
    errs = []
    for n in (8, 16):
        y = s.copy()
        for _ in range(n):
            y = rk4_step(y, a_ref, horizon / n, params, substeps=1)
        errs.append(np.max(np.abs(y - exact)))
    assert math.log2(errs[0] / errs[1]) >= 3.9


def test_zero_step_is_identity(params):
    out = rk4_step(PAPER_S0, A_HIGH, 0.0, params)
    np.testing.assert_array_equal(out, PAPER_S0)


def test_integration_error_reports_stage(params):
    with pytest.raises(IntegrationError) as info:
        rk4_step(PAPER_S0, np.array([np.inf, 1e6, 1e6]), 0.005, params)
    assert info.value.stage == 1


def test_stochastic_step_without_noise_is_bit_exact(params, selected, rng):
    s, a = selected[1]
    d = DisturbanceSpec.none()
    for _ in range(5):
        nxt = stochastic_step(s, a, 0.005, params, d, rng)
        np.testing.assert_array_equal(nxt, rk4_step(s, a, 0.005, params))
        s = nxt


def test_noise_within_bounds(params, rng):
    d = DisturbanceSpec(SIGMA_W1 * 10, np.full(9, 0.02))
    for _ in range(200):
        _, w = stochastic_step(PAPER_S0, A_HIGH, 0.005, params, d, rng, return_noise=True)
        assert np.all(np.abs(w) <= 0.02)


def test_truncated_normal_std(rng):
    sigma, b = SIGMA_W1, B_W1
    draws = truncated_normal(rng, sigma, b, size=(100_000, 9))
    expected = stats.truncnorm(-b / sigma, b / sigma, scale=sigma).std()
    np.testing.assert_allclose(draws.std(axis=0), expected, rtol=0.02)
    tight = truncated_normal(rng, 1.0, 0.5, size=100_000)
    assert abs(tight.std() / stats.truncnorm(-0.5, 0.5).std() - 1) < 0.02


def test_feasibility_preserved_under_w1(params, selected, rng):
    d = DisturbanceSpec.preset("w1")
    for k in range(3):
        s, a = selected[k]
        for _ in range(10_000 // 3 + 1):
            s = stochastic_step(s, a, 0.005, params, d, rng)
            pairs = s[[0, 3, 6]] + s[[1, 4, 7]]
            assert np.all(s[[0, 1, 3, 4, 6, 7]] >= 0) and np.all(pairs <= 1.0)


@given(st.lists(st.floats(-2, 2), min_size=9, max_size=9))
def test_projection_lands_in_domain(v):
    s = np.array(v) * np.array([1, 1, 400, 1, 1, 400, 1, 1, 400])
    out = project_feasible(s)
    check_state(out)
    inside = project_feasible(out)
    np.testing.assert_array_equal(inside, out)


def test_params_roundtrip(tmp_path, params):
    path = tmp_path / "p.yaml"
    save_params(params, path)
    assert load_params(path) == params
    assert params_from_dict(params_to_dict(params)) == params


def test_params_validation():
    with pytest.raises(ConfigurationError):
        ProcessParams(V1=0.0)
    with pytest.raises(ConfigurationError):
        ProcessParams(alpha_A=0.4)
    with pytest.raises(ConfigurationError):
        params_from_dict({"bogus": 1.0})


def test_disturbance_validation():
    with pytest.raises(ConfigurationError):
        DisturbanceSpec(-np.ones(9), np.ones(9))
    with pytest.raises(ConfigurationError):
        DisturbanceSpec(np.ones(9), np.zeros(9))
    with pytest.raises(ConfigurationError):
        DisturbanceSpec.preset("w3")


def test_check_state():
    check_state(PAPER_S0)
    bad = PAPER_S0.copy()
    bad[0] = 0.9
    with pytest.raises(ConfigurationError):
        check_state(bad)
    bad = PAPER_S0.copy()
    bad[2] = 0.0
    with pytest.raises(ConfigurationError):
        check_state(bad)
