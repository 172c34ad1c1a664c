import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dlac.baselines import OpenLoopController
from dlac.exceptions import ConfigurationError
from dlac.mdp import (
    BENCHMARK_LAYOUT,
    Normalizer,
    SubsystemLayout,
    denormalize_action,
    normalize_action,
    read_csv,
    sample_initial_state,
    stage_cost,
)
from dlac.process import A_HIGH, A_LOW, PAPER_S0, DisturbanceSpec


def test_layout_must_partition():
    with pytest.raises(ConfigurationError):
        SubsystemLayout(((0, 1, 2), (3, 4, 5), (6, 7)), ((0,), (1,), (2,)))
    with pytest.raises(ConfigurationError):
        SubsystemLayout(((0, 1, 2, 3, 4, 5, 6, 7, 8),), ((0, 1),))
    assert BENCHMARK_LAYOUT.n_subsystems == 3


def test_normalizer_examples(normalizer):
    s = PAPER_S0.copy()
    s[0] = 0.5
    s[2] = normalizer.temperature_mean_[0]
    out = normalizer.transform(s)
    assert out[0] == 0.0 and abs(out[2]) < 1e-12


def test_normalizer_unfitted():
    with pytest.raises(ConfigurationError):
        Normalizer().transform(PAPER_S0)


def test_normalizer_zero_spread():
    with pytest.raises(ConfigurationError):
        Normalizer().fit(np.tile(PAPER_S0, (3, 1)))


@given(arrays(float, 9, elements=st.floats(-1e3, 1e3)))
def test_normalizer_roundtrip(x):
    nm = Normalizer.from_moments([500.0, 490.0, 495.0], [20.0, 25.0, 22.0])
    np.testing.assert_allclose(nm.inverse_transform(nm.transform(x)), x, rtol=1e-12, atol=1e-12)


def test_normalizer_moments_roundtrip(normalizer):
    clone = Normalizer.from_moments(**{k.replace("temperature_", ""): v for k, v in
                                      {"temperature_mean": normalizer.temperature_mean_,
                                       "temperature_std": normalizer.temperature_std_}.items()})
    np.testing.assert_allclose(clone.transform(PAPER_S0), normalizer.transform(PAPER_S0), rtol=1e-12, atol=1e-12)


def test_action_scaling_roundtrip():
    np.testing.assert_allclose(normalize_action(A_LOW), -1.0)
    np.testing.assert_allclose(normalize_action(A_HIGH), 1.0)
    a = np.array([2e6, 1e6, 3e6])
    np.testing.assert_allclose(denormalize_action(normalize_action(a)), a, rtol=1e-14)


def test_stage_cost_examples():
    assert stage_cost(np.ones(3), np.ones(3)) == 0.0
    assert stage_cost(np.array([1.0, 0, 0]), np.zeros(3)) == 1.0
    with pytest.raises(ConfigurationError):
        stage_cost(np.ones(3), np.ones(2))


@given(arrays(float, 9, elements=st.floats(-5, 5)), arrays(float, 9, elements=st.floats(-5, 5)))
def test_local_costs_sum_to_full_cost(s, r):
    parts = [stage_cost(BENCHMARK_LAYOUT.local_state(s, i), BENCHMARK_LAYOUT.local_state(r, i)) for i in range(3)]
    assert abs(sum(parts) - np.sum((s - r) ** 2)) <= 1e-9 * max(1.0, np.sum((s - r) ** 2))


def test_initial_states_inside_box(rng):
    draws = np.array([sample_initial_state(PAPER_S0, rng) for _ in range(10_000)])
    assert np.all(draws >= 0.8 * PAPER_S0 - 1e-15) and np.all(draws <= 1.2 * PAPER_S0 + 1e-15)
    assert draws[:, 0].min() >= 0.1763 * 0.8 and draws[:, 0].max() <= 0.1763 * 1.2


def test_initial_state_mean(rng):
    draws = np.array([sample_initial_state(PAPER_S0, rng) for _ in range(100_000)])
    np.testing.assert_allclose(draws.mean(axis=0), PAPER_S0, rtol=0.01)


def _open_loop(normalizer, ref_set):
    return OpenLoopController(normalizer).fit(ref_set.states, ref_set.inputs).local_policies()


def test_equilibrium_rollout_is_constant(env, selected, normalizer, ref_set, rng):
    s_ref, _ = selected[1]
    ro = env.rollout(_open_loop(normalizer, ref_set), 50, s_ref, DisturbanceSpec.none(), rng, s_ref)
    assert np.max(np.abs(ro.states - s_ref)) < 1e-9
    assert np.max(ro.costs) < 1e-15


def test_rollout_length_and_transitions(env, selected, normalizer, ref_set, rng):
    s_ref, _ = selected[0]
    ro = env.rollout(_open_loop(normalizer, ref_set), 500, s_ref, DisturbanceSpec.preset("w1"), rng, PAPER_S0)
    assert ro.n_steps == 500 and ro.states.shape == (501, 9)
    assert abs(ro.times[-1] - 2.5) < 1e-12
    for i, tr in enumerate(ro.transitions):
        assert len(tr) == 500 and tr.obs.shape == (500, 6)
        assert np.all(tr.cost >= 0)
        np.testing.assert_array_equal(tr.obs[1:], tr.next_obs[:-1])
    np.testing.assert_allclose(ro.costs.sum(axis=1), ro.total_cost)
    full = np.sum((env.normalizer.transform(ro.states) - env.normalizer.transform(s_ref)) ** 2, axis=1)
    np.testing.assert_allclose(ro.total_cost, full, rtol=1e-12)


def test_rollout_determinism(env, selected, normalizer, ref_set):
    from dlac.agent import LocalController
    from dlac.config import TrainConfig
    cfg = TrainConfig(hidden=(8, 8))
    ctls = [LocalController(i, 6, 1, cfg, np.random.default_rng(i)) for i in range(3)]
    pols = [c.local_policy() for c in ctls]
    s_ref, _ = selected[2]
    runs = [env.rollout(pols, 100, s_ref, DisturbanceSpec.preset("w1"), np.random.default_rng(7), PAPER_S0)
            for _ in range(2)]
    np.testing.assert_array_equal(runs[0].states, runs[1].states)
    np.testing.assert_array_equal(runs[0].actions, runs[1].actions)


def test_actions_respect_bounds(env, selected, rng):
    class Wild:
        def act(self, obs, rng=None, deterministic=False):
            return np.array([5.0])
    ro = env.rollout([Wild()] * 3, 10, selected[0][0], DisturbanceSpec.none(), rng, PAPER_S0)
    np.testing.assert_array_equal(ro.actions, np.tile(A_HIGH, (10, 1)))


def test_trajectory_csv(tmp_path, env, selected, normalizer, ref_set, rng):
    ro = env.rollout(_open_loop(normalizer, ref_set), 20, selected[0][0], DisturbanceSpec.preset("w1"), rng, PAPER_S0)
    path = tmp_path / "traj.csv"
    ro.to_csv(path)
    header, data = read_csv(path)
    assert header[:2] == ["step", "time_h"] and header[-1] == "cost_total" and len(header) == 2 + 9 + 3 + 3 + 1
    assert data.shape == (20, len(header))
    np.testing.assert_array_equal(data[:, 2:11], ro.states[:-1])
