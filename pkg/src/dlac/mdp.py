"""MDP view of the process: subsystems, scaling, stage costs and rollouts."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError
from sklearn.utils.validation import check_is_fitted

from .exceptions import ConfigurationError, IntegrationError
from .process import (
    A_HIGH,
    A_LOW,
    INPUT_NAMES,
    MASS_FRACTION_IDX,
    N_INPUTS,
    N_STATES,
    STATE_NAMES,
    TEMPERATURE_IDX,
    DisturbanceSpec,
    ProcessParams,
    project_feasible,
    stochastic_step,
)
from .validation import check_states


@dataclass(frozen=True)
class SubsystemLayout:
    """Partition of the state and action vectors into local subsystems."""

    state_idx: tuple
    action_idx: tuple

    def __post_init__(self):
        s = tuple(tuple(int(i) for i in idx) for idx in self.state_idx)
        a = tuple(tuple(int(i) for i in idx) for idx in self.action_idx)
        if len(s) != len(a) or not s:
            raise ConfigurationError("need one state and one action index list per subsystem")
        if sorted(i for idx in s for i in idx) != list(range(N_STATES)):
            raise ConfigurationError("state index lists must partition 0..8")
        if sorted(i for idx in a for i in idx) != list(range(N_INPUTS)):
            raise ConfigurationError("action index lists must partition 0..2")
        object.__setattr__(self, "state_idx", s)
        object.__setattr__(self, "action_idx", a)

    @property
    def n_subsystems(self):
        return len(self.state_idx)

    def local_state(self, s, i):
        return np.asarray(s)[..., list(self.state_idx[i])]

    def split_states(self, s):
        return [self.local_state(s, i) for i in range(self.n_subsystems)]

    def merge_actions(self, local_actions):
        out = np.empty(np.shape(local_actions[0])[:-1] + (N_INPUTS,))
        for idx, a in zip(self.action_idx, local_actions):
            out[..., list(idx)] = a
        return out


# One vessel per subsystem: (x_A, x_B, T) with its own heating rate.
BENCHMARK_LAYOUT = SubsystemLayout(((0, 1, 2), (3, 4, 5), (6, 7, 8)), ((0,), (1,), (2,)))


class Normalizer(TransformerMixin, BaseEstimator):
    """Affine state scaling: ``2x - 1`` for mass fractions, z-score for temperatures.

    ``fit`` takes reference states (n, 9) and learns the temperature mean and
    standard deviation from them.
    """

    def __init__(self, min_std=1e-12):
        self.min_std = min_std

    def fit(self, X, y=None):
        X = check_states(X)
        temps = X[:, TEMPERATURE_IDX]
        std = temps.std(axis=0)
        if np.any(std <= self.min_std):
            raise ConfigurationError("temperature spread in the reference set is zero")
        self.scale_ = np.ones(N_STATES)
        self.offset_ = np.zeros(N_STATES)
        self.scale_[MASS_FRACTION_IDX] = 2.0
        self.offset_[MASS_FRACTION_IDX] = -1.0
        self.scale_[TEMPERATURE_IDX] = 1.0 / std
        self.offset_[TEMPERATURE_IDX] = -temps.mean(axis=0) / std
        self.temperature_mean_ = temps.mean(axis=0)
        self.temperature_std_ = std
        return self

    def _check(self):
        try:
            check_is_fitted(self, ["scale_", "offset_"])
        except NotFittedError as exc:
            raise ConfigurationError("normalizer used before fit") from exc

    def transform(self, X):
        self._check()
        X = np.asarray(X, dtype=float)
        if X.shape[-1] != N_STATES:
            raise ConfigurationError(f"expected {N_STATES} state columns, got {X.shape[-1]}")
        return X * self.scale_ + self.offset_

    def inverse_transform(self, X):
        self._check()
        X = np.asarray(X, dtype=float)
        return (X - self.offset_) / self.scale_

    def scale_derivative(self, d):
        """Map a state derivative into normalized units (no offset)."""
        self._check()
        return np.asarray(d, dtype=float) * self.scale_

    def to_dict(self):
        self._check()
        return {"temperature_mean": self.temperature_mean_.tolist(),
                "temperature_std": self.temperature_std_.tolist()}

    @classmethod
    def from_moments(cls, mean, std):
        mean = np.asarray(mean, dtype=float)
        std = np.asarray(std, dtype=float)
        fake = np.zeros((2, N_STATES))
        fake[:, TEMPERATURE_IDX] = np.stack([mean - std, mean + std])
        return cls().fit(fake)


def normalize_action(a, low=A_LOW, high=A_HIGH):
    return 2.0 * (np.asarray(a, dtype=float) - low) / (high - low) - 1.0


def denormalize_action(a_norm, low=A_LOW, high=A_HIGH):
    return low + 0.5 * (np.asarray(a_norm, dtype=float) + 1.0) * (high - low)


def stage_cost(s_local, ref_local):
    """Squared tracking error of normalized local states."""
    s_local = np.asarray(s_local, dtype=float)
    ref_local = np.asarray(ref_local, dtype=float)
    if s_local.shape[-1] != ref_local.shape[-1]:
        raise ConfigurationError("state and reference dimensions differ")
    d = s_local - ref_local
    return np.sum(d * d, axis=-1)


def sample_initial_state(s0, rng, spread=0.2):
    """Uniform draw from the box ``[(1 - spread) s0, (1 + spread) s0]``, projected onto the physical domain."""
    s0 = np.asarray(s0, dtype=float)
    lo, hi = (1.0 - spread) * s0, (1.0 + spread) * s0
    return project_feasible(rng.uniform(np.minimum(lo, hi), np.maximum(lo, hi)))


def local_observation(s_norm_local, ref_norm_local):
    """Controller input: the local state and its tracking error, both normalized."""
    return np.concatenate([s_norm_local, s_norm_local - ref_norm_local], axis=-1)


@dataclass
class Transition:
    """A batch of local samples ``(obs_k, a_k, c_k, obs_{k+1})`` (leading axis = time)."""

    obs: np.ndarray
    action: np.ndarray
    cost: np.ndarray
    next_obs: np.ndarray

    def __len__(self):
        return len(self.cost)


@dataclass
class Rollout:
    states: np.ndarray          # (n+1, 9) raw
    actions: np.ndarray         # (n, 3) raw heat inputs actually applied
    references: np.ndarray      # (n+1, 9) raw
    costs: np.ndarray           # (n+1, nu) stage cost of each visited state
    transitions: list = field(default_factory=list)
    dt: float = 0.005

    @property
    def n_steps(self):
        return len(self.actions)

    @property
    def total_cost(self):
        return self.costs.sum(axis=1)

    @property
    def times(self):
        return self.dt * np.arange(self.n_steps + 1)

    def to_csv(self, path, extra_columns=None):
        nu = self.costs.shape[1]
        header = (["step", "time_h"] + list(STATE_NAMES) + list(INPUT_NAMES)
                  + [f"cost_{i + 1}" for i in range(nu)] + ["cost_total"])
        cols = [np.arange(self.n_steps), self.times[:-1], *self.states[:-1].T, *self.actions.T,
                *self.costs[:-1].T, self.total_cost[:-1]]
        if extra_columns:
            for name, values in extra_columns.items():
                header.append(name)
                cols.append(np.asarray(values)[: self.n_steps])
        write_csv(path, header, np.column_stack(cols))


def write_csv(path, header, data):
    np.savetxt(path, np.asarray(data, dtype=float), delimiter=",", header=",".join(header),
               comments="", fmt="%.17g")


def read_csv(path):
    """Return ``(header, data)`` of a CSV written by this package."""
    with open(path) as fh:
        header = fh.readline().strip().split(",")
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return header, data


class ProcessEnv:
    """Closed-loop simulator wrapper that speaks normalized local observations."""

    def __init__(self, params: ProcessParams, normalizer: Normalizer, layout=BENCHMARK_LAYOUT,
                 dt=0.005, substeps=5, action_low=A_LOW, action_high=A_HIGH, cost_on_next_state=True):
        self.params = params
        self.normalizer = normalizer
        self.layout = layout
        self.dt = dt
        self.substeps = substeps
        self.action_low = np.asarray(action_low, dtype=float)
        self.action_high = np.asarray(action_high, dtype=float)
        self.cost_on_next_state = cost_on_next_state

    @property
    def n_subsystems(self):
        return self.layout.n_subsystems

    def obs_dims(self):
        return [2 * len(idx) for idx in self.layout.state_idx]

    def act_dims(self):
        return [len(idx) for idx in self.layout.action_idx]

    def observe(self, s, s_ref):
        sn = self.normalizer.transform(s)
        rn = self.normalizer.transform(s_ref)
        return [local_observation(self.layout.local_state(sn, i), self.layout.local_state(rn, i))
                for i in range(self.n_subsystems)]

    def local_costs(self, s, s_ref):
        sn = self.normalizer.transform(s)
        rn = self.normalizer.transform(s_ref)
        return np.stack([stage_cost(self.layout.local_state(sn, i), self.layout.local_state(rn, i))
                         for i in range(self.n_subsystems)], axis=-1)

    def to_heat(self, local_actions):
        a = self.layout.merge_actions([np.clip(x, -1.0, 1.0) for x in local_actions])
        return np.clip(denormalize_action(a, self.action_low, self.action_high),
                       self.action_low, self.action_high)

    def step(self, s, heat, disturbance, rng):
        return stochastic_step(s, heat, self.dt, self.params, disturbance, rng, substeps=self.substeps)

    def rollout(self, policies, n_steps, s_ref, disturbance: DisturbanceSpec, rng, s_init,
                deterministic=False, record_transitions=True):
        """Simulate ``n_steps`` sampling intervals under the local policies.

        ``s_ref`` is one raw reference state or a per-step schedule of shape
        ``(n_steps, 9)``.  Each policy only ever receives its own local
        observation.  Policy sampling and process noise share ``rng`` so a
        fixed seed reproduces the episode exactly.
        """
        if len(policies) != self.n_subsystems:
            raise ConfigurationError(f"expected {self.n_subsystems} policies, got {len(policies)}")
        refs = np.asarray(s_ref, dtype=float)
        if refs.ndim == 1:
            refs = np.broadcast_to(refs, (n_steps + 1, N_STATES))
        elif len(refs) == n_steps:
            refs = np.vstack([refs, refs[-1:]])
        if refs.shape != (n_steps + 1, N_STATES):
            raise ConfigurationError("reference schedule must have one row per step")

        states = np.empty((n_steps + 1, N_STATES))
        actions = np.empty((n_steps, N_INPUTS))
        states[0] = s = check_states(s_init)[0]
        nu = self.n_subsystems
        act_log = [np.empty((n_steps, d)) for d in self.act_dims()]
        for k in range(n_steps):
            obs = self.observe(s, refs[k])
            local = [pi.act(o, rng=rng, deterministic=deterministic) for pi, o in zip(policies, obs)]
            heat = self.to_heat(local)
            try:
                s = self.step(s, heat, disturbance, rng)
            except IntegrationError as exc:
                raise IntegrationError(f"step {k}: {exc}", stage=exc.stage) from exc
            states[k + 1] = s
            actions[k] = heat
            for i in range(nu):
                act_log[i][k] = np.clip(local[i], -1.0, 1.0)

        costs = self.local_costs(states, refs)
        transitions = []
        if record_transitions:
            # both ends of a transition are observed against the reference in force at step k
            cur = self.observe(states[:-1], refs[:-1])
            nxt = self.observe(states[1:], refs[:-1])
            step_costs = self.local_costs(states[1:], refs[:-1]) if self.cost_on_next_state else costs[:-1]
            for i in range(nu):
                transitions.append(Transition(cur[i], act_log[i], step_costs[:, i], nxt[i]))
        return Rollout(states, actions, np.array(refs), costs, transitions, self.dt)
