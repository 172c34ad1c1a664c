"""Open-loop baseline: hold the steady-state heat input paired with the reference."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .exceptions import ConfigurationError
from .mdp import BENCHMARK_LAYOUT, Normalizer, normalize_action
from .process import A_HIGH, A_LOW
from .validation import check_inputs, check_states


def open_loop_action(ref_pair):
    """The steady heat input of a ``(state, input)`` reference pair, clipped to the bounds."""
    _, a = ref_pair
    return np.clip(np.asarray(a, dtype=float), A_LOW, A_HIGH)


class _LocalOpenLoop:
    """Local controller that ignores its state and emits the paired input of its reference.

    The reference is recovered from the observation (state minus tracking
    error) and matched to the nearest fitted reference, so the controller
    switches exactly when the reference does.
    """

    def __init__(self, local_refs, local_actions, dim):
        self.local_refs = local_refs
        self.local_actions = local_actions
        self.dim = dim

    def act(self, obs, rng=None, deterministic=True):
        obs = np.asarray(obs, dtype=float)
        ref = obs[..., : self.dim] - obs[..., self.dim:]
        d = np.sum((ref[..., None, :] - self.local_refs) ** 2, axis=-1)
        return self.local_actions[np.argmin(d, axis=-1)]


class OpenLoopController(BaseEstimator):
    """Open-loop control from a reference set.

    ``fit(X, y)`` takes reference states ``X`` (n, 9) and their steady
    inputs ``y`` (n, 3).  ``predict`` returns the paired input of the
    nearest reference for each row of ``X``.
    """

    def __init__(self, normalizer: Normalizer = None, layout=BENCHMARK_LAYOUT):
        self.normalizer = normalizer
        self.layout = layout

    def fit(self, X, y):
        X = check_states(X)
        y = check_inputs(y, A_LOW, A_HIGH)
        if len(X) != len(y):
            raise ConfigurationError("states and inputs must have the same number of rows")
        self.normalizer_ = self.normalizer if self.normalizer is not None else Normalizer().fit(X)
        self.ref_states_ = X
        self.ref_inputs_ = y
        self.ref_norm_ = self.normalizer_.transform(X)
        return self

    def predict(self, X):
        check_is_fitted(self, "ref_states_")
        Xn = self.normalizer_.transform(check_states(X))
        d = np.sum((Xn[:, None, :] - self.ref_norm_[None]) ** 2, axis=-1)
        return self.ref_inputs_[np.argmin(d, axis=1)].copy()

    def local_policies(self):
        """One state-independent policy per subsystem, for use with ``ProcessEnv.rollout``."""
        check_is_fitted(self, "ref_states_")
        a_norm = normalize_action(self.ref_inputs_)
        out = []
        for sidx, aidx in zip(self.layout.state_idx, self.layout.action_idx):
            out.append(_LocalOpenLoop(self.ref_norm_[:, list(sidx)], a_norm[:, list(aidx)], len(sidx)))
        return out
