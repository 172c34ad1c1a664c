"""Closed-loop evaluation: tracking metrics, Lyapunov checks, entropy and R-hat."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import DiagnosticError
from .mdp import ProcessEnv, sample_initial_state, write_csv
from .process import MASS_FRACTION_IDX, PAPER_S0, TEMPERATURE_IDX

EPS_COST = 1e-8


def episode_rngs(seed, n):
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


def evaluate_cost(env: ProcessEnv, policies, references, n_per_ref, n_steps, disturbance, seed,
                  s0=PAPER_S0, spread=0.2, deterministic=True):
    """Mean accumulated stage cost over ``n_per_ref`` episodes for every reference.

    The accumulated cost sums the visited-state costs of steps ``0..n_steps-1``.
    """
    references = np.atleast_2d(references)
    rngs = episode_rngs(seed, len(references) * n_per_ref)
    totals = []
    for r, s_ref in enumerate(references):
        for e in range(n_per_ref):
            rng = rngs[r * n_per_ref + e]
            s_init = sample_initial_state(s0, rng, spread)
            ro = env.rollout(policies, n_steps, s_ref, disturbance, rng, s_init,
                             deterministic=deterministic, record_transitions=False)
            totals.append(ro.total_cost[:-1].sum())
    return float(np.mean(totals)) if totals else 0.0


@dataclass
class TrackingReport:
    """Steady-state tracking errors over a set of references (raw units)."""

    temperature_errors: np.ndarray     # (n_refs, 3) K
    mass_fraction_errors: np.ndarray   # (n_refs, 6)

    @property
    def per_reference(self):
        return np.column_stack([self.temperature_errors.max(axis=1), self.mass_fraction_errors.max(axis=1)])

    @property
    def max_temperature_error(self):
        return float(self.temperature_errors.max())

    @property
    def max_mass_fraction_error(self):
        return float(self.mass_fraction_errors.max())

    def to_csv(self, path):
        n = len(self.temperature_errors)
        header = (["reference"] + [f"err_T{i + 1}" for i in range(3)]
                  + [f"err_{name}" for name in ("x_A1", "x_B1", "x_A2", "x_B2", "x_A3", "x_B3")]
                  + ["max_T_error", "max_x_error"])
        write_csv(path, header, np.column_stack([np.arange(n), self.temperature_errors,
                                                 self.mass_fraction_errors, self.per_reference]))

    def summary(self):
        return (f"tracking over {len(self.temperature_errors)} references: "
                f"max T error {self.max_temperature_error:.4g} K, "
                f"max mass-fraction error {self.max_mass_fraction_error:.4g}")


def steady_state_errors(env: ProcessEnv, policies, references, dwell_h, rng, disturbance,
                        s0=PAPER_S0, window=0.2, spread=0.2, deterministic=True) -> TrackingReport:
    """Mean absolute error over the final ``window`` fraction of a dwell at each reference."""
    references = np.atleast_2d(references)
    n_steps = int(round(dwell_h / env.dt))
    tail = max(1, int(round(window * n_steps)))
    t_err, x_err = [], []
    for s_ref in references:
        s_init = sample_initial_state(s0, rng, spread)
        ro = env.rollout(policies, n_steps, s_ref, disturbance, rng, s_init,
                         deterministic=deterministic, record_transitions=False)
        err = np.abs(ro.states[-tail:] - s_ref).mean(axis=0)
        t_err.append(err[TEMPERATURE_IDX])
        x_err.append(err[MASS_FRACTION_IDX])
    return TrackingReport(np.array(t_err), np.array(x_err))


def lyapunov_values(controllers, obs, rng):
    """Single-sample Lyapunov estimates ``Q(s, a)`` with ``a`` drawn from each local policy.

    ``obs`` is a list of per-subsystem observation arrays; returns ``(n, nu)``.
    """
    out = []
    for ctl, o in zip(controllers, obs):
        eps = rng.standard_normal(o.shape[:-1] + (ctl.policy.act_dim,))
        a, _, _ = ctl.policy.sample(o, eps)
        out.append(ctl.critic.value(o, a))
    return np.stack(out, axis=-1)


@dataclass
class LyapunovReport:
    estimate: float
    standard_error: float
    per_subsystem: np.ndarray
    alpha1: float = float("nan")
    alpha2: float = float("nan")
    alpha_per_subsystem: np.ndarray = None
    n_samples: int = 0

    @property
    def decreasing(self):
        return bool(self.estimate + 2.0 * self.standard_error <= 0.0)

    def to_csv(self, path):
        nu = len(self.per_subsystem)
        header = ["estimate", "standard_error", "passes"] + [f"contribution_{i + 1}" for i in range(nu)]
        row = [self.estimate, self.standard_error, float(self.decreasing), *self.per_subsystem]
        header += ["alpha1", "alpha2"]
        row += [self.alpha1, self.alpha2]
        if self.alpha_per_subsystem is not None:
            for i, (a1, a2) in enumerate(self.alpha_per_subsystem):
                header += [f"alpha1_{i + 1}", f"alpha2_{i + 1}"]
                row += [a1, a2]
        write_csv(path, header, np.array([row]))

    def summary(self):
        verdict = "holds" if self.decreasing else "violated"
        return (f"Lyapunov decrease estimate {self.estimate:.4g} (SE {self.standard_error:.3g}, "
                f"{self.n_samples} samples): {verdict}; bound ratios alpha1={self.alpha1:.4g}, alpha2={self.alpha2:.4g}")


def lyapunov_decrease_check(env: ProcessEnv, controllers, s_ref, alpha3, n_rollouts, horizon, rng,
                            disturbance, s0=PAPER_S0, burn_in=0.2, spread=0.2, deterministic=False):
    """Monte-Carlo estimate of ``E[L(s') - L(s)] + alpha3 E[C(s)]`` along closed-loop rollouts.

    ``L`` is the sum of the local single-sample Lyapunov values.  Samples in
    the first ``burn_in`` fraction of each rollout are discarded.  The
    standard error treats rollouts as independent replicates.
    """
    if n_rollouts < 1:
        raise DiagnosticError("need at least one rollout")
    start = int(round(burn_in * horizon))
    if start >= horizon:
        raise DiagnosticError("burn-in leaves no samples")
    policies = [c.local_policy() for c in controllers]
    per_rollout, contrib = [], []
    L_all, C_all = [], []
    for _ in range(n_rollouts):
        s_init = sample_initial_state(s0, rng, spread)
        ro = env.rollout(policies, horizon, s_ref, disturbance, rng, s_init,
                         deterministic=deterministic, record_transitions=False)
        obs = env.observe(ro.states, ro.references)
        L = lyapunov_values(controllers, obs, rng)                  # (h+1, nu)
        C = ro.costs                                                 # (h+1, nu)
        terms = L[start + 1:] - L[start:-1] + alpha3 * C[start:-1]   # (h-start, nu)
        c_i = terms.mean(axis=0)
        contrib.append(c_i)
        per_rollout.append(sum(c_i))
        L_all.append(L[start:])
        C_all.append(C[start:])
    contrib = np.array(contrib)
    per_sub = contrib.mean(axis=0)
    estimate = float(sum(per_sub))
    se = float(np.std(per_rollout, ddof=1) / np.sqrt(n_rollouts)) if n_rollouts > 1 else float("inf")
    report = LyapunovReport(estimate, se, per_sub, n_samples=n_rollouts * (horizon - start))
    try:
        fit = bound_ratios(np.vstack(L_all), np.vstack(C_all))
        report.alpha1, report.alpha2 = fit["pooled"]
        report.alpha_per_subsystem = np.array(fit["per_subsystem"])
    except DiagnosticError:
        pass
    return report


def bound_ratios(L, C, eps=EPS_COST):
    """Empirical sandwich constants ``min L/C`` and ``max L/C``.

    ``L`` and ``C`` are ``(n, nu)`` arrays of local Lyapunov values and stage
    costs.  Samples with cost at or below ``eps`` are skipped; the pooled
    ratio uses the summed values.
    """
    L = np.atleast_2d(np.asarray(L, dtype=float))
    C = np.atleast_2d(np.asarray(C, dtype=float))
    if L.shape != C.shape:
        raise DiagnosticError("Lyapunov values and costs must have the same shape")
    per = []
    for i in range(L.shape[1]):
        mask = C[:, i] > eps
        if not np.any(mask):
            per.append((float("nan"), float("nan")))
            continue
        r = L[mask, i] / C[mask, i]
        per.append((float(r.min()), float(r.max())))
    Ls, Cs = L.sum(axis=1), C.sum(axis=1)
    mask = Cs > eps
    if not np.any(mask):
        raise DiagnosticError("every sample has cost below the ratio threshold")
    r = Ls[mask] / Cs[mask]
    return {"pooled": (float(r.min()), float(r.max())), "per_subsystem": per}


def lyapunov_bound_fit(env: ProcessEnv, controllers, states, s_ref, rng, eps=EPS_COST):
    """Bound ratios of the trained local Lyapunov functions over a set of raw states."""
    states = np.atleast_2d(states)
    refs = np.broadcast_to(np.asarray(s_ref, dtype=float), states.shape)
    L = lyapunov_values(controllers, env.observe(states, refs), rng)
    return bound_ratios(L, env.local_costs(states, refs), eps)


def entropy_estimate(policy, obs, rng, n_samples=1):
    """Monte-Carlo entropy ``-E[log pi]`` of the squashed policy over the given observations."""
    obs = np.atleast_2d(obs)
    obs = np.repeat(obs, n_samples, axis=0)
    eps = rng.standard_normal((len(obs), policy.act_dim))
    _, logp, _ = policy.sample(obs, eps)
    return float(-logp.mean())


def gelman_rubin(chains):
    """Potential scale reduction factor of two or more equal-length scalar chains."""
    try:
        chains = np.asarray([np.asarray(c, dtype=float) for c in chains])
    except ValueError as exc:
        raise DiagnosticError("chains must have equal length") from exc
    if chains.ndim != 2 or chains.shape[0] < 2:
        raise DiagnosticError("need at least two chains")
    m, n = chains.shape
    if n < 2:
        raise DiagnosticError("each chain needs at least two samples")
    means = chains.mean(axis=1)
    W = chains.var(axis=1, ddof=1).mean()
    if not W > 0:
        raise DiagnosticError("zero within-chain variance")
    B = n * means.var(ddof=1)
    var_plus = (n - 1) / n * W + B / n
    return float(np.sqrt(var_plus / W))


def cost_chains(env: ProcessEnv, policies, s_ref, n_chains, horizon, disturbance, seed, s0=PAPER_S0,
                burn_in=0.2, spread=0.2, deterministic=True):
    """Total stage cost along independent closed-loop runs, burn-in removed."""
    start = int(round(burn_in * horizon))
    chains = []
    for rng in episode_rngs(seed, n_chains):
        s_init = sample_initial_state(s0, rng, spread)
        ro = env.rollout(policies, horizon, s_ref, disturbance, rng, s_init,
                         deterministic=deterministic, record_transitions=False)
        chains.append(ro.total_cost[start:])
    return chains
