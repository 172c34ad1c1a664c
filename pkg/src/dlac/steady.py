"""Steady-state solving and reference-set construction."""
from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .exceptions import ConfigurationError, EvaluationError, IntegrationError, SolverError
from .process import (
    A_HIGH,
    A_LOW,
    INPUT_NAMES,
    N_INPUTS,
    N_STATES,
    PAPER_S0,
    STATE_NAMES,
    ProcessParams,
    check_state,
    derivatives,
    rk4_step,
)

log = logging.getLogger(__name__)

STEADY_TOL = 1e-8

# Heat-input box whose open-loop equilibria lie (almost) entirely on the
# ignited branch.  Below it the reactors extinguish to x_A1 ~ 1.
REF_GRID_LOW = np.array([2.4e6, 4.0e5, 2.4e6])
REF_GRID_HIGH = A_HIGH.copy()
IGNITED_MAX_XA1 = 0.5


def _fd_jacobian(fun, x, f0):
    J = np.empty((x.size, x.size))
    for j in range(x.size):
        h = 1e-7 * max(1.0, abs(x[j]))
        xp = x.copy()
        xp[j] += h
        J[:, j] = (fun(xp) - f0) / h
    return J


def newton_solve(fun, x0, tol=STEADY_TOL, max_iter=50):
    """Damped Newton iteration with a forward-difference Jacobian.

    Returns ``(x, residual_inf_norm, iterations)``; raises SolverError when
    the tolerance is not met.
    """
    x = np.array(x0, dtype=float)
    f = fun(x)
    res = np.max(np.abs(f))
    best_x, best_res = x.copy(), res
    it = 0
    while res >= tol and it < max_iter:
        it += 1
        J = _fd_jacobian(fun, x, f)
        try:
            dx = np.linalg.solve(J, -f)
        except np.linalg.LinAlgError as exc:
            raise SolverError(f"singular Jacobian: {exc}", best_x, best_res) from exc
        step = 1.0
        while step > 1e-6:
            trial = x + step * dx
            try:
                ft = fun(trial)
            except (EvaluationError, FloatingPointError):
                ft = None
            if ft is not None and np.all(np.isfinite(ft)) and np.max(np.abs(ft)) < (1 - 1e-4 * step) * res:
                break
            step *= 0.5
        else:
            raise SolverError("line search failed", best_x, best_res)
        x, f = trial, ft
        res = np.max(np.abs(f))
        if res < best_res:
            best_x, best_res = x.copy(), res
    if res >= tol:
        raise SolverError(f"no convergence after {max_iter} iterations (residual {best_res:.3e})",
                          best_x, best_res)
    return x, res, it


def solve_steady_state(a, p: ProcessParams, s_guess=PAPER_S0, *, tol=STEADY_TOL, max_iter=50,
                       settle_hours=200.0, full_output=False):
    """Equilibrium of the process under constant heat input ``a``.

    Newton is tried first from ``s_guess``; if it fails the model is
    integrated until the derivatives are small and then polished.
    """
    a = np.asarray(a, dtype=float)
    fun = lambda x: derivatives(x, a, p)
    try:
        x, res, it = newton_solve(fun, s_guess, tol, max_iter)
    except (SolverError, EvaluationError) as first:
        best = getattr(first, "best_residual", np.inf)
        log.debug("newton from guess failed (%s); integrating", first)
        y = np.array(s_guess, dtype=float)
        t = 0.0
        try:
            while t < settle_hours:
                y = rk4_step(y, a, 1.0, p, substeps=200)
                t += 1.0
                if np.max(np.abs(fun(y))) < 1e-3:
                    break
            x, res, it = newton_solve(fun, y, tol, max_iter)
        except (SolverError, IntegrationError, EvaluationError) as exc:
            best = min(best, getattr(exc, "best_residual", np.inf))
            raise SolverError(f"steady-state solve failed (best residual {best:.3e})",
                              getattr(exc, "best_state", None), best) from exc
    return (x, {"residual": res, "iterations": it}) if full_output else x


@dataclass
class ReferenceSet:
    """Steady (state, heat input) pairs; rows are aligned."""

    states: np.ndarray
    inputs: np.ndarray

    def __post_init__(self):
        self.states = np.atleast_2d(np.asarray(self.states, dtype=float))
        self.inputs = np.atleast_2d(np.asarray(self.inputs, dtype=float))
        if self.states.shape[1] != N_STATES or self.inputs.shape[1] != N_INPUTS:
            raise ConfigurationError("reference set needs 9 state and 3 input columns")
        if len(self.states) != len(self.inputs):
            raise ConfigurationError("states and inputs must have the same number of rows")

    def __len__(self):
        return len(self.states)

    def __getitem__(self, idx):
        if np.isscalar(idx) or isinstance(idx, (int, np.integer)):
            return self.states[idx], self.inputs[idx]
        return ReferenceSet(self.states[idx], self.inputs[idx])

    def to_csv(self, path) -> None:
        header = ",".join(STATE_NAMES + INPUT_NAMES)
        data = np.hstack([self.states, self.inputs])
        np.savetxt(path, data, delimiter=",", header=header, comments="", fmt="%.17g")

    @classmethod
    def from_csv(cls, path) -> "ReferenceSet":
        path = Path(path)
        with path.open() as fh:
            header = fh.readline().strip().split(",")
        if tuple(header) != STATE_NAMES + INPUT_NAMES:
            raise ConfigurationError(f"{path}: unexpected reference-set header {header}")
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        return cls(data[:, :N_STATES], data[:, N_STATES:])


def input_grid(low=REF_GRID_LOW, high=REF_GRID_HIGH, n=11) -> np.ndarray:
    """Cartesian grid of heat inputs, ``n`` points per axis."""
    low = np.asarray(low, dtype=float)
    high = np.asarray(high, dtype=float)
    if np.any(low < A_LOW - 1e-9) or np.any(high > A_HIGH + 1e-9) or np.any(low > high):
        raise ConfigurationError("grid must lie within the admissible heat-input bounds")
    axes = [np.linspace(lo, hi, n) if n > 1 else np.array([lo]) for lo, hi in zip(low, high)]
    return np.array(list(itertools.product(*axes)))


def _dedupe(states, inputs, rtol=1e-9):
    rows = np.hstack([states, inputs])
    keep = np.ones(len(rows), dtype=bool)
    for i in range(1, len(rows)):
        # drop row i if any earlier row matches it
        close = np.all(np.abs(rows[:i] - rows[i]) <= rtol * np.abs(rows[i]), axis=1)
        keep[i] = not np.any(close & keep[:i])
    return states[keep], inputs[keep]


def generate_reference_set(p: ProcessParams, grid, s_init=PAPER_S0, settle_hours=30.0,
                           dt=0.01, max_x_A1=IGNITED_MAX_XA1, path=None) -> ReferenceSet:
    """Open-loop steady states for every grid input.

    All grid points are integrated together from ``s_init`` (the open-loop
    settling run) and each endpoint is then Newton-polished.  Points that
    fail to converge, leave the physical domain, or settle on the
    extinguished branch (``x_A1 > max_x_A1``; pass ``None`` to keep them)
    are dropped.
    """
    grid = np.atleast_2d(np.asarray(grid, dtype=float))
    if grid.size == 0:
        raise ConfigurationError("empty heat-input grid")
    if np.any(grid < A_LOW - 1e-9) or np.any(grid > A_HIGH + 1e-9):
        raise ConfigurationError("grid inputs must lie within the admissible heat-input bounds")
    y = np.tile(np.asarray(s_init, dtype=float), (len(grid), 1))
    n_steps = int(round(settle_hours / dt))
    for _ in range(n_steps):
        y = rk4_step(y, grid, dt, p, substeps=4)

    states, inputs = [], []
    for y0, a in zip(y, grid):
        try:
            s = solve_steady_state(a, p, y0)
            check_state(s)
            if max_x_A1 is not None and s[0] > max_x_A1:
                raise ConfigurationError(f"extinguished steady state (x_A1={s[0]:.3f})")
        except (SolverError, ConfigurationError) as exc:
            log.info("grid point %s dropped: %s", a, exc)
            continue
        states.append(s)
        inputs.append(a)
    if not states:
        raise ConfigurationError("no grid point converged to a steady state")
    ref = ReferenceSet(*_dedupe(np.array(states), np.array(inputs)))
    if path is not None:
        ref.to_csv(path)
    return ref


def select_references(ref_set: ReferenceSet) -> ReferenceSet:
    """Rows with the maximum, median and minimum ``x_A1``, in that order."""
    if len(ref_set) == 0:
        raise ConfigurationError("empty reference set")
    order = np.argsort(ref_set.states[:, 0], kind="stable")
    idx = [order[-1], order[(len(order) - 1) // 2], order[0]]
    return ref_set[np.array(idx)]


def evaluation_references(ref_set: ReferenceSet, n=11) -> ReferenceSet:
    """``n`` references spread uniformly by index over the set sorted by ``x_A1`` (descending)."""
    order = np.argsort(-ref_set.states[:, 0], kind="stable")
    idx = np.round(np.linspace(0, len(order) - 1, n)).astype(int)
    return ref_set[order[idx]]


def load_reference_set(path=None) -> ReferenceSet:
    """Read a reference-set CSV; without a path, the set shipped with the package.

    The shipped set is ``generate_reference_set(load_params(), input_grid())``.
    """
    if path is not None:
        if not Path(path).is_file():
            raise ConfigurationError(f"reference set {path} does not exist")
        return ReferenceSet.from_csv(path)
    from importlib import resources
    with resources.as_file(resources.files("dlac.data").joinpath("reference_set.csv")) as p:
        return ReferenceSet.from_csv(p)
