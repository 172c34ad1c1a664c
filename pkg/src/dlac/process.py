"""Two-reactor / flash-separator process model.

States are plain float arrays ordered as ``STATE_NAMES``; heat inputs are
arrays ordered ``(Q1, Q2, Q3)`` in kJ/h.  Time is in hours.  Every function
here accepts batched inputs with arbitrary leading axes so whole grids of
operating points can be integrated at once.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from importlib import resources
from pathlib import Path

import numpy as np
import yaml

from .exceptions import ConfigurationError, EvaluationError, IntegrationError

STATE_NAMES = ("x_A1", "x_B1", "T1", "x_A2", "x_B2", "T2", "x_A3", "x_B3", "T3")
INPUT_NAMES = ("Q1", "Q2", "Q3")
N_STATES = 9
N_INPUTS = 3
MASS_FRACTION_IDX = np.array([0, 1, 3, 4, 6, 7])
TEMPERATURE_IDX = np.array([2, 5, 8])

# Benchmark operating data (state table and input table of the benchmark study).
PAPER_S_REF = np.array([
    [0.3628, 0.5961, 451.6020, 0.3768, 0.5817, 442.6132, 0.1623, 0.7490, 445.0317],
    [0.2063, 0.6748, 474.5915, 0.2273, 0.6546, 464.9403, 0.0794, 0.7035, 470.7400],
    [0.0496, 0.4003, 533.1381, 0.0686, 0.3943, 525.2897, 0.0155, 0.2858, 531.8112],
])
PAPER_S0 = np.array([0.1763, 0.6731, 480.3165, 0.1965, 0.6536, 472.7863, 0.0651, 0.6703, 474.8877])
PAPER_A_REF = np.array([
    [3.982e6, 1.114e6, 1.059e6],
    [2.062e6, 9.247e5, 3.823e6],
    [3.829e6, 4.129e5, 4.044e6],
])
A_LOW = np.array([6.496e5, 2.240e5, 6.496e5])
A_HIGH = np.array([4.872e6, 1.680e6, 4.872e6])

SIGMA_W1 = np.array([0.01, 0.01, 0.5] * 3)
SIGMA_W2 = np.array([1.0, 1.0, 50.0] * 3)
B_W1 = np.full(N_STATES, 5.0)
B_W2 = np.full(N_STATES, 500.0)

DENOMINATOR_TOL = 1e-12
MIN_TEMPERATURE = 1.0


@dataclass(frozen=True)
class ProcessParams:
    """Physical constants of the reactor-separator benchmark.

    Enthalpies are effective per-unit values chosen so that ``dH/c_p`` (K)
    and ``Q/(rho c_p V)`` (K/h) enter the energy balances directly.
    """

    V1: float = 1.0
    V2: float = 0.5
    V3: float = 1.0
    F10: float = 5.04
    F20: float = 5.04
    F1: float = 55.44
    F2: float = 60.48
    Fr: float = 50.4
    Fp: float = 0.504
    x_A10: float = 1.0
    x_B10: float = 0.0
    x_A20: float = 1.0
    x_B20: float = 0.0
    T10: float = 300.0
    T20: float = 300.0
    k1: float = 9.97e6
    k2: float = 9.0e6
    E1: float = 5.0e4
    E2: float = 6.0e4
    r: float = 8.314
    dH1: float = -1130.0
    dH2: float = -850.0
    dH_vap1: float = -3.53e4
    dH_vap2: float = -1.57e4
    dH_vap3: float = -4.068e4
    c_p: float = 10.31
    rho: float = 1000.0
    alpha_A: float = 3.5
    alpha_B: float = 1.0
    alpha_C: float = 0.5

    def __post_init__(self):
        positive = ("V1", "V2", "V3", "F10", "F20", "F1", "F2", "Fr", "Fp",
                    "c_p", "rho", "alpha_A", "alpha_B", "alpha_C", "r", "T10", "T20")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ConfigurationError(f"{name} must be strictly positive")
        if not self.alpha_A > self.alpha_B > self.alpha_C:
            raise ConfigurationError("relative volatilities must satisfy alpha_A > alpha_B > alpha_C")

    @property
    def alphas(self) -> np.ndarray:
        return np.array([self.alpha_A, self.alpha_B, self.alpha_C])

    @property
    def dH_vap(self) -> np.ndarray:
        return np.array([self.dH_vap1, self.dH_vap2, self.dH_vap3])


_PARAM_GROUPS = {
    "volumes": ("V1", "V2", "V3"),
    "flows": ("F10", "F20", "F1", "F2", "Fr", "Fp"),
    "feeds": ("x_A10", "x_B10", "x_A20", "x_B20", "T10", "T20"),
    "kinetics": ("k1", "k2", "E1", "E2", "r"),
    "thermo": ("dH1", "dH2", "dH_vap1", "dH_vap2", "dH_vap3", "c_p", "rho"),
    "separator": ("alpha_A", "alpha_B", "alpha_C"),
}


def params_to_dict(p: ProcessParams) -> dict:
    flat = asdict(p)
    return {group: {k: flat[k] for k in keys} for group, keys in _PARAM_GROUPS.items()}


def params_from_dict(data: dict) -> ProcessParams:
    flat = {}
    for key, value in data.items():
        if isinstance(value, dict):
            flat.update(value)
        else:
            flat[key] = value
    known = {f.name for f in fields(ProcessParams)}
    unknown = set(flat) - known
    if unknown:
        raise ConfigurationError(f"unknown process parameters: {sorted(unknown)}")
    return ProcessParams(**{k: float(v) for k, v in flat.items()})


def load_params(path=None) -> ProcessParams:
    """Read a nested YAML parameter file; ``None`` loads the bundled default."""
    if path is None:
        text = resources.files("dlac.data").joinpath("benchmark_params.yaml").read_text()
    else:
        text = Path(path).read_text()
    return params_from_dict(yaml.safe_load(text) or {})


def save_params(p: ProcessParams, path) -> None:
    Path(path).write_text(yaml.safe_dump(params_to_dict(p), sort_keys=False))


@dataclass(frozen=True)
class DisturbanceSpec:
    sigma: np.ndarray = field(default_factory=lambda: SIGMA_W1.copy())
    bound: np.ndarray = field(default_factory=lambda: B_W1.copy())

    def __post_init__(self):
        sigma = np.broadcast_to(np.asarray(self.sigma, dtype=float), (N_STATES,)).copy()
        bound = np.broadcast_to(np.asarray(self.bound, dtype=float), (N_STATES,)).copy()
        if np.any(sigma < 0):
            raise ConfigurationError("disturbance std-devs must be non-negative")
        if np.any(bound <= 0):
            raise ConfigurationError("disturbance bounds must be positive")
        object.__setattr__(self, "sigma", sigma)
        object.__setattr__(self, "bound", bound)

    @classmethod
    def none(cls) -> "DisturbanceSpec":
        return cls(np.zeros(N_STATES), B_W1)

    @classmethod
    def preset(cls, name: str) -> "DisturbanceSpec":
        presets = {"none": (np.zeros(N_STATES), B_W1), "w1": (SIGMA_W1, B_W1), "w2": (SIGMA_W2, B_W2)}
        try:
            sigma, bound = presets[name]
        except KeyError:
            raise ConfigurationError(f"unknown disturbance preset {name!r}") from None
        return cls(sigma.copy(), bound.copy())


def vapor_composition(x_A3, x_B3, x_C3, alpha_A, alpha_B, alpha_C):
    """Overhead vapor mass fractions of the flash separator."""
    wA = alpha_A * np.asarray(x_A3, dtype=float)
    wB = alpha_B * np.asarray(x_B3, dtype=float)
    wC = alpha_C * np.asarray(x_C3, dtype=float)
    denom = wA + wB + wC
    if np.any(~(denom > DENOMINATOR_TOL)):
        raise EvaluationError("degenerate separator composition: volatility-weighted sum vanishes")
    return wA / denom, wB / denom, wC / denom


def derivatives(s, a, p: ProcessParams) -> np.ndarray:
    """Right-hand side of the nine material and energy balances (units per hour)."""
    s = np.asarray(s, dtype=float)
    a = np.asarray(a, dtype=float)
    xA1, xB1, T1, xA2, xB2, T2, xA3, xB3, T3 = np.moveaxis(s, -1, 0)
    Q1, Q2, Q3 = np.moveaxis(a, -1, 0)

    xAr, xBr, xCr = vapor_composition(xA3, xB3, 1.0 - xA3 - xB3, p.alpha_A, p.alpha_B, p.alpha_C)

    ra1 = p.k1 * np.exp(-p.E1 / (p.r * T1)) * xA1
    rb1 = p.k2 * np.exp(-p.E2 / (p.r * T1)) * xB1
    ra2 = p.k1 * np.exp(-p.E1 / (p.r * T2)) * xA2
    rb2 = p.k2 * np.exp(-p.E2 / (p.r * T2)) * xB2
    heat = p.rho * p.c_p
    vap = p.Fr + p.Fp

    out = np.empty(np.broadcast(s[..., 0], a[..., 0]).shape + (N_STATES,))
    out[..., 0] = p.F10 / p.V1 * (p.x_A10 - xA1) + p.Fr / p.V1 * (xAr - xA1) - ra1
    out[..., 1] = p.F10 / p.V1 * (p.x_B10 - xB1) + p.Fr / p.V1 * (xBr - xB1) + ra1 - rb1
    out[..., 2] = (p.F10 / p.V1 * (p.T10 - T1) + p.Fr / p.V1 * (T3 - T1)
                   - p.dH1 / p.c_p * ra1 - p.dH2 / p.c_p * rb1 + Q1 / (heat * p.V1))
    out[..., 3] = p.F1 / p.V2 * (xA1 - xA2) + p.F20 / p.V2 * (p.x_A20 - xA2) - ra2
    out[..., 4] = p.F1 / p.V2 * (xB1 - xB2) + p.F20 / p.V2 * (p.x_B20 - xB2) + ra2 - rb2
    out[..., 5] = (p.F1 / p.V2 * (T1 - T2) + p.F20 / p.V2 * (p.T20 - T2)
                   - p.dH1 / p.c_p * ra2 - p.dH2 / p.c_p * rb2 + Q2 / (heat * p.V2))
    out[..., 6] = p.F2 / p.V3 * (xA2 - xA3) - vap / p.V3 * (xAr - xA3)
    out[..., 7] = p.F2 / p.V3 * (xB2 - xB3) - vap / p.V3 * (xBr - xB3)
    out[..., 8] = (p.F2 / p.V3 * (T2 - T3) + Q3 / (heat * p.V3)
                   + vap / (heat * p.V3) * (xAr * p.dH_vap1 + xBr * p.dH_vap2 + xCr * p.dH_vap3))
    return out


def rk4(f, y, h):
    """One classical Runge-Kutta step of ``dy/dt = f(y)``."""
    k1 = f(y)
    k2 = f(y + 0.5 * h * k1)
    k3 = f(y + 0.5 * h * k2)
    k4 = f(y + h * k3)
    return y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def _integrate(s, a, dt, p, substeps, offset):
    s = np.asarray(s, dtype=float)
    if dt < 0:
        raise ConfigurationError("time step must be non-negative")
    if dt == 0:
        return s.copy()
    h = dt / substeps

    def rhs(y):
        try:
            d = derivatives(y, a, p)
        except EvaluationError as exc:
            raise IntegrationError(f"right-hand side failed: {exc}") from exc
        return d if offset is None else d + offset

    y = s
    for sub in range(substeps):
        k1 = rhs(y)
        k2 = rhs(y + 0.5 * h * k1)
        k3 = rhs(y + 0.5 * h * k2)
        k4 = rhs(y + h * k3)
        for stage, k in enumerate((k1, k2, k3, k4), start=1):
            if not np.all(np.isfinite(k)):
                raise IntegrationError(f"non-finite derivative in substep {sub}, stage {stage}", stage=stage)
        y = y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if not np.all(np.isfinite(y)):
        raise IntegrationError("non-finite state after step", stage=4)
    return y


def rk4_step(s, a, dt: float, p: ProcessParams, substeps: int = 5) -> np.ndarray:
    """Advance the deterministic model by ``dt`` hours with the input held constant."""
    return _integrate(s, a, dt, p, substeps, None)


def truncated_normal(rng: np.random.Generator, sigma, bound, size=None) -> np.ndarray:
    """Draw from N(0, sigma^2) restricted to [-bound, bound] by rejection."""
    sigma = np.asarray(sigma, dtype=float)
    bound = np.asarray(bound, dtype=float)
    shape = np.broadcast_shapes(sigma.shape, bound.shape) if size is None else tuple(np.atleast_1d(size))
    sigma = np.broadcast_to(sigma, shape)
    bound = np.broadcast_to(bound, shape)
    out = sigma * rng.standard_normal(shape)
    bad = np.abs(out) > bound
    while np.any(bad):
        out[bad] = sigma[bad] * rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > bound
    return out


def project_feasible(s) -> np.ndarray:
    """Clip mass fractions into [0, 1], renormalise pairs summing above one, floor temperatures."""
    s = np.array(s, dtype=float, copy=True)
    for ia, ib in ((0, 1), (3, 4), (6, 7)):
        xa = np.clip(s[..., ia], 0.0, 1.0)
        xb = np.clip(s[..., ib], 0.0, 1.0)
        total = xa + xb
        over = total > 1.0
        xa = np.where(over, xa / np.where(over, total, 1.0), xa)
        # 1 - xa keeps the rescaled pair summing to at most one in floating point,
        # so a second projection is a no-op
        xb = np.where(over, 1.0 - xa, xb)
        s[..., ia] = xa
        s[..., ib] = xb
    s[..., TEMPERATURE_IDX] = np.maximum(s[..., TEMPERATURE_IDX], MIN_TEMPERATURE)
    return s


def stochastic_step(s, a, dt: float, p: ProcessParams, disturbance: DisturbanceSpec,
                    rng: np.random.Generator, substeps: int = 5, return_noise: bool = False):
    """RK4 step with a truncated-Gaussian derivative disturbance held over the interval."""
    s = np.asarray(s, dtype=float)
    noise = truncated_normal(rng, disturbance.sigma, disturbance.bound, size=s.shape)
    offset = None if not np.any(disturbance.sigma) else noise
    nxt = project_feasible(_integrate(s, a, dt, p, substeps, offset))
    return (nxt, noise) if return_noise else nxt


def check_state(s) -> np.ndarray:
    """Validate the physical invariants of one or more process states."""
    s = np.asarray(s, dtype=float)
    if s.shape[-1] != N_STATES:
        raise ConfigurationError(f"state must have {N_STATES} components, got shape {s.shape}")
    if not np.all(np.isfinite(s)):
        raise ConfigurationError("state contains non-finite values")
    x = s[..., MASS_FRACTION_IDX]
    pair_sum = s[..., [0, 3, 6]] + s[..., [1, 4, 7]]
    if np.any(x < 0) or np.any(pair_sum > 1 + 1e-12):
        raise ConfigurationError("mass fractions must satisfy 0 <= x_A, x_B and x_A + x_B <= 1")
    if np.any(s[..., TEMPERATURE_IDX] <= 0):
        raise ConfigurationError("temperatures must be strictly positive")
    return s


def clip_inputs(a, low=A_LOW, high=A_HIGH) -> np.ndarray:
    return np.clip(np.asarray(a, dtype=float), low, high)
