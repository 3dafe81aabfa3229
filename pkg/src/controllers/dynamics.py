"""
Fed-batch penicillin process: the plant simulator (with product hydrolysis),
the structurally mismatched model (no hydrolysis term) and a deterministic
fixed-step RK4 integrator.

States are (X, P, S, V): biomass, penicillin and substrate in g/L and culture
volume in L. Measured outputs are (X, P, S); V follows from the feed policy.
"""
import csv
import io
import logging
import math
from dataclasses import dataclass, field, fields, replace

import numpy as np

STATE_NAMES = ("X", "P", "S", "V")
OUTPUT_NAMES = ("X", "P", "S")
DEFAULT_GRID_STEP = 0.1  # h

# Keeps the Contois denominator non-zero at X = S = 0 without moving any result.
_TINY = 1e-300


class IntegrationError(RuntimeError):
    """Raised when a state becomes non-finite; carries the failing time in hours."""

    def __init__(self, t: float, message: str | None = None):
        self.t = float(t)
        super().__init__(message or f"Integration failed: non-finite state at t = {self.t:g} h")


@dataclass(frozen=True)
class PlantParameters:
    mu_X: float = 0.092      # 1/h
    K_X: float = 0.15        # Contois saturation constant (-)
    mu_P: float = 0.005      # 1/h
    K_P: float = 0.0002      # g/L
    K_I: float = 0.1         # g/L
    K_H: float = 0.04        # 1/h, hydrolysis
    Y_XS: float = 0.45       # g/g
    Y_PS: float = 0.9        # g/g
    m_X: float = 0.014       # 1/h
    s_f: float = 600.0       # g/L
    evap_rate: float = 6.226e-4  # 1/h

    def __post_init__(self):
        for f in fields(self):
            value = getattr(self, f.name)
            if not isinstance(value, (int, float)) or not math.isfinite(value):
                raise ValueError(f"plant.{f.name} must be a finite number, got {value!r}")
            # K_H = 0 (no mismatch) and mu_P = 0 (no production) are valid study variants
            if f.name in ("K_H", "mu_P"):
                if value < 0:
                    raise ValueError(f"plant.{f.name} must be >= 0, got {value}")
            elif value <= 0:
                raise ValueError(f"plant.{f.name} must be > 0, got {value}")

    def to_dict(self) -> dict:
        return {f.name: float(getattr(self, f.name)) for f in fields(self)}


@dataclass(frozen=True)
class ModelParameters:
    """
    Model kinetics: the adjustable pair theta = (K_X, K_I) on top of a frozen
    block of nominal constants. The frozen block's K_H is never used.
    """
    theta: tuple[float, float]
    fixed: PlantParameters = field(default_factory=PlantParameters)

    def __post_init__(self):
        theta = tuple(float(v) for v in self.theta)
        if len(theta) != 2:
            raise ValueError(f"model.theta must hold (K_X, K_I), got {self.theta!r}")
        if not all(math.isfinite(v) and v > 0 for v in theta):
            raise ValueError(f"model.theta entries must be > 0, got {theta}")
        object.__setattr__(self, "theta", theta)

    @classmethod
    def nominal(cls, plant: PlantParameters) -> "ModelParameters":
        return cls(theta=(plant.K_X, plant.K_I), fixed=plant)

    def with_theta(self, theta) -> "ModelParameters":
        return replace(self, theta=tuple(float(v) for v in theta))

    def kinetics(self) -> PlantParameters:
        return replace(self.fixed, K_X=self.theta[0], K_I=self.theta[1], K_H=0.0)


@dataclass(frozen=True)
class InputConditions:
    S0: float = 1.0      # g/L
    F: float = 0.04      # L/h
    X0: float = 0.1      # g/L
    P0: float = 0.0      # g/L
    V0: float = 100.0    # L
    t_f: float = 150.0   # h

    def __post_init__(self):
        for f in fields(self):
            value = getattr(self, f.name)
            if not isinstance(value, (int, float)) or not math.isfinite(value):
                raise ValueError(f"inputs.{f.name} must be a finite number, got {value!r}")
        if self.S0 < 0 or self.F < 0 or self.X0 < 0 or self.P0 < 0:
            raise ValueError("inputs.S0, F, X0 and P0 must be >= 0")
        if self.V0 <= 0 or self.t_f <= 0:
            raise ValueError("inputs.V0 and t_f must be > 0")

    @property
    def decision(self) -> np.ndarray:
        return np.array([self.S0, self.F])

    def with_decision(self, u) -> "InputConditions":
        return replace(self, S0=float(u[0]), F=float(u[1]))

    def to_dict(self) -> dict:
        return {f.name: float(getattr(self, f.name)) for f in fields(self)}


@dataclass(frozen=True, eq=False)
class Trajectory:
    grid: np.ndarray       # (n,) h
    states: np.ndarray     # (n, 4) X, P, S, V
    provenance: str = ""

    @property
    def grid_step(self) -> float:
        return float(self.grid[1] - self.grid[0])

    def state(self, name: str) -> np.ndarray:
        return self.states[:, STATE_NAMES.index(name)]

    @property
    def final(self) -> np.ndarray:
        return self.states[-1]

    def to_csv(self) -> str:
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(["t", *STATE_NAMES])
        for t, row in zip(self.grid, self.states):
            writer.writerow([f"{t:.12g}", *(f"{v:.12g}" for v in row)])
        return buffer.getvalue()


@dataclass(frozen=True, eq=False)
class MeasurementSet:
    sample_grid: np.ndarray   # (N,) h
    y_m: np.ndarray           # (N, 3) X, P, S in g/L
    volume: np.ndarray        # (N,) L, noise-free (known feed policy)
    noise_seed: int = 0
    noise_sigma_rel: float = 0.0

    def __post_init__(self):
        if len(self.sample_grid) == 0:
            raise ValueError("MeasurementSet needs at least one sample")

    @property
    def final_product_mass(self) -> float:
        """Measured P(t_f) * V(t_f), g."""
        return float(self.y_m[-1, 1] * self.volume[-1])

    def to_csv(self) -> str:
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(["t", "Xm", "Pm", "Sm"])
        for t, row in zip(self.sample_grid, self.y_m):
            writer.writerow([f"{t:.12g}", *(f"{v:.12g}" for v in row)])
        return buffer.getvalue()


# --- Integrator ---

def _rates(X, P, S, V, k: PlantParameters, F, K_H):
    # Works on floats and on numpy arrays alike; rates vanish when S <= 0.
    on = S > 0
    Sp = S * on
    growth = k.mu_X * Sp * X / (k.K_X * X + Sp + _TINY)
    production = k.mu_P * Sp * X / (k.K_P + Sp + Sp * Sp / k.K_I)
    dV = F - k.evap_rate * V
    dilution = dV / V
    return (
        growth - X * dilution,
        production - K_H * P - P * dilution,
        -growth / k.Y_XS - production / k.Y_PS - k.m_X * X * on + F * k.s_f / V - S * dilution,
        dV,
    )


def _rk4(k: PlantParameters, K_H, F, state, n_steps: int, h: float, record: bool):
    X, P, S, V = state
    rows = [state] if record else None
    half = 0.5 * h
    sixth = h / 6.0
    for _ in range(n_steps):
        a = _rates(X, P, S, V, k, F, K_H)
        b = _rates(X + half * a[0], P + half * a[1], S + half * a[2], V + half * a[3], k, F, K_H)
        c = _rates(X + half * b[0], P + half * b[1], S + half * b[2], V + half * b[3], k, F, K_H)
        d = _rates(X + h * c[0], P + h * c[1], S + h * c[2], V + h * c[3], k, F, K_H)
        X = X + sixth * (a[0] + 2.0 * b[0] + 2.0 * c[0] + d[0])
        P = P + sixth * (a[1] + 2.0 * b[1] + 2.0 * c[1] + d[1])
        S = S + sixth * (a[2] + 2.0 * b[2] + 2.0 * c[2] + d[2])
        V = V + sixth * (a[3] + 2.0 * b[3] + 2.0 * c[3] + d[3])
        # substrate floor
        S = S * (S > 0) + 0.0
        if record:
            rows.append((X, P, S, V))
    return rows if record else (X, P, S, V)


def step_count(t_f: float, grid_step: float) -> int:
    n = int(round(t_f / grid_step))
    if grid_step <= 0 or n < 1 or abs(n * grid_step - t_f) > 1e-9 * max(t_f, 1.0):
        raise ValueError(f"grid_step = {grid_step} h must divide t_f = {t_f} h")
    return n


def _integrate(k: PlantParameters, K_H: float, u: InputConditions, grid_step: float,
               provenance: str) -> Trajectory:
    n = step_count(u.t_f, grid_step)
    state = (float(u.X0), float(u.P0), float(u.S0), float(u.V0))
    try:
        rows = _rk4(k, K_H, float(u.F), state, n, grid_step, record=True)
    except (ZeroDivisionError, OverflowError) as e:
        raise IntegrationError(float("nan"), f"Integration failed ({provenance}): {e}") from e
    states = np.array(rows, dtype=float)
    grid = np.arange(n + 1) * grid_step
    bad = ~np.isfinite(states).all(axis=1) | (states[:, 3] <= 0)
    if bad.any():
        t_fail = float(grid[int(np.argmax(bad))])
        logging.debug(f"Non-finite state in {provenance} at t={t_fail:g} h")
        raise IntegrationError(t_fail)
    return Trajectory(grid=grid, states=states, provenance=provenance)


def simulate_plant(p: PlantParameters, u: InputConditions,
                   grid_step: float = DEFAULT_GRID_STEP) -> Trajectory:
    """True process: hydrolysis removes product at rate K_H * P."""
    return _integrate(p, p.K_H, u, grid_step,
                      provenance=f"plant S0={u.S0:.6g} F={u.F:.6g}")


def simulate_model(m: ModelParameters, u: InputConditions,
                   grid_step: float = DEFAULT_GRID_STEP) -> Trajectory:
    """Mismatched model: identical except it has no hydrolysis term."""
    return _integrate(m.kinetics(), 0.0, u, grid_step,
                      provenance=f"model K_X={m.theta[0]:.6g} K_I={m.theta[1]:.6g} "
                                 f"S0={u.S0:.6g} F={u.F:.6g}")


def terminal_states(k: PlantParameters, K_H: float, u: InputConditions, S0: np.ndarray,
                    F: np.ndarray, grid_step: float = DEFAULT_GRID_STEP) -> np.ndarray:
    """
    End-of-batch states for a whole batch of (S0, F) pairs in one vectorized
    RK4 pass; returns shape (4, B). Non-finite entries are left as NaN.
    """
    n = step_count(u.t_f, grid_step)
    S0 = np.asarray(S0, dtype=float)
    F = np.asarray(F, dtype=float)
    ones = np.ones_like(S0)
    state = (u.X0 * ones, u.P0 * ones, S0.copy(), u.V0 * ones)
    with np.errstate(all="ignore"):
        final = _rk4(k, K_H, F, state, n, grid_step, record=False)
    out = np.vstack(final)
    out[:, ~np.isfinite(out).all(axis=0)] = np.nan
    return out


# --- Sampling ---

def sample_times(t_f: float, sample_step: float) -> np.ndarray:
    """Every sample_step hours after t = 0, plus t_f."""
    count = int(math.floor(t_f / sample_step + 1e-9))
    times = [sample_step * i for i in range(1, count + 1)]
    if not times or abs(times[-1] - t_f) > 1e-9 * max(t_f, 1.0):
        times.append(t_f)
    else:
        times[-1] = t_f
    return np.array(times, dtype=float)


def sample_indices(grid_step: float, times: np.ndarray) -> np.ndarray:
    idx = np.rint(np.asarray(times) / grid_step).astype(int)
    if np.any(np.abs(idx * grid_step - times) > 1e-9 * np.maximum(times, 1.0)):
        raise ValueError(f"sample times must be multiples of grid_step = {grid_step} h")
    return idx


def sample_outputs(traj: Trajectory, sample_step: float, noise_sigma_rel: float = 0.0,
                   seed: int = 0) -> MeasurementSet:
    """y_m = y * (1 + sigma * xi), xi ~ N(0, 1) from a generator seeded with `seed`."""
    if noise_sigma_rel < 0:
        raise ValueError(f"noise_sigma_rel must be >= 0, got {noise_sigma_rel}")
    grid_step = traj.grid_step
    if abs(sample_step / grid_step - round(sample_step / grid_step)) > 1e-9:
        raise ValueError(f"sample_step = {sample_step} h is not a multiple of grid_step = {grid_step} h")
    times = sample_times(float(traj.grid[-1]), sample_step)
    idx = sample_indices(grid_step, times)
    y = traj.states[idx, :3].copy()
    if noise_sigma_rel > 0:
        rng = np.random.default_rng(seed)
        y = y * (1.0 + noise_sigma_rel * rng.standard_normal(y.shape))
    return MeasurementSet(sample_grid=times, y_m=y, volume=traj.states[idx, 3].copy(),
                          noise_seed=int(seed), noise_sigma_rel=float(noise_sigma_rel))
