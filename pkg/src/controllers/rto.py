"""
Run-to-run optimization drivers.

Each iteration runs one plant batch at u_k, learns from it and proposes
u_{k+1}. Three strategies share the plumbing in RunToRun:

- proposed:  identify (K_X, K_I) against the ledger-corrected model, shift the
             parameters to match the measured input gradients, fold the
             first-order output correction into the ledger, re-optimize.
- two-step:  identify the raw model, re-optimize it.
- ma:        keep the nominal model, add filtered gradient and bias modifiers
             to the optimization problem.

Decision variables u = (S0, F) are handled in range-scaled units z inside every
solver and every reported gradient.
"""
import csv
import io
import json
import logging
import math
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import TYPE_CHECKING, Callable

import numpy as np

from controllers.correction import (CorrectionConfig, CorrectionLedger, apply_correction,
                                    solve_gradient_match)
from controllers.dynamics import (InputConditions, IntegrationError, ModelParameters,
                                  MeasurementSet, sample_indices, sample_outputs, sample_times,
                                  simulate_model, simulate_plant)
from controllers.estimation import (EstimationConfig, GaussianBelief, IdentificationError, fit_at,
                                    identify, kl_divergence, laplace_belief, make_residual_fn)
from utils.numerics import bounded_nelder_mead, derive_seed, forward_gradient

if TYPE_CHECKING:
    from controllers.scenario_manager import Scenario

INPUT_NAMES = ("S0", "F")
IDENTIFICATION_STREAM = 1000


class OptimizationError(RuntimeError):
    pass


@dataclass(frozen=True)
class OptimizationSpec:
    """Maximize P(t_f) V(t_f) (as minimizing phi = -P V) subject to V(t_f) <= V_max."""
    V_max: float                                 # L
    S0_bounds: tuple[float, float] = (1.0, 100.0)  # g/L
    F_bounds: tuple[float, float] = (0.01, 0.3)    # L/h

    def __post_init__(self):
        if not (math.isfinite(self.V_max) or self.V_max == math.inf) or self.V_max <= 0:
            raise ValueError(f"optimization.V_max must be > 0, got {self.V_max}")
        for name in ("S0_bounds", "F_bounds"):
            lo, hi = (float(v) for v in getattr(self, name))
            if not (math.isfinite(lo) and math.isfinite(hi)) or lo < 0 or lo >= hi:
                raise ValueError(f"optimization.{name} must be a non-empty box with 0 <= lo < hi, "
                                 f"got {getattr(self, name)}")
            object.__setattr__(self, name, (lo, hi))

    @property
    def lower(self) -> np.ndarray:
        return np.array([self.S0_bounds[0], self.F_bounds[0]])

    @property
    def upper(self) -> np.ndarray:
        return np.array([self.S0_bounds[1], self.F_bounds[1]])

    def scale(self, u) -> np.ndarray:
        return (np.asarray(u, dtype=float) - self.lower) / (self.upper - self.lower)

    def unscale(self, z) -> np.ndarray:
        return self.lower + np.asarray(z, dtype=float) * (self.upper - self.lower)

    def contains(self, u, tol: float = 1e-12) -> bool:
        z = self.scale(u)
        return bool(np.all(z >= -tol) and np.all(z <= 1 + tol))

    def evaluate(self, y: np.ndarray, volume: np.ndarray) -> tuple[float, float]:
        """(phi, g) from sampled outputs: phi = -P(t_f) V(t_f), g = V(t_f) - V_max."""
        return -float(y[-1, 1] * volume[-1]), float(volume[-1] - self.V_max)

    def to_dict(self) -> dict:
        return {"V_max": self.V_max, "S0_bounds": list(self.S0_bounds), "F_bounds": list(self.F_bounds)}


@dataclass(frozen=True, eq=False)
class ModifierSet:
    lambda_phi: np.ndarray = field(default_factory=lambda: np.zeros(2))
    lambda_g: np.ndarray = field(default_factory=lambda: np.zeros(2))
    eps_g: float = 0.0
    filter_gain: float = 0.5

    def __post_init__(self):
        if not 0 < self.filter_gain <= 1:
            raise ValueError(f"filter_gain must lie in (0, 1], got {self.filter_gain}")
        object.__setattr__(self, "lambda_phi", np.asarray(self.lambda_phi, dtype=float))
        object.__setattr__(self, "lambda_g", np.asarray(self.lambda_g, dtype=float))
        if not np.all(np.isfinite(self.stacked)):
            raise ValueError(f"modifiers must be finite, got {self.stacked}")

    @property
    def stacked(self) -> np.ndarray:
        return np.concatenate([self.lambda_phi, self.lambda_g, [self.eps_g]])

    @classmethod
    def from_stacked(cls, values, filter_gain: float) -> "ModifierSet":
        values = np.asarray(values, dtype=float)
        return cls(lambda_phi=values[:2], lambda_g=values[2:4], eps_g=float(values[4]),
                   filter_gain=filter_gain)

    def filtered(self, raw: "ModifierSet") -> "ModifierSet":
        """Lambda_k = K Lambda'_k + (1 - K) Lambda_{k-1}, one gain for the stacked vector."""
        K = self.filter_gain
        return ModifierSet.from_stacked(K * raw.stacked + (1.0 - K) * self.stacked, K)

    def to_dict(self) -> dict:
        return {"lambda_phi": self.lambda_phi.tolist(), "lambda_g": self.lambda_g.tolist(),
                "eps_g": self.eps_g, "filter_gain": self.filter_gain}


@dataclass(frozen=True, eq=False)
class KKTReport:
    grad_phi_model: np.ndarray
    grad_phi_plant: np.ndarray
    grad_g_model: np.ndarray
    grad_g_plant: np.ndarray
    mu: float
    constraint_active: bool
    stationarity_residual: float    # ||dphi + mu dg|| / max(|phi|, 1), plant quantities
    c1_gap: float                   # ||dphi_plant - dphi_model||
    plant_gradient_norm: float      # ||dphi_plant||
    hessian_phi_fd: np.ndarray | None = None
    hessian_pd: bool | None = None

    def to_dict(self) -> dict:
        return {
            "grad_phi_model": self.grad_phi_model.tolist(),
            "grad_phi_plant": self.grad_phi_plant.tolist(),
            "grad_g_model": self.grad_g_model.tolist(),
            "grad_g_plant": self.grad_g_plant.tolist(),
            "mu": self.mu,
            "constraint_active": self.constraint_active,
            "stationarity_residual": self.stationarity_residual,
            "c1_gap": self.c1_gap,
            "plant_gradient_norm": self.plant_gradient_norm,
            "hessian_phi_fd": None if self.hessian_phi_fd is None else self.hessian_phi_fd.tolist(),
            "hessian_pd": self.hessian_pd,
        }


@dataclass(frozen=True, eq=False)
class PlantGradients:
    dphi: np.ndarray    # d phi / d z
    dg: np.ndarray      # d g / d z
    phi: float
    g: float
    flags: tuple = ()
    n_batches: int = 0


# --- Configuration ---

@dataclass(frozen=True)
class TerminationConfig:
    max_iterations: int = 40
    theta_tol: float = 1e-4     # relative parameter moves, noise-free path
    u_tol: float = 1e-4         # scaled input move
    kl_eps1: float = 1e-3       # d(P'_{k-1} || P_k)
    kl_eps2: float = 1e-3       # d(P_k || P'_k)

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError(f"termination.max_iterations must be >= 1, got {self.max_iterations}")
        for name in ("theta_tol", "u_tol", "kl_eps1", "kl_eps2"):
            if not getattr(self, name) > 0:
                raise ValueError(f"termination.{name} must be > 0")


@dataclass(frozen=True)
class NoiseConfig:
    sigma_rel: float = 0.0

    def __post_init__(self):
        if not (math.isfinite(self.sigma_rel) and self.sigma_rel >= 0):
            raise ValueError(f"noise.sigma_rel must be >= 0, got {self.sigma_rel}")


@dataclass(frozen=True)
class OptimizerConfig:
    xatol: float = 1e-6
    fatol: float = 1e-10
    max_iter: int = 300
    penalty_weight: float = 10.0
    max_escalations: int = 4
    feasibility_tol: float = 1e-6   # relative to V_max


@dataclass(frozen=True)
class RunConfig:
    correction: CorrectionConfig = field(default_factory=CorrectionConfig)
    estimation: EstimationConfig = field(default_factory=EstimationConfig)
    termination: TerminationConfig = field(default_factory=TerminationConfig)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    filter_gain: float = 0.5
    central_differences: bool = False
    kkt_hessian: bool = True

    def __post_init__(self):
        if not 0 < self.filter_gain <= 1:
            raise ValueError(f"filter_gain must lie in (0, 1], got {self.filter_gain}")

    def to_dict(self) -> dict:
        return {
            "correction": self.correction.to_dict(),
            "estimation": vars(self.estimation).copy(),
            "termination": vars(self.termination).copy(),
            "noise": vars(self.noise).copy(),
            "optimizer": vars(self.optimizer).copy(),
            "filter_gain": self.filter_gain,
            "central_differences": self.central_differences,
            "kkt_hessian": self.kkt_hessian,
        }


# --- Records ---

@dataclass(eq=False)
class IterationRecord:
    k: int
    u: np.ndarray
    u_next: np.ndarray | None = None
    theta_prev: np.ndarray | None = None     # theta'_{k-1}
    theta_iden: np.ndarray | None = None     # theta_k after Step 1
    theta_prime: np.ndarray | None = None    # theta'_k after Step 2
    sse: float = float("nan")
    sse_corrected: float | None = None
    dtheta_iden: np.ndarray = field(default_factory=lambda: np.zeros(2))
    dtheta_corr: np.ndarray = field(default_factory=lambda: np.zeros(2))
    kl_iden: float | None = None
    kl_corr: float | None = None
    plant_phi: float = float("nan")
    plant_g: float = float("nan")
    model_phi: float = float("nan")
    kkt: KKTReport | None = None
    max_trunc: float | None = None
    match_objective: float | None = None
    match_objective_at_zero: float | None = None
    modifiers: ModifierSet | None = None
    belief: GaussianBelief | None = None
    flags: list = field(default_factory=list)

    @property
    def dtheta_iden_norm(self) -> float:
        return float(np.linalg.norm(self.dtheta_iden))

    @property
    def dtheta_corr_norm(self) -> float:
        return float(np.linalg.norm(self.dtheta_corr))

    @property
    def plant_product_mass(self) -> float:
        return -self.plant_phi

    def to_dict(self) -> dict:
        def vec(v):
            return None if v is None else np.asarray(v, dtype=float).tolist()
        return {
            "k": self.k,
            "u": vec(self.u),
            "u_next": vec(self.u_next),
            "theta_prev": vec(self.theta_prev),
            "theta_iden": vec(self.theta_iden),
            "theta_prime": vec(self.theta_prime),
            "sse": self.sse,
            "sse_corrected": self.sse_corrected,
            "dtheta_iden": vec(self.dtheta_iden),
            "dtheta_corr": vec(self.dtheta_corr),
            "kl_iden": self.kl_iden,
            "kl_corr": self.kl_corr,
            "plant_phi": self.plant_phi,
            "plant_g": self.plant_g,
            "model_phi": self.model_phi,
            "kkt": None if self.kkt is None else self.kkt.to_dict(),
            "max_trunc": self.max_trunc,
            "match_objective": self.match_objective,
            "match_objective_at_zero": self.match_objective_at_zero,
            "modifiers": None if self.modifiers is None else self.modifiers.to_dict(),
            "belief": None if self.belief is None else self.belief.to_dict(),
            "flags": list(self.flags),
        }


CSV_COLUMNS = ("k", "S0", "F", "phi_plant", "phi_model", "KX", "KI", "sse", "dtheta_iden_norm",
               "dtheta_corr_norm", "kl_iden", "kl_corr", "stationarity_residual", "flags")


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return f"{float(value):.12g}"


@dataclass(eq=False)
class RunResult:
    algorithm: str
    scenario: str
    seed: int
    records: list = field(default_factory=list)
    termination: str = "max_iterations"
    message: str = ""
    config: dict = field(default_factory=dict)
    ledger: CorrectionLedger | None = None

    @property
    def failed(self) -> bool:
        return self.termination == "failure"

    @property
    def iterations(self) -> int:
        return len(self.records)

    @property
    def final_u(self) -> np.ndarray | None:
        if not self.records:
            return None
        last = self.records[-1]
        return last.u_next if last.u_next is not None else last.u

    @property
    def final_theta(self) -> np.ndarray | None:
        for record in reversed(self.records):
            if record.theta_prime is not None:
                return record.theta_prime
        return None

    @property
    def s0_trace(self) -> list[float]:
        return [float(r.u[0]) for r in self.records]

    @property
    def total_sse(self) -> float:
        return float(sum(r.sse for r in self.records if np.isfinite(r.sse)))

    def to_dict(self) -> dict:
        return {
            "algorithm": self.algorithm,
            "scenario": self.scenario,
            "seed": self.seed,
            "termination": self.termination,
            "message": self.message,
            "iterations": self.iterations,
            "config": self.config,
            "records": [r.to_dict() for r in self.records],
            "ledger": None if self.ledger is None else self.ledger.to_dict(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_csv(self) -> str:
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for r in self.records:
            theta = r.theta_prime if r.theta_prime is not None else r.theta_iden
            writer.writerow([
                _fmt(r.k), _fmt(r.u[0]), _fmt(r.u[1]), _fmt(r.plant_phi), _fmt(r.model_phi),
                _fmt(None if theta is None else theta[0]), _fmt(None if theta is None else theta[1]),
                _fmt(r.sse), _fmt(r.dtheta_iden_norm), _fmt(r.dtheta_corr_norm),
                _fmt(r.kl_iden), _fmt(r.kl_corr),
                _fmt(None if r.kkt is None else r.kkt.stationarity_residual),
                ";".join(r.flags),
            ])
        return buffer.getvalue()


# --- Model evaluation ---

class ModelEvaluator:
    """
    Raw model outputs at the sampling times, memoized on (theta, S0, F). All
    objective and gradient evaluations of the drivers go through here.
    """

    def __init__(self, base: ModelParameters, template: InputConditions, spec: OptimizationSpec,
                 times: np.ndarray, grid_step: float, cache_size: int = 512):
        self.base = base
        self.template = template
        self.spec = spec
        self.times = np.asarray(times, dtype=float)
        self.grid_step = grid_step
        self._indices = sample_indices(grid_step, self.times)

        @lru_cache(maxsize=cache_size)
        def _simulate(theta: tuple, S0: float, F: float):
            u = template.with_decision((S0, F))
            traj = simulate_model(base.with_theta(theta), u, grid_step)
            states = traj.states[self._indices]
            states.setflags(write=False)
            return states

        self._simulate = _simulate

    def outputs(self, theta, u) -> tuple[np.ndarray, np.ndarray]:
        states = self._simulate(tuple(float(v) for v in theta), float(u[0]), float(u[1]))
        return states[:, :3], states[:, 3]

    def objective(self, theta, u, offset: np.ndarray | None = None) -> tuple[float, float]:
        y, volume = self.outputs(theta, u)
        if offset is not None:
            y = y - offset
        return self.spec.evaluate(y, volume)

    def input_gradients(self, theta, u, offset: np.ndarray | None = None, step: float = 0.02,
                        central: bool = False) -> tuple[np.ndarray, np.ndarray, list]:
        z = self.spec.scale(u)

        def f(zz):
            return np.array(self.objective(theta, self.spec.unscale(zz), offset))

        grad, backward = forward_gradient(f, z, step, central=central)
        return grad[0], grad[1], backward

    def predictor(self, u, offset: np.ndarray | None = None) -> Callable[[np.ndarray], np.ndarray]:
        def predict(theta):
            y, _ = self.outputs(theta, u)
            return y if offset is None else y - offset
        return predict


class LocalGradientProblem:
    """The corrected model at one batch input, in the form solve_gradient_match expects."""

    def __init__(self, evaluator: ModelEvaluator, u, step: float, central: bool = False):
        self.evaluator = evaluator
        self.u = np.asarray(u, dtype=float)
        self.step = step
        self.central = central
        self._shape = (evaluator.times.size, 3)

    def outputs(self, theta) -> np.ndarray:
        return self.evaluator.outputs(theta, self.u)[0].ravel()

    def input_gradients(self, theta, offset) -> tuple[np.ndarray, np.ndarray]:
        dphi, dg, _ = self.evaluator.input_gradients(theta, self.u, np.reshape(offset, self._shape),
                                                     self.step, self.central)
        return dphi, dg


# --- Operations ---

def estimate_plant_gradients(u_k, spec: OptimizationSpec,
                             measure: Callable[[np.ndarray, int], tuple[float, float]],
                             fd_step_u: float = 0.02, central: bool = False,
                             base: tuple[float, float] | None = None) -> PlantGradients:
    """
    Finite-difference d phi / d z and d g / d z from extra plant batches.
    measure(u, probe) runs one batch and returns its measured (phi, g); probe
    0 is the batch at u_k itself, perturbation batches count up from 1 so
    each gets its own noise stream.
    """
    u_k = np.asarray(u_k, dtype=float)
    if not spec.contains(u_k):
        raise ValueError(f"u_k = {u_k} lies outside the decision bounds")
    probes = 0

    def f(z):
        nonlocal probes
        probes += 1
        return np.array(measure(spec.unscale(z), probes))

    f0 = np.array(measure(u_k, 0)) if base is None else np.asarray(base, dtype=float)
    grad, backward = forward_gradient(f, spec.scale(u_k), fd_step_u, f0=f0, central=central)
    flags = tuple(f"backward_difference:{INPUT_NAMES[i]}" for i in backward)
    for i in backward:
        logging.warning(f"Plant gradient w.r.t. {INPUT_NAMES[i]} at {u_k} used a backward difference")
    return PlantGradients(dphi=grad[0], dg=grad[1], phi=float(f0[0]), g=float(f0[1]),
                          flags=flags, n_batches=probes + 1)


@dataclass(frozen=True, eq=False)
class ModelOptimum:
    u: np.ndarray
    phi: float
    g: float
    flags: tuple = ()
    nfev: int = 0


def optimize_model(evaluate: Callable[[np.ndarray], tuple[float, float]], spec: OptimizationSpec,
                   u_start, modifiers: ModifierSet | None = None, u_ref=None,
                   cfg: OptimizerConfig = OptimizerConfig()) -> ModelOptimum:
    """
    Local minimizer of the model-predicted phi subject to g <= 0 and the
    decision box, from u_start. With modifiers the problem becomes
    min phi + lambda_phi.(z - z_ref)  s.t.  g + eps_g + lambda_g.(z - z_ref) <= 0.

    The constraint enters as an exact penalty whose weight is raised tenfold
    until the result is feasible.
    """
    u_start = np.asarray(u_start, dtype=float)
    if not spec.contains(u_start):
        raise ValueError(f"u_start = {u_start} lies outside the decision bounds")
    z_ref = spec.scale(u_start if u_ref is None else u_ref)
    lam_phi = np.zeros(2) if modifiers is None else modifiers.lambda_phi
    lam_g = np.zeros(2) if modifiers is None else modifiers.lambda_g
    eps_g = 0.0 if modifiers is None else modifiers.eps_g

    phi_scale = max(abs(evaluate(u_start)[0]), 1.0)
    g_scale = max(spec.V_max, 1.0) if math.isfinite(spec.V_max) else 1.0
    tol = cfg.feasibility_tol * g_scale

    def modified(z) -> tuple[float, float]:
        phi, g = evaluate(spec.unscale(z))
        return phi + lam_phi @ (z - z_ref), g + eps_g + lam_g @ (z - z_ref)

    weight = cfg.penalty_weight
    z = spec.scale(u_start)
    nfev = 0
    flags = []
    for round_ in range(cfg.max_escalations + 1):
        w = weight

        def penalized(zz):
            phi, c = modified(zz)
            return phi / phi_scale + w * max(c, 0.0) / g_scale

        result = bounded_nelder_mead(penalized, z, np.zeros(2), np.ones(2), xatol=cfg.xatol,
                                     fatol=cfg.fatol, maxiter=cfg.max_iter)
        nfev += result.nfev
        z = result.x
        phi, c = modified(z)
        if c <= tol:
            if not result.converged:
                flags.append("solver_stall")
                logging.warning(f"Model optimization stalled after {nfev} evaluations; "
                                f"keeping the best feasible point")
            u = spec.unscale(z)
            raw_phi, raw_g = evaluate(u)
            logging.debug(f"Model optimum u={u} phi={raw_phi:.6g} g={raw_g:.3g} "
                          f"(penalty weight {w:g}, {nfev} evaluations)")
            return ModelOptimum(u=u, phi=raw_phi, g=raw_g, flags=tuple(flags), nfev=nfev)
        logging.debug(f"Penalty weight {w:g} left constraint violation {c:.3g}; escalating")
        weight *= 10.0
    raise OptimizationError(f"No feasible input found: constraint violation {c:.6g} L remains at "
                            f"u = {spec.unscale(z)} (V_max = {spec.V_max} L)")


def fd_hessian(fun: Callable[[np.ndarray], float], z: np.ndarray, step: float,
               lower: float = 0.0, upper: float = 1.0) -> np.ndarray:
    """
    Finite-difference Hessian at z in scaled coordinates. Coordinates with room
    on both sides get central stencils; within step of a bound the stencil turns
    one-sided, so every evaluation point stays inside [lower, upper] and z itself is never moved.
    """
    z = np.asarray(z, dtype=float)
    n = z.size
    H = np.zeros((n, n))
    f0 = fun(z)
    eye = np.eye(n) * step
    central = [z[i] - step >= lower and z[i] + step <= upper for i in range(n)]
    side = [1.0 if central[i] or z[i] + 2 * step <= upper else -1.0 for i in range(n)]
    for i in range(n):
        if central[i]:
            H[i, i] = (fun(z + eye[i]) - 2.0 * f0 + fun(z - eye[i])) / step ** 2
        else:
            s = side[i]
            H[i, i] = (fun(z + 2 * s * eye[i]) - 2.0 * fun(z + s * eye[i]) + f0) / step ** 2
        for j in range(i + 1, n):
            if central[i] and central[j]:
                H[i, j] = (fun(z + eye[i] + eye[j]) - fun(z + eye[i] - eye[j])
                           - fun(z - eye[i] + eye[j]) + fun(z - eye[i] - eye[j])) / (4 * step ** 2)
            else:
                si, sj = side[i], side[j]
                H[i, j] = (fun(z + si * eye[i] + sj * eye[j]) - fun(z + si * eye[i])
                           - fun(z + sj * eye[j]) + f0) / (si * sj * step ** 2)
            H[j, i] = H[i, j]
    return H


def kkt_report(u, model_evaluate: Callable[[np.ndarray], tuple[float, float]],
               plant: PlantGradients, spec: OptimizationSpec, fd_step_u: float = 0.02,
               hessian: bool = True, active_tol: float = 1e-3) -> KKTReport:
    """First-order optimality diagnostics at u, gradients in scaled units."""
    u = np.asarray(u, dtype=float)
    if not spec.contains(u):
        raise ValueError(f"u = {u} lies outside the decision bounds")
    z = spec.scale(u)

    def f(zz):
        return np.array(model_evaluate(spec.unscale(zz)))

    grad, _ = forward_gradient(f, z, fd_step_u)
    dphi_m, dg_m = grad[0], grad[1]

    g_scale = spec.V_max if math.isfinite(spec.V_max) else 1.0
    active = plant.g >= -active_tol * g_scale
    mu = 0.0
    if active and float(plant.dg @ plant.dg) > 0:
        mu = max(0.0, -float(plant.dg @ plant.dphi) / float(plant.dg @ plant.dg))
    stationarity = float(np.linalg.norm(plant.dphi + mu * plant.dg)) / max(abs(plant.phi), 1.0)

    H, pd = None, None
    if hessian:
        step = max(fd_step_u, 1e-3)
        H = fd_hessian(lambda zz: model_evaluate(spec.unscale(zz))[0], z, step)
        pd = bool(np.all(np.linalg.eigvalsh(0.5 * (H + H.T)) > 0))

    return KKTReport(grad_phi_model=dphi_m, grad_phi_plant=plant.dphi, grad_g_model=dg_m,
                     grad_g_plant=plant.dg, mu=mu, constraint_active=bool(active),
                     stationarity_residual=stationarity,
                     c1_gap=float(np.linalg.norm(plant.dphi - dphi_m)),
                     plant_gradient_norm=float(np.linalg.norm(plant.dphi)),
                     hessian_phi_fd=H, hessian_pd=pd)


# --- Drivers ---

def _relative_norm(delta, reference) -> float:
    return float(np.linalg.norm(delta) / max(np.linalg.norm(reference), 1e-300))


class RunToRun:
    """Shared loop: one plant batch per iteration, a strategy-specific update, termination."""

    algorithm = ""

    def __init__(self, scenario: "Scenario", cfg: RunConfig = RunConfig(), seed: int = 0):
        self.scenario = scenario
        self.cfg = cfg
        self.seed = int(seed)
        self.spec: OptimizationSpec = scenario.spec
        self.times = sample_times(scenario.inputs.t_f, scenario.sample_step)
        self.evaluator = ModelEvaluator(scenario.model, scenario.inputs, self.spec, self.times,
                                        scenario.grid_step)
        bounds = cfg.correction.theta_bounds or scenario.theta_bounds
        self.theta_bounds = (np.asarray(bounds[0], dtype=float), np.asarray(bounds[1], dtype=float))

    # plant access

    def plant_batch(self, k: int, u, probe: int = 0) -> MeasurementSet:
        inputs = self.scenario.inputs.with_decision(u)
        traj = simulate_plant(self.scenario.plant, inputs, self.scenario.grid_step)
        return sample_outputs(traj, self.scenario.sample_step, self.cfg.noise.sigma_rel,
                              seed=derive_seed(self.seed, k, probe))

    def plant_gradients(self, k: int, u, measurements: MeasurementSet) -> PlantGradients:
        def measure(uu, probe):
            m = self.plant_batch(k, uu, probe)
            return self.spec.evaluate(m.y_m, m.volume)

        base = self.spec.evaluate(measurements.y_m, measurements.volume)
        return estimate_plant_gradients(u, self.spec, measure, self.cfg.correction.fd_step_u,
                                        central=self.cfg.central_differences, base=base)

    def fit(self, k: int, measurements: MeasurementSet, u, theta_init, offset=None):
        predict = self.evaluator.predictor(u, offset)
        theta_init = np.clip(theta_init, *self.theta_bounds)
        try:
            fit = identify(measurements, predict, theta_init, self.theta_bounds, self.cfg.estimation,
                           seed=derive_seed(self.seed, k, IDENTIFICATION_STREAM))
        except (IdentificationError, IntegrationError) as e:
            logging.warning(f"Identification failed at iteration {k} ({e}); keeping theta = {theta_init}")
            fit = fit_at(measurements, predict, theta_init, self.cfg.estimation.weighted)
        residual_fn = make_residual_fn(measurements, predict, self.cfg.estimation.weighted)
        return fit.with_belief(laplace_belief(fit, residual_fn, self.cfg.estimation))

    def weighted_sse(self, measurements: MeasurementSet, y: np.ndarray) -> float:
        r = make_residual_fn(measurements, lambda _: y, self.cfg.estimation.weighted)(np.zeros(2))
        return float(r @ r)

    # loop

    def iterate(self, k: int, u: np.ndarray) -> tuple[IterationRecord, str | None]:
        raise NotImplementedError

    def snapshot(self) -> dict:
        return {"algorithm": self.algorithm, "scenario": self.scenario.name, "seed": self.seed,
                **self.cfg.to_dict()}

    def run(self) -> RunResult:
        result = RunResult(algorithm=self.algorithm, scenario=self.scenario.name, seed=self.seed,
                           config=self.snapshot())
        u = self.scenario.inputs.decision
        logging.info(f"Starting {self.algorithm} run on scenario '{self.scenario.name}' "
                     f"(seed {self.seed}, u0 = {u})")
        for k in range(1, self.cfg.termination.max_iterations + 1):
            try:
                record, reason = self.iterate(k, u)
            except Exception as e:
                logging.error(f"{self.algorithm} run aborted at iteration {k}: {e}", exc_info=True)
                result.termination = "failure"
                result.message = f"iteration {k}: {type(e).__name__}: {e}"
                break
            if result.records and record.plant_phi > result.records[-1].plant_phi:
                record.flags.append("objective_regressed")
            result.records.append(record)
            logging.info(f"[{self.algorithm}] k={k} S0={u[0]:.4f} F={u[1]:.5f} "
                         f"mass={record.plant_product_mass:.3f} g sse={record.sse:.4g}")
            if reason is not None:
                result.termination = reason
                break
            u = record.u_next
        else:
            result.message = f"stopped after {self.cfg.termination.max_iterations} iterations"
        result.ledger = getattr(self, "ledger", None)
        logging.info(f"{self.algorithm} run finished: {result.termination} after "
                     f"{result.iterations} iterations")
        return result


class ProposedRun(RunToRun):
    algorithm = "proposed"

    def __init__(self, scenario: "Scenario", cfg: RunConfig = RunConfig(), seed: int = 0):
        super().__init__(scenario, cfg, seed)
        self.ledger = CorrectionLedger.empty(self.times)
        self.theta_prime = np.asarray(scenario.model.theta, dtype=float)
        self.belief_prime: GaussianBelief | None = None

    def iterate(self, k, u):
        term = self.cfg.termination
        measurements = self.plant_batch(k, u)
        plant = self.plant_gradients(k, u, measurements)

        # Step 1: identification against the ledger-corrected model
        theta_prev = self.theta_prime.copy()
        C_prev = self.ledger.C
        fit = self.fit(k, measurements, u, theta_prev, offset=C_prev)
        theta_k = fit.theta_hat
        dtheta_iden = theta_k - theta_prev

        # Step 2: gradient matching and ledger update
        problem = LocalGradientProblem(self.evaluator, u, self.cfg.correction.fd_step_u,
                                       self.cfg.central_differences)
        match = solve_gradient_match(theta_k, (plant.dphi, plant.dg), self.cfg.correction, problem,
                                     ledger_offset=C_prev, bounds=self.theta_bounds)
        self.ledger = apply_correction(self.ledger, match.c.reshape(C_prev.shape), k, match.dtheta)
        theta_prime = theta_k + match.dtheta

        belief_k = fit.belief
        belief_prime = belief_k.shifted(theta_prime)
        kl_iden = None if self.belief_prime is None else kl_divergence(self.belief_prime, belief_k)
        kl_corr = kl_divergence(belief_k, belief_prime)

        C = self.ledger.C
        y_corr, _ = self.evaluator.outputs(theta_prime, u)
        sse_corrected = self.weighted_sse(measurements, y_corr - C)

        def corrected(uu):
            return self.evaluator.objective(theta_prime, uu, C)

        kkt = kkt_report(u, corrected, plant, self.spec, self.cfg.correction.fd_step_u,
                         hessian=self.cfg.kkt_hessian)
        optimum = optimize_model(corrected, self.spec, u, cfg=self.cfg.optimizer)

        self.theta_prime = theta_prime
        self.belief_prime = belief_prime
        record = IterationRecord(
            k=k, u=np.asarray(u, dtype=float), u_next=optimum.u, theta_prev=theta_prev,
            theta_iden=theta_k, theta_prime=theta_prime, sse=fit.sse, sse_corrected=sse_corrected,
            dtheta_iden=dtheta_iden, dtheta_corr=match.dtheta, kl_iden=kl_iden, kl_corr=kl_corr,
            plant_phi=plant.phi, plant_g=plant.g, model_phi=corrected(u)[0], kkt=kkt,
            max_trunc=match.max_trunc, match_objective=match.objective,
            match_objective_at_zero=match.objective_at_zero, belief=belief_k,
            flags=[*plant.flags, *(["identification_failed"] if fit.fallback else []), *match.flags,
                   *optimum.flags, *(["covariance_regularized"] if belief_k.regularized else [])],
        )

        if fit.fallback:
            return record, None
        if k >= 2 and kl_iden is not None and kl_iden <= term.kl_eps1 and kl_corr <= term.kl_eps2:
            return record, "kl_converged"
        u_move = float(np.max(np.abs(self.spec.scale(optimum.u) - self.spec.scale(u))))
        if (k >= 2 and _relative_norm(dtheta_iden, theta_prev) <= term.theta_tol
                and _relative_norm(match.dtheta, theta_k) <= term.theta_tol
                and u_move <= 10 * term.u_tol):
            return record, "parameters_converged"
        return record, None


class TwoStepRun(RunToRun):
    algorithm = "two-step"

    def __init__(self, scenario: "Scenario", cfg: RunConfig = RunConfig(), seed: int = 0):
        super().__init__(scenario, cfg, seed)
        self.theta = np.asarray(scenario.model.theta, dtype=float)
        self.belief: GaussianBelief | None = None

    def iterate(self, k, u):
        term = self.cfg.termination
        measurements = self.plant_batch(k, u)
        plant = self.plant_gradients(k, u, measurements)

        theta_prev = self.theta.copy()
        fit = self.fit(k, measurements, u, theta_prev)
        theta_k = fit.theta_hat
        kl_iden = None if self.belief is None else kl_divergence(self.belief, fit.belief)

        def model(uu):
            return self.evaluator.objective(theta_k, uu)

        kkt = kkt_report(u, model, plant, self.spec, self.cfg.correction.fd_step_u,
                         hessian=self.cfg.kkt_hessian)
        optimum = optimize_model(model, self.spec, u, cfg=self.cfg.optimizer)
        self.theta = theta_k
        self.belief = fit.belief

        record = IterationRecord(
            k=k, u=np.asarray(u, dtype=float), u_next=optimum.u, theta_prev=theta_prev,
            theta_iden=theta_k, theta_prime=theta_k, sse=fit.sse, dtheta_iden=theta_k - theta_prev,
            kl_iden=kl_iden, plant_phi=plant.phi, plant_g=plant.g, model_phi=model(u)[0], kkt=kkt,
            belief=fit.belief,
            flags=[*plant.flags, *(["identification_failed"] if fit.fallback else []), *optimum.flags],
        )
        u_move = float(np.max(np.abs(self.spec.scale(optimum.u) - self.spec.scale(u))))
        if (not fit.fallback and u_move <= term.u_tol
                and _relative_norm(theta_k - theta_prev, theta_prev) <= term.theta_tol):
            return record, "inputs_converged"
        return record, None


class ModifierAdaptationRun(RunToRun):
    algorithm = "ma"

    def __init__(self, scenario: "Scenario", cfg: RunConfig = RunConfig(), seed: int = 0):
        super().__init__(scenario, cfg, seed)
        self.theta = np.asarray(scenario.model.theta, dtype=float)
        self.modifiers = ModifierSet(filter_gain=cfg.filter_gain)

    def raw_modifiers(self, u, plant: PlantGradients) -> ModifierSet:
        phi_m, g_m = self.evaluator.objective(self.theta, u)
        dphi_m, dg_m, _ = self.evaluator.input_gradients(self.theta, u, step=self.cfg.correction.fd_step_u,
                                                         central=self.cfg.central_differences)
        return ModifierSet(lambda_phi=plant.dphi - dphi_m, lambda_g=plant.dg - dg_m,
                           eps_g=plant.g - g_m, filter_gain=self.cfg.filter_gain)

    def iterate(self, k, u):
        measurements = self.plant_batch(k, u)
        plant = self.plant_gradients(k, u, measurements)
        self.modifiers = self.modifiers.filtered(self.raw_modifiers(u, plant))
        modifiers = self.modifiers
        z_k = self.spec.scale(u)

        def modified(uu):
            phi, g = self.evaluator.objective(self.theta, uu)
            dz = self.spec.scale(uu) - z_k
            return phi + modifiers.lambda_phi @ dz, g + modifiers.eps_g + modifiers.lambda_g @ dz

        kkt = kkt_report(u, modified, plant, self.spec, self.cfg.correction.fd_step_u,
                         hessian=self.cfg.kkt_hessian)
        optimum = optimize_model(lambda uu: self.evaluator.objective(self.theta, uu), self.spec, u,
                                 modifiers=modifiers, u_ref=u, cfg=self.cfg.optimizer)
        y, _ = self.evaluator.outputs(self.theta, u)

        record = IterationRecord(
            k=k, u=np.asarray(u, dtype=float), u_next=optimum.u, theta_prev=self.theta,
            theta_iden=self.theta, theta_prime=self.theta, sse=self.weighted_sse(measurements, y),
            plant_phi=plant.phi, plant_g=plant.g, model_phi=modified(u)[0], kkt=kkt,
            modifiers=modifiers, flags=[*plant.flags, *optimum.flags],
        )
        u_move = float(np.max(np.abs(self.spec.scale(optimum.u) - z_k)))
        if k >= 2 and u_move <= self.cfg.termination.u_tol:
            return record, "inputs_converged"
        return record, None


def run_proposed(scenario: "Scenario", cfg: RunConfig = RunConfig(), seed: int = 0) -> RunResult:
    return ProposedRun(scenario, cfg, seed).run()


def run_two_step(scenario: "Scenario", cfg: RunConfig = RunConfig(), seed: int = 0) -> RunResult:
    return TwoStepRun(scenario, cfg, seed).run()


def run_modifier_adaptation(scenario: "Scenario", cfg: RunConfig = RunConfig(), seed: int = 0,
                            K: float | None = None) -> RunResult:
    if K is not None:
        cfg = replace(cfg, filter_gain=K)
    return ModifierAdaptationRun(scenario, cfg, seed).run()


ALGORITHMS = {
    "proposed": run_proposed,
    "two-step": run_two_step,
    "ma": run_modifier_adaptation,
}
