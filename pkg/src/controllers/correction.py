"""
Step-2 correction: pick a parameter shift that steers the model's input
gradients toward the measured plant gradients, subject to a trust constraint
on the linearization error, and fold the matching first-order output
correction into a cumulative ledger.

The ledger correction C is a fixed trajectory on the sampling grid. It is held
constant in u, so input gradients of the corrected model come only from the
shifted parameters.
"""
import csv
import io
import json
import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Protocol

import numpy as np

from controllers.dynamics import (DEFAULT_GRID_STEP, OUTPUT_NAMES, InputConditions,
                                  IntegrationError, ModelParameters, sample_indices,
                                  simulate_model)
from utils.numerics import bounded_nelder_mead


class CorrectionError(RuntimeError):
    """Integration failed at a perturbed parameter point."""

    def __init__(self, message: str, perturbation: tuple | None = None):
        super().__init__(message)
        self.perturbation = perturbation


@dataclass(frozen=True)
class CorrectionConfig:
    eps_trunc_max: float = 0.05
    w_phi: tuple | None = None      # None: 1 / max(|measured gradient|, 1) per input
    w_g: tuple | None = None
    theta_bounds: tuple | None = None   # ((lb_KX, lb_KI), (ub_KX, ub_KI)); None: scenario bounds
    fd_step_theta: float = 1e-4     # relative
    fd_step_u: float = 0.02         # in range-scaled input units
    denominator_floor: float = 1e-3  # times the per-output scale
    solver_xatol: float = 1e-4
    solver_fatol: float = 1e-8
    solver_max_iter: int = 200

    def __post_init__(self):
        if not self.eps_trunc_max > 0:
            raise ValueError(f"correction.eps_trunc_max must be > 0, got {self.eps_trunc_max}")
        weights = [w for group in (self.w_phi, self.w_g) if group is not None for w in group]
        if any(w < 0 for w in weights):
            raise ValueError("correction weights must be >= 0")
        if self.w_phi is not None and self.w_g is not None and not any(weights):
            raise ValueError("correction weights must not all be zero")
        if self.theta_bounds is not None:
            lower, upper = (np.asarray(b, dtype=float) for b in self.theta_bounds)
            if lower.shape != (2,) or upper.shape != (2,) or np.any(lower >= upper) or np.any(lower <= 0):
                raise ValueError(f"correction.theta_bounds must be a non-empty positive box, "
                                 f"got {self.theta_bounds}")
        if not 0 < self.fd_step_theta < 0.5 or not 0 < self.fd_step_u < 0.5:
            raise ValueError("correction finite-difference steps must lie in (0, 0.5)")

    def bounds(self, fallback) -> tuple[np.ndarray, np.ndarray]:
        lower, upper = self.theta_bounds if self.theta_bounds is not None else fallback
        return np.asarray(lower, dtype=float), np.asarray(upper, dtype=float)

    def to_dict(self) -> dict:
        return {
            "eps_trunc_max": self.eps_trunc_max,
            "w_phi": None if self.w_phi is None else list(self.w_phi),
            "w_g": None if self.w_g is None else list(self.w_g),
            "theta_bounds": None if self.theta_bounds is None else [list(b) for b in self.theta_bounds],
            "fd_step_theta": self.fd_step_theta,
            "fd_step_u": self.fd_step_u,
            "denominator_floor": self.denominator_floor,
        }


# --- Ledger ---

@dataclass(frozen=True, eq=False)
class LedgerEntry:
    k: int
    dtheta: np.ndarray
    c: np.ndarray


@dataclass(frozen=True, eq=False)
class CorrectionLedger:
    sample_grid: np.ndarray
    C: np.ndarray                    # (N, 3) g/L
    history: tuple = ()

    @classmethod
    def empty(cls, sample_grid) -> "CorrectionLedger":
        grid = np.asarray(sample_grid, dtype=float)
        return cls(sample_grid=grid, C=np.zeros((grid.size, len(OUTPUT_NAMES))))

    @property
    def is_empty(self) -> bool:
        return not self.history and not np.any(self.C)

    def to_csv(self) -> str:
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(["t", "output", "C"])
        for t, row in zip(self.sample_grid, self.C):
            for name, value in zip(OUTPUT_NAMES, row):
                writer.writerow([f"{t:.12g}", name, f"{value:.12g}"])
        return buffer.getvalue()

    def to_dict(self) -> dict:
        return {
            "sample_grid": self.sample_grid.tolist(),
            "C": self.C.tolist(),
            "history": [{"k": e.k, "dtheta": e.dtheta.tolist(), "c": e.c.tolist()}
                        for e in self.history],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def apply_correction(ledger: CorrectionLedger, c_k, k: int, dtheta=None) -> CorrectionLedger:
    """C_k = C_{k-1} + c_k as a new ledger; the input ledger is left untouched."""
    c_k = np.asarray(c_k, dtype=float)
    if c_k.shape != ledger.C.shape:
        raise ValueError(f"correction shape {c_k.shape} does not match the ledger grid {ledger.C.shape}")
    if ledger.history and k <= ledger.history[-1].k:
        raise ValueError(f"ledger iteration {k} must follow {ledger.history[-1].k}")
    dtheta = np.zeros(2) if dtheta is None else np.asarray(dtheta, dtype=float).copy()
    entry = LedgerEntry(k=int(k), dtheta=dtheta, c=c_k.copy())
    return CorrectionLedger(sample_grid=ledger.sample_grid, C=ledger.C + c_k,
                            history=ledger.history + (entry,))


# --- Corrected model ---

@dataclass(frozen=True, eq=False)
class CorrectedModel:
    theta_prime: tuple
    ledger: CorrectionLedger
    base: ModelParameters

    @property
    def parameters(self) -> ModelParameters:
        return self.base.with_theta(self.theta_prime)


def raw_outputs(base: ModelParameters, theta, u: InputConditions, times: np.ndarray,
                grid_step: float = DEFAULT_GRID_STEP) -> tuple[np.ndarray, np.ndarray]:
    """Uncorrected model outputs (N, 3) and volume (N,) at the sampling times."""
    traj = simulate_model(base.with_theta(theta), u, grid_step)
    idx = sample_indices(grid_step, times)
    return traj.states[idx, :3], traj.states[idx, 3]


def eval_corrected(model: CorrectedModel, u: InputConditions,
                   grid_step: float = DEFAULT_GRID_STEP) -> tuple[np.ndarray, np.ndarray]:
    """y_raw(u, theta') - C on the ledger grid; the ledger term does not depend on u."""
    times = model.ledger.sample_grid
    if abs(times[-1] - u.t_f) > 1e-9 * max(u.t_f, 1.0):
        raise ValueError(f"ledger grid ends at {times[-1]} h but the batch ends at {u.t_f} h")
    y, volume = raw_outputs(model.base, model.theta_prime, u, times, grid_step)
    return y - model.ledger.C, volume


# --- Jacobian and truncation error ---

def output_jacobian(predict: Callable[[np.ndarray], np.ndarray], theta, fd_step: float = 1e-4,
                    bounds=None) -> np.ndarray:
    """
    Central-difference Jacobian of the flattened outputs w.r.t. theta, shape
    (n_samples * n_outputs, 2). predict(theta) returns the outputs at fixed u;
    a constant ledger offset does not change D.
    """
    theta = np.asarray(theta, dtype=float)
    steps = fd_step * np.maximum(np.abs(theta), 1e-12)
    if bounds is not None:
        lower, upper = (np.asarray(b, dtype=float) for b in bounds)
        if np.any(theta - steps < lower) or np.any(theta + steps > upper):
            raise ValueError(f"theta {theta} is closer to its bounds than the Jacobian step")
    columns = []
    for i in range(theta.size):
        shifted = []
        for sign in (1.0, -1.0):
            point = theta.copy()
            point[i] += sign * steps[i]
            try:
                shifted.append(np.asarray(predict(point), dtype=float).ravel())
            except IntegrationError as e:
                raise CorrectionError(f"Integration failed at theta[{i}] {'+' if sign > 0 else '-'} "
                                      f"{steps[i]:.3g}: {e}", perturbation=(i, sign)) from e
        columns.append((shifted[0] - shifted[1]) / (2 * steps[i]))
    return np.column_stack(columns)


def output_scale(y0: np.ndarray, n_outputs: int = len(OUTPUT_NAMES)) -> np.ndarray:
    """Per-entry scale: the max |y| of each output column, broadcast to the flat layout."""
    y0 = np.asarray(y0, dtype=float).ravel()
    if y0.size % n_outputs:
        return np.full(y0.size, max(float(np.max(np.abs(y0))), 1e-300))
    scale = np.max(np.abs(y0.reshape(-1, n_outputs)), axis=0)
    return np.tile(np.where(scale > 0, scale, 1.0), y0.size // n_outputs)


def truncation_error(predict: Callable[[np.ndarray], np.ndarray], theta, dtheta,
                     D: np.ndarray | None = None, y0: np.ndarray | None = None,
                     floor: float = 1e-3, fd_step: float = 1e-4) -> np.ndarray:
    """
    Relative linearization error |y(theta+dtheta) - y(theta) - D dtheta| / |y(theta)|
    per sample and output, the denominator floored at floor * output scale.
    """
    theta = np.asarray(theta, dtype=float)
    dtheta = np.asarray(dtheta, dtype=float)
    y0 = np.asarray(predict(theta) if y0 is None else y0, dtype=float).ravel()
    if not np.any(dtheta):
        return np.zeros_like(y0)
    D = output_jacobian(predict, theta, fd_step) if D is None else D
    y1 = np.asarray(predict(theta + dtheta), dtype=float).ravel()
    denominator = np.maximum(np.abs(y0), floor * output_scale(y0))
    return np.abs(y1 - y0 - D @ dtheta) / denominator


# --- Gradient matching ---

class GradientModel(Protocol):
    """The corrected model at a fixed batch input u_k, as seen by the matching step."""

    def outputs(self, theta: np.ndarray) -> np.ndarray:
        """Flattened raw outputs y(u_k, theta)."""

    def input_gradients(self, theta: np.ndarray, offset: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """(d phi / d z, d g / d z) at u_k for outputs y(theta) - offset, z the scaled inputs."""


@dataclass(frozen=True, eq=False)
class GradientMatch:
    dtheta: np.ndarray
    c: np.ndarray              # flattened D dtheta, same layout as GradientModel.outputs
    objective: float
    objective_at_zero: float
    max_trunc: float
    flags: tuple = ()
    n_evals: int = 0
    model_grads: tuple = field(default=(), repr=False)

    def to_dict(self) -> dict:
        return {"dtheta": self.dtheta.tolist(), "objective": self.objective,
                "objective_at_zero": self.objective_at_zero, "max_trunc": self.max_trunc,
                "flags": list(self.flags), "n_evals": self.n_evals}


def matching_weights(plant_grads, cfg: CorrectionConfig) -> tuple[np.ndarray, np.ndarray]:
    dphi, dg = (np.asarray(g, dtype=float) for g in plant_grads)
    w_phi = np.asarray(cfg.w_phi, dtype=float) if cfg.w_phi is not None else 1.0 / np.maximum(np.abs(dphi), 1.0)
    w_g = np.asarray(cfg.w_g, dtype=float) if cfg.w_g is not None else 1.0 / np.maximum(np.abs(dg), 1.0)
    return w_phi, w_g


def solve_gradient_match(theta_k, plant_grads, cfg: CorrectionConfig, problem: GradientModel,
                         ledger_offset: np.ndarray | None = None, bounds=None,
                         dtheta_start=None) -> GradientMatch:
    """
    Minimizes sum w_phi |dphi_plant - dphi_model| + sum w_g |dg_plant - dg_model|
    over dtheta, the model evaluated at theta_k + dtheta with outputs
    y - D(theta_k) dtheta - C_{k-1}, subject to max truncation error <= eps_trunc_max
    and theta_k + dtheta inside the parameter box.

    The search runs on the relative shift r = dtheta / theta_k:

    1. a linearized matching step from the sensitivity of the model gradients
       to r, backtracked along its projection onto the box until the
       truncation bound holds, then bisected out to the trust boundary;
    2. a 3x3 seed grid scaled to the radius found in 1 (or shrunk from
       sqrt(eps_trunc_max) until a seed is feasible);
    3. a penalized Nelder-Mead polish from the best feasible point.

    Only feasible points are ever kept; dtheta = 0 is the fallback.
    """
    theta_k = np.asarray(theta_k, dtype=float)
    dphi_p, dg_p = (np.asarray(g, dtype=float) for g in plant_grads)
    if not (np.all(np.isfinite(dphi_p)) and np.all(np.isfinite(dg_p))):
        raise ValueError(f"plant gradients must be finite, got {dphi_p}, {dg_p}")
    lower, upper = cfg.bounds(bounds if bounds is not None else (0.2 * theta_k, 5.0 * theta_k))
    w_phi, w_g = matching_weights((dphi_p, dg_p), cfg)
    weights = np.concatenate([w_phi, w_g])
    target = np.concatenate([dphi_p, dg_p])

    y0 = np.asarray(problem.outputs(theta_k), dtype=float).ravel()
    offset = np.zeros_like(y0) if ledger_offset is None else np.asarray(ledger_offset, dtype=float).ravel()

    def stacked(grads) -> np.ndarray:
        return np.concatenate([np.asarray(grads[0], dtype=float), np.asarray(grads[1], dtype=float)])

    def mismatch(grads) -> float:
        return float(weights @ np.abs(target - stacked(grads)))

    grads_zero = problem.input_gradients(theta_k, offset)
    j_zero = mismatch(grads_zero)
    zero = GradientMatch(dtheta=np.zeros_like(theta_k), c=np.zeros_like(y0), objective=j_zero,
                         objective_at_zero=j_zero, max_trunc=0.0, model_grads=grads_zero)

    if np.any(theta_k < lower) or np.any(theta_k > upper):
        logging.warning(f"theta_k {theta_k} lies outside the parameter box; no correction applied")
        return replace(zero, flags=("infeasible_start",))
    if j_zero == 0.0:
        return zero

    try:
        D = output_jacobian(problem.outputs, theta_k, cfg.fd_step_theta)
    except CorrectionError as e:
        logging.warning(f"Output Jacobian failed ({e}); no correction applied")
        return replace(zero, flags=("jacobian_failed",))

    r_lower = lower / theta_k - 1.0
    r_upper = upper / theta_k - 1.0
    best = {"j": j_zero, "r": np.zeros_like(theta_k), "trunc": 0.0, "grads": grads_zero}
    n_evals = 0

    def shifted_grads(r: np.ndarray):
        dtheta = r * theta_k
        return problem.input_gradients(theta_k + dtheta, offset + D @ dtheta)

    def evaluate(r: np.ndarray) -> tuple[float, float]:
        nonlocal n_evals
        n_evals += 1
        dtheta = r * theta_k
        if not np.any(dtheta):
            return j_zero, 0.0
        try:
            trunc = float(np.max(truncation_error(problem.outputs, theta_k, dtheta, D=D, y0=y0,
                                                  floor=cfg.denominator_floor)))
            grads = shifted_grads(r)
        except IntegrationError:
            return np.inf, np.inf
        j = mismatch(grads)
        logging.debug(f"Gradient match r={r} j={j:.6g} trunc={trunc:.3g}")
        if trunc <= cfg.eps_trunc_max and (j < best["j"] or (j == best["j"] and
                                                              np.sum(np.abs(r)) < np.sum(np.abs(best["r"])))):
            best.update(j=j, r=r.copy(), trunc=trunc, grads=grads)
        return j, trunc

    def feasible(r: np.ndarray) -> bool:
        j, trunc = evaluate(r)
        return np.isfinite(j) and trunc <= cfg.eps_trunc_max

    if dtheta_start is not None:
        evaluate(np.clip(np.asarray(dtheta_start, dtype=float) / theta_k, r_lower, r_upper))

    # 1. linearized step, backtracked to the trust boundary
    direction = _matching_direction(shifted_grads, stacked, stacked(grads_zero), target, weights,
                                    r_lower, r_upper, 10.0 * cfg.fd_step_theta)
    radius = 0.0
    if direction is not None:
        t_ok, t_bad = None, None
        t = 1.0
        for _ in range(40):
            r = np.clip(t * direction, r_lower, r_upper)
            if feasible(r):
                t_ok = t
                break
            t_bad = t
            t *= 0.5
        if t_ok is not None and t_bad is not None:
            for _ in range(8):
                t_mid = 0.5 * (t_ok + t_bad)
                if feasible(np.clip(t_mid * direction, r_lower, r_upper)):
                    t_ok = t_mid
                else:
                    t_bad = t_mid
        if t_ok is not None:
            radius = float(np.max(np.abs(np.clip(t_ok * direction, r_lower, r_upper))))

    # 2. coarse 3x3 seeds at the feasible radius
    s = radius if radius > 0 else min(float(np.sqrt(cfg.eps_trunc_max)), 0.5)
    for _ in range(20 if radius == 0 else 1):
        seeds = [np.clip(np.array([a, b]), r_lower, r_upper) for a in (-s, 0.0, s) for b in (-s, 0.0, s)]
        if any([feasible(seed) for seed in seeds if np.any(seed)]):
            break
        s *= 0.5
    radius = max(radius, float(np.max(np.abs(best["r"]))))

    # 3. penalized polish
    def penalized(r: np.ndarray) -> float:
        j, trunc = evaluate(r)
        if not np.isfinite(j):
            return 1e6 * (j_zero + 1.0)
        excess = max(0.0, trunc - cfg.eps_trunc_max)
        return j + 100.0 * (j_zero + 1e-12) * excess / cfg.eps_trunc_max

    flags = []
    span = 0.5 * (radius if radius > 0 else s)
    step = span / max(float(np.max(r_upper - r_lower)), 1e-12)
    result = None
    if best["j"] > 0.0:
        result = bounded_nelder_mead(penalized, best["r"].copy(), r_lower, r_upper, simplex_step=step,
                                     xatol=min(cfg.solver_xatol, 0.01 * span),
                                     fatol=cfg.solver_fatol * (j_zero + 1e-12),
                                     maxiter=cfg.solver_max_iter)
        evaluate(result.x)
    if result is not None and not result.converged:
        flags.append("solver_stall")
        logging.warning(f"Gradient matching stalled after {result.nfev} evaluations; "
                        f"keeping the best feasible shift (objective {j_zero:.4g} -> {best['j']:.4g})")

    dtheta = best["r"] * theta_k
    c = D @ dtheta
    logging.debug(f"Gradient match: dtheta={dtheta} objective {j_zero:.6g} -> {best['j']:.6g}, "
                  f"max truncation {best['trunc']:.3g}, trust radius {radius:.3g}")
    return GradientMatch(dtheta=dtheta, c=c, objective=best["j"], objective_at_zero=j_zero,
                         max_trunc=best["trunc"], flags=tuple(flags), n_evals=n_evals,
                         model_grads=best["grads"])


def _matching_direction(shifted_grads, stacked, g_zero, target, weights, r_lower, r_upper,
                        h: float) -> np.ndarray | None:
    """
    Weighted least-squares solution of J r = target - g_zero, J the forward-difference
    sensitivity of the stacked model gradients to r. None when J cannot be formed.
    """
    J = np.zeros((g_zero.size, r_lower.size))
    for i in range(r_lower.size):
        step = h if h <= r_upper[i] else -h
        if step < r_lower[i]:
            continue
        r = np.zeros(r_lower.size)
        r[i] = step
        try:
            J[:, i] = (stacked(shifted_grads(r)) - g_zero) / step
        except IntegrationError:
            return None
    if not np.any(J):
        return None
    direction, *_ = np.linalg.lstsq(weights[:, None] * J, weights * (target - g_zero), rcond=None)
    if not np.all(np.isfinite(direction)) or not np.any(direction):
        return None
    logging.debug(f"Linearized matching direction r={direction}")
    return direction
