"""
Step-1 identification: least-squares fit of the adjustable parameters
(K_X, K_I) to one batch of measurements, plus the Gaussian (Laplace) belief
around the fit and the KL divergence between beliefs.
"""
import json
import logging
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
from scipy.stats import qmc

from controllers.dynamics import IntegrationError, MeasurementSet
from utils.numerics import bounded_nelder_mead

N_PARAMS = 2


class IdentificationError(RuntimeError):
    """The optimizer did not converge from any start; `best` holds the best-so-far fit."""

    def __init__(self, message: str, best: "FitResult | None" = None):
        super().__init__(message)
        self.best = best


class BeliefError(ValueError):
    pass


@dataclass(frozen=True)
class EstimationConfig:
    n_starts: int = 5           # previous estimate + (n_starts - 1) Latin-hypercube points
    weighted: bool = True       # residuals divided by the per-output max measured value
    max_iter: int = 400
    xatol: float = 1e-9         # in log-parameter space
    fatol: float = 1e-16
    jacobian_step: float = 1e-4  # relative, for the Laplace Jacobian
    variance_floor: float = 1e-24

    def __post_init__(self):
        if self.n_starts < 1:
            raise ValueError(f"estimation.n_starts must be >= 1, got {self.n_starts}")
        if self.max_iter < 1:
            raise ValueError(f"estimation.max_iter must be >= 1, got {self.max_iter}")


@dataclass(frozen=True, eq=False)
class GaussianBelief:
    mean: np.ndarray
    covariance: np.ndarray
    regularized: bool = False

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float).reshape(-1)
        cov = np.asarray(self.covariance, dtype=float)
        if cov.shape != (mean.size, mean.size):
            raise BeliefError(f"covariance shape {cov.shape} does not match mean of size {mean.size}")
        if not np.allclose(cov, cov.T, rtol=1e-10, atol=0.0):
            raise BeliefError("covariance must be symmetric")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "covariance", 0.5 * (cov + cov.T))

    @property
    def std(self) -> np.ndarray:
        return np.sqrt(np.diag(self.covariance))

    def shifted(self, mean) -> "GaussianBelief":
        return GaussianBelief(mean=np.asarray(mean, dtype=float), covariance=self.covariance,
                              regularized=self.regularized)

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "covariance": self.covariance.tolist(),
                "regularized": self.regularized}


@dataclass(frozen=True, eq=False)
class FitResult:
    theta_hat: np.ndarray
    sse: float                 # objective value at theta_hat (weighted when weighting is on)
    sse_raw: float             # unweighted sum of squared errors, (g/L)^2
    residuals: np.ndarray      # (N, 3) measured - predicted, g/L
    weights: np.ndarray        # (3,) per-output residual scale divisors
    n_evals: int
    converged: bool = True
    belief: GaussianBelief | None = None
    starts: list = field(default_factory=list)
    fallback: bool = False     # theta_hat kept from the previous iteration

    def with_belief(self, belief: GaussianBelief) -> "FitResult":
        return replace(self, belief=belief)

    def to_dict(self) -> dict:
        return {
            "theta_hat": self.theta_hat.tolist(),
            "sse": self.sse,
            "sse_raw": self.sse_raw,
            "covariance": None if self.belief is None else self.belief.covariance.tolist(),
            "diagnostics": {
                "n_evals": self.n_evals,
                "converged": self.converged,
                "weights": self.weights.tolist(),
                "regularized": None if self.belief is None else self.belief.regularized,
                "starts": self.starts,
                "fallback": self.fallback,
            },
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def output_weights(measurements: MeasurementSet, weighted: bool = True) -> np.ndarray:
    if not weighted:
        return np.ones(measurements.y_m.shape[1])
    scale = np.max(np.abs(measurements.y_m), axis=0)
    return np.where(scale > 0, scale, 1.0)


def make_residual_fn(measurements: MeasurementSet, predict: Callable[[np.ndarray], np.ndarray],
                     weighted: bool = True) -> Callable[[np.ndarray], np.ndarray]:
    """Flattened (y_m - y(theta)) / scale; predict(theta) returns (N, 3) outputs."""
    weights = output_weights(measurements, weighted)

    def residuals(theta: np.ndarray) -> np.ndarray:
        y = np.asarray(predict(np.asarray(theta, dtype=float)), dtype=float)
        return ((measurements.y_m - y) / weights).ravel()

    residuals.weights = weights
    return residuals


def identify(measurements: MeasurementSet, predict: Callable[[np.ndarray], np.ndarray],
             theta_init, bounds, cfg: EstimationConfig = EstimationConfig(),
             seed: int = 0) -> FitResult:
    """
    Bounded least squares of the adjustable parameters against predict(theta),
    the (ledger-corrected) model outputs at the batch's inputs.

    The search runs in log-parameter space from theta_init and from
    cfg.n_starts - 1 Latin-hypercube points; the best start wins, ties going
    to the lowest start index.
    """
    lower = np.log(np.asarray(bounds[0], dtype=float))
    upper = np.log(np.asarray(bounds[1], dtype=float))
    theta_init = np.asarray(theta_init, dtype=float)
    if np.any(theta_init < np.exp(lower) * (1 - 1e-12)) or np.any(theta_init > np.exp(upper) * (1 + 1e-12)):
        raise ValueError(f"theta_init {theta_init} lies outside the bounds {bounds}")

    residual_fn = make_residual_fn(measurements, predict, cfg.weighted)
    n_evals = 0

    def objective(z: np.ndarray) -> float:
        nonlocal n_evals
        n_evals += 1
        r = residual_fn(np.exp(z))
        return float(r @ r)

    starts = [np.clip(np.log(theta_init), lower, upper)]
    if cfg.n_starts > 1:
        sampler = qmc.LatinHypercube(d=N_PARAMS, seed=seed)
        for point in sampler.random(cfg.n_starts - 1):
            starts.append(lower + point * (upper - lower))

    outcomes = []
    for index, z0 in enumerate(starts):
        try:
            result = bounded_nelder_mead(objective, z0, lower, upper, xatol=cfg.xatol,
                                         fatol=cfg.fatol, maxiter=cfg.max_iter)
        except IntegrationError as e:
            if index == 0:
                raise
            logging.warning(f"Identification start {index} abandoned: {e}")
            continue
        outcomes.append((result.fun, index, result))

    # deterministic reduction: lowest value, then lowest start index
    outcomes.sort(key=lambda item: (item[0], item[1]))
    best_value, best_index, best = outcomes[0]
    theta_hat = np.exp(best.x)
    r = residual_fn(theta_hat)
    weights = residual_fn.weights
    residuals = r.reshape(measurements.y_m.shape) * weights
    fit = FitResult(
        theta_hat=theta_hat,
        sse=float(r @ r),
        sse_raw=float(np.sum(residuals ** 2)),
        residuals=residuals,
        weights=weights,
        n_evals=n_evals,
        converged=any(o[2].converged for o in outcomes),
        starts=[{"index": i, "theta": np.exp(o.x).tolist(), "value": v, "converged": o.converged}
                for v, i, o in sorted(outcomes, key=lambda item: item[1])],
    )
    logging.debug(f"Identified theta={theta_hat} sse={fit.sse:.6g} from start {best_index} "
                  f"({n_evals} model evaluations)")
    if not fit.converged:
        raise IdentificationError(
            f"Identification did not converge within {cfg.max_iter} iterations from any of "
            f"{len(outcomes)} starts (best sse = {fit.sse:.6g})", best=fit)
    return fit


def fit_at(measurements: MeasurementSet, predict: Callable[[np.ndarray], np.ndarray], theta,
           weighted: bool = True) -> FitResult:
    """FitResult for a fixed theta; used when a failed identification keeps the previous estimate."""
    theta = np.asarray(theta, dtype=float)
    residual_fn = make_residual_fn(measurements, predict, weighted)
    r = residual_fn(theta)
    weights = residual_fn.weights
    residuals = r.reshape(measurements.y_m.shape) * weights
    return FitResult(theta_hat=theta.copy(), sse=float(r @ r), sse_raw=float(np.sum(residuals ** 2)),
                     residuals=residuals, weights=weights, n_evals=1, converged=False, fallback=True)


def residual_jacobian(residual_fn: Callable[[np.ndarray], np.ndarray], theta,
                      rel_step: float = 1e-4) -> np.ndarray:
    """Central finite-difference Jacobian d r / d theta."""
    theta = np.asarray(theta, dtype=float)
    columns = []
    for i in range(theta.size):
        h = rel_step * max(abs(theta[i]), 1e-12)
        plus = theta.copy()
        minus = theta.copy()
        plus[i] += h
        minus[i] -= h
        columns.append((residual_fn(plus) - residual_fn(minus)) / (2 * h))
    return np.column_stack(columns)


def regularize_covariance(cov: np.ndarray) -> tuple[np.ndarray, bool]:
    eig = np.linalg.eigvalsh(cov)
    if eig.min() < 1e-12 * max(eig.max(), 0.0) or eig.min() <= 0:
        bump = 1e-10 * max(float(np.max(np.diag(cov))), np.finfo(float).tiny)
        return cov + bump * np.eye(cov.shape[0]), True
    return cov, False


def laplace_covariance(jacobian: np.ndarray, sigma2: float) -> tuple[np.ndarray, bool]:
    """sigma2 * (J^T J)^-1, regularized to stay positive definite."""
    jtj = jacobian.T @ jacobian
    singular = False
    try:
        if np.linalg.cond(jtj) > 1e14:
            raise np.linalg.LinAlgError("ill-conditioned J^T J")
        inverse = np.linalg.inv(jtj)
    except np.linalg.LinAlgError:
        singular = True
        inverse = np.linalg.pinv(jtj)
    cov, bumped = regularize_covariance(sigma2 * 0.5 * (inverse + inverse.T))
    return cov, singular or bumped


def laplace_belief(fit: FitResult, residual_fn: Callable[[np.ndarray], np.ndarray],
                   cfg: EstimationConfig = EstimationConfig()) -> GaussianBelief:
    """Gaussian belief around theta_hat from the Gauss-Newton Hessian and the residual variance."""
    if not np.all(np.isfinite(fit.theta_hat)):
        raise BeliefError(f"theta_hat must be finite, got {fit.theta_hat}")
    jacobian = residual_jacobian(residual_fn, fit.theta_hat, cfg.jacobian_step)
    dof = jacobian.shape[0] - jacobian.shape[1]
    if dof <= 0:
        raise BeliefError(f"need more residuals than parameters, got {jacobian.shape[0]}")
    sigma2 = max(fit.sse / dof, cfg.variance_floor)
    cov, regularized = laplace_covariance(jacobian, sigma2)
    if regularized:
        logging.warning(f"Parameter covariance at theta={fit.theta_hat} was regularized "
                        f"(J^T J near singular)")
    return GaussianBelief(mean=fit.theta_hat.copy(), covariance=cov, regularized=regularized)


def _check_pd(cov: np.ndarray, label: str):
    try:
        np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as e:
        raise BeliefError(f"{label} covariance is not positive definite") from e


def kl_divergence(p: GaussianBelief, q: GaussianBelief) -> float:
    """Closed-form d(p || q) between two Gaussian beliefs."""
    _check_pd(p.covariance, "p")
    _check_pd(q.covariance, "q")
    k = p.mean.size
    diff = q.mean - p.mean
    trace = float(np.trace(np.linalg.solve(q.covariance, p.covariance)))
    mahalanobis = float(diff @ np.linalg.solve(q.covariance, diff))
    _, logdet_q = np.linalg.slogdet(q.covariance)
    _, logdet_p = np.linalg.slogdet(p.covariance)
    value = 0.5 * (trace + mahalanobis - k + logdet_q - logdet_p)
    return max(value, 0.0)
