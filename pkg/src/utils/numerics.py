"""
Numerical helpers shared by the estimation, correction and optimization steps:
a box-bounded Nelder-Mead (clip + quadratic penalty), finite differences in
scaled coordinates, seed derivation and an order-preserving job runner.
"""
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.optimize import minimize


@dataclass
class SearchResult:
    x: np.ndarray
    fun: float
    nfev: int
    converged: bool
    message: str = ""
    history: list = field(default_factory=list)


def bounded_nelder_mead(fun: Callable[[np.ndarray], float], x0: Sequence[float],
                        lower: Sequence[float], upper: Sequence[float],
                        simplex_step: float = 0.05, bound_weight: float = 1e6,
                        xatol: float = 1e-7, fatol: float = 1e-10,
                        maxiter: int = 400) -> SearchResult:
    """
    Nelder-Mead over a box. Trial points outside the box are evaluated at their
    clipped image plus bound_weight times the squared violation, so the
    returned point is always clipped back inside.
    """
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    x0 = np.clip(np.asarray(x0, dtype=float), lower, upper)
    n = x0.size

    def penalized(x):
        xc = np.clip(x, lower, upper)
        violation = float(np.sum((x - xc) ** 2))
        return fun(xc) + bound_weight * violation

    simplex = [x0.copy()]
    for i in range(n):
        vertex = x0.copy()
        span = simplex_step * max(upper[i] - lower[i], 1e-12)
        vertex[i] = x0[i] + span if x0[i] + span <= upper[i] else x0[i] - span
        simplex.append(vertex)

    res = minimize(penalized, x0, method="Nelder-Mead",
                   options={"initial_simplex": np.array(simplex), "xatol": xatol,
                            "fatol": fatol, "maxiter": maxiter, "maxfev": 2 * maxiter})
    x = np.clip(res.x, lower, upper)
    fx = fun(x)
    logging.debug(f"Nelder-Mead finished: f={fx:.6g} nfev={res.nfev} status={res.status}")
    return SearchResult(x=x, fun=float(fx), nfev=int(res.nfev) + 1,
                        converged=bool(res.success), message=str(res.message))


def forward_gradient(fun: Callable[[np.ndarray], np.ndarray], z: np.ndarray, step: float,
                     f0: np.ndarray | None = None, lower: float = 0.0, upper: float = 1.0,
                     central: bool = False) -> tuple[np.ndarray, list[int]]:
    """
    Finite-difference gradient of a vector-valued fun in scaled coordinates.

    Returns (G, backward) where G[j, i] = d fun_j / d z_i and backward lists the
    coordinates that had to be probed backwards because z_i + step left the box.
    """
    z = np.asarray(z, dtype=float)
    f0 = np.atleast_1d(fun(z) if f0 is None else f0).astype(float)
    grad = np.zeros((f0.size, z.size))
    backward = []
    for i in range(z.size):
        plus = z.copy()
        minus = z.copy()
        plus[i] += step
        minus[i] -= step
        if central and plus[i] <= upper and minus[i] >= lower:
            grad[:, i] = (np.atleast_1d(fun(plus)) - np.atleast_1d(fun(minus))) / (2 * step)
        elif plus[i] <= upper + 1e-12:
            grad[:, i] = (np.atleast_1d(fun(plus)) - f0) / step
        else:
            backward.append(i)
            grad[:, i] = (f0 - np.atleast_1d(fun(minus))) / step
    return grad, backward


def derive_seed(seed: int, *keys: int) -> int:
    """Independent 32-bit stream seed for (seed, *keys); no wall-clock entropy."""
    return int(np.random.SeedSequence([int(seed), *[int(k) for k in keys]]).generate_state(1)[0])


def worker_count(requested: int | None = None) -> int:
    cap = os.getenv('R2R_THREADS')
    try:
        cap_value = int(cap) if cap else (os.cpu_count() or 1)
    except ValueError:
        logging.warning(f"Ignoring non-integer R2R_THREADS={cap!r}")
        cap_value = os.cpu_count() or 1
    if requested is not None:
        cap_value = min(cap_value, requested)
    return max(1, cap_value)


def run_jobs(fn: Callable, jobs: Iterable, workers: int = 1) -> list:
    """Runs fn over jobs, in parallel processes when workers > 1; results keep job order."""
    jobs = list(jobs)
    if workers <= 1 or len(jobs) <= 1:
        return [fn(job) for job in jobs]
    logging.info(f"Dispatching {len(jobs)} jobs to {workers} worker processes.")
    with ProcessPoolExecutor(max_workers=workers) as executor:
        return list(executor.map(fn, jobs))
