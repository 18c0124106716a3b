"""Landweber, CP-full and CP-fast reconstruction loops.

All three iterate ``X <- P(X - step * A^T W(X))`` from ``X = 0`` with a
constant step, where ``P`` is the optional projection onto nonnegative
images and ``W`` is the algorithm's sinogram-domain update direction:

* ``landweber``: the exact gradient, ``W = phi'[AX]^* r``;
* ``cp_full``: per-ray channel pseudoinverse, ``W_l = pinv(J_l(AX)) r_l``;
* ``cp_fast``: the pseudoinverse of ``J(0) = -U`` for every ray.

``r = H(X) - Y_H`` is the log-data residual.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .radon import RadonOperator, estimate_norm
from .spectral import (
    SpectralSystem,
    _log_values,
    channel_jacobians,
    channel_pinv,
    phi,
    phi_adjoint,
)

log = logging.getLogger(__name__)

ALGORITHMS = ("landweber", "cp_full", "cp_fast")
DIVERGENCE_FACTOR = 10.0


@dataclass(frozen=True)
class SolverConfig:
    algorithm: str = "cp_fast"
    step_size: float | str = "auto"
    max_iterations: int = 500
    positivity: bool = True
    stop_tolerance: float = 0.0
    seed: int = 0
    damping: float = 0.0
    norm_iterations: int = 100

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {self.algorithm!r}; "
                             f"choose from {', '.join(ALGORITHMS)}")
        if self.step_size != "auto":
            if isinstance(self.step_size, str) or not (
                    math.isfinite(self.step_size) and self.step_size > 0):
                raise ValueError(f"step_size must be > 0 or 'auto', got {self.step_size!r}")
        if int(self.max_iterations) != self.max_iterations or self.max_iterations < 1:
            raise ValueError(f"max_iterations must be >= 1, got {self.max_iterations!r}")
        if not self.stop_tolerance >= 0:
            raise ValueError(f"stop_tolerance must be >= 0, got {self.stop_tolerance!r}")
        if not self.damping >= 0:
            raise ValueError(f"damping must be >= 0, got {self.damping!r}")


@dataclass
class IterationRecord:
    k: int
    lsq_value: float
    residual_norm: float
    rel_error: np.ndarray | None
    wall_time: float


@dataclass
class ReconstructionResult:
    X_final: np.ndarray
    trace: list[IterationRecord]
    stop_reason: str
    step_size: float
    X_best: np.ndarray | None = None
    best_iteration: np.ndarray | None = None
    iterates: list[np.ndarray] = field(default_factory=list, repr=False)

    @property
    def iterations(self) -> int:
        return self.trace[-1].k


def project_nonneg(X) -> np.ndarray:
    return np.maximum(X, 0.0)


def relative_errors(X, X_true) -> np.ndarray:
    """Per-material ``||X_m - X*_m|| / ||X*_m||`` (absolute where ``X*_m = 0``)."""
    diff = np.linalg.norm(X - X_true, axis=0)
    ref = np.linalg.norm(X_true, axis=0)
    return np.where(ref > 0, diff / np.where(ref > 0, ref, 1.0), diff)


def auto_step(sys: SpectralSystem, A: RadonOperator, algorithm: str,
              seed: int = 0, iterations: int = 100) -> float:
    """Constant step ``1 / ||A||^2``, further divided by ``||U||^2`` for Landweber."""
    if algorithm not in ALGORITHMS:
        raise ValueError(f"unknown algorithm {algorithm!r}")
    sigma = estimate_norm(A, iterations, seed)
    step = 1.0 / sigma**2
    if algorithm == "landweber":
        step /= np.linalg.norm(sys.U, 2) ** 2
    return step


def _direction(algorithm, sys, Z, r, pinv0, damping):
    """Sinogram-domain update ``W`` such that ``X <- X - step * A^T W``."""
    if algorithm == "cp_fast":
        return r @ pinv0.T
    if algorithm == "cp_full":
        J = channel_jacobians(sys, Z)
        return (channel_pinv(J, damping) @ r[:, :, None])[:, :, 0]
    return phi_adjoint(sys, Z, r)


def reconstruct(sys: SpectralSystem, A: RadonOperator, Y_H, config: SolverConfig,
                X_true=None, X0=None, keep_iterates: bool = False) -> ReconstructionResult:
    """Run ``config.algorithm`` and trace every iterate ``X^0 .. X^K``."""
    Y_H = _log_values(Y_H)
    if Y_H.shape != (A.shape[0], sys.n_bins):
        raise ValueError(f"log data must be {(A.shape[0], sys.n_bins)}, got {Y_H.shape}")
    algorithm = config.algorithm
    pinv0 = None
    if algorithm == "cp_fast":
        if sys.U_pinv is None:
            raise np.linalg.LinAlgError("U is rank deficient; cp_fast needs full column rank")
        pinv0 = channel_pinv(-sys.U)
    step = config.step_size
    if step == "auto":
        step = auto_step(sys, A, algorithm, config.seed, config.norm_iterations)

    shape = (A.shape[1], sys.n_materials)
    X = np.zeros(shape) if X0 is None else np.array(X0, dtype=np.float64).reshape(shape)
    if X_true is not None:
        X_true = np.asarray(X_true, dtype=np.float64).reshape(shape)
        best_err = np.full(sys.n_materials, np.inf)
        best_it = np.zeros(sys.n_materials, dtype=np.int64)
        X_best = X.copy()

    trace, iterates = [], []
    running_min = np.inf
    prev_value = None
    stop_reason = "max_iter"
    start = time.perf_counter()
    k = 0
    while True:
        try:
            Z = A.apply(X)
            r = phi(sys, Z) - Y_H
        except FloatingPointError as exc:
            log.warning("iteration %d: %s", k, exc)
            stop_reason = "diverged"
            break
        value = 0.5 * float(np.sum(r * r))
        rel = None
        if X_true is not None:
            rel = relative_errors(X, X_true)
            improved = rel < best_err
            best_err[improved] = rel[improved]
            best_it[improved] = k
            X_best[:, improved] = X[:, improved]
        trace.append(IterationRecord(k, value, math.sqrt(2.0 * value), rel,
                                     time.perf_counter() - start))
        if keep_iterates:
            iterates.append(X.copy())

        if not math.isfinite(value) or value > DIVERGENCE_FACTOR * running_min:
            stop_reason = "diverged"
            break
        running_min = min(running_min, value)
        if value == 0.0:
            stop_reason = "tolerance"
            break
        if prev_value is not None and abs(prev_value - value) < config.stop_tolerance * prev_value:
            stop_reason = "tolerance"
            break
        if k >= config.max_iterations:
            break
        prev_value = value

        W = _direction(algorithm, sys, Z, r, pinv0, config.damping)
        X = X - step * A.apply_adjoint(W)
        if config.positivity:
            X = project_nonneg(X)
        k += 1

    log.info("%s stopped after %d iterations (%s), D=%.6g", algorithm, k, stop_reason, value)
    result = ReconstructionResult(X, trace, stop_reason, float(step), iterates=iterates)
    if X_true is not None:
        result.X_best = X_best
        result.best_iteration = best_it
    return result


def _run(algorithm, sys, A, Y_H, config, X_true, **kwargs):
    if config.algorithm != algorithm:
        raise ValueError(f"config.algorithm is {config.algorithm!r}, expected {algorithm!r}")
    return reconstruct(sys, A, Y_H, config, X_true, **kwargs)


def run_landweber(sys, A, Y_H, config, X_true=None, **kwargs) -> ReconstructionResult:
    return _run("landweber", sys, A, Y_H, config, X_true, **kwargs)


def run_cp_full(sys, A, Y_H, config, X_true=None, **kwargs) -> ReconstructionResult:
    return _run("cp_full", sys, A, Y_H, config, X_true, **kwargs)


def run_cp_fast(sys, A, Y_H, config, X_true=None, **kwargs) -> ReconstructionResult:
    return _run("cp_fast", sys, A, Y_H, config, X_true, **kwargs)
