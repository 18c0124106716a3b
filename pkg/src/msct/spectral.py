"""Polychromatic forward model, its derivatives and the channel Jacobians.

Array conventions (all float64):

* material image ``X``: ``(N_x, M)``
* material sinogram ``Z = A X``: ``(N_y, M)``
* spectral data ``Y`` / log data ``Y_H``: ``(N_y, B)``
* effective spectra ``S``: ``(B, E)``; attenuations ``mu``: ``(E, M)``

Everything on the log side (``H``, ``phi``, Jacobians, gradients) runs on the
row-normalized spectra, so a system built from raw spectra gives the same
log data as its normalized twin.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .radon import RadonOperator

COUNTS = "counts"
LOG_DATA = "log_data"


@dataclass(frozen=True)
class EnergyGrid:
    energies: np.ndarray

    def __post_init__(self):
        e = np.asarray(self.energies, dtype=np.float64)
        if e.ndim != 1 or e.size < 1:
            raise ValueError("energy grid needs at least one node")
        if not np.all(np.isfinite(e)) or np.any(np.diff(e) <= 0):
            raise ValueError("energies must be finite and strictly increasing")
        object.__setattr__(self, "energies", e)

    @classmethod
    def uniform(cls, n_bins: int, e_min: float = 1.0, e_max: float = 150.0):
        return cls(np.linspace(e_min, e_max, n_bins))

    @property
    def n_bins(self) -> int:
        return self.energies.size


@dataclass(frozen=True)
class SpectralData:
    """Spectral measurements tagged as raw ``counts`` or ``log_data``."""

    values: np.ndarray
    kind: str

    def __post_init__(self):
        if self.kind not in (COUNTS, LOG_DATA):
            raise ValueError(f"unknown data kind {self.kind!r}")
        values = np.asarray(self.values, dtype=np.float64)
        if self.kind == COUNTS and np.any(values < 0):
            raise ValueError("counts must be nonnegative")
        if self.kind == LOG_DATA and not np.all(np.isfinite(values)):
            raise ValueError("log data must be finite")
        object.__setattr__(self, "values", values)


def _log_values(data) -> np.ndarray:
    if isinstance(data, SpectralData):
        if data.kind != LOG_DATA:
            raise TypeError(f"expected log_data, got {data.kind}")
        return data.values
    return np.asarray(data, dtype=np.float64)


def _channel_ratio(S, Q, mu):
    """Per-ray ``(S diag(q) mu) / (S q)`` for each row ``q`` of ``Q``.

    Returns ``(N, B, M)``.  This is the single kernel behind both ``U`` and
    the channel Jacobians, which keeps ``J(0) = -U`` bitwise.  Numerator and
    denominator are both ``(B, E) @ (E, M)`` products, so for ``q = 1`` the
    result is bitwise ``(S mu) / (S 1)``.
    """
    W = S[None, :, :] * Q[:, None, :]
    return (W @ mu) / (W @ np.ones_like(mu))


@dataclass(frozen=True)
class SpectralSystem:
    """Effective spectra ``S``, attenuation table ``mu`` and derived matrices.

    ``S`` is stored as given; :func:`normalize_spectra` builds the
    recalibrated system with unit row sums.
    """

    S: np.ndarray
    mu: np.ndarray
    U: np.ndarray = field(init=False, repr=False)
    U_pinv: np.ndarray | None = field(init=False, repr=False)
    F0: np.ndarray = field(init=False, repr=False)
    S_norm: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        S = np.array(self.S, dtype=np.float64)
        mu = np.array(self.mu, dtype=np.float64)
        if S.ndim != 2 or mu.ndim != 2 or S.shape[1] != mu.shape[0]:
            raise ValueError(f"incompatible shapes S{S.shape}, mu{mu.shape}")
        if not (np.all(np.isfinite(S)) and np.all(np.isfinite(mu))):
            raise ValueError("spectra and attenuations must be finite")
        if np.any(S < 0) or np.any(mu < 0):
            raise ValueError("spectra and attenuations must be nonnegative")
        F0 = S @ np.ones(S.shape[1])
        bad = np.flatnonzero(F0 <= 0)
        if bad.size:
            raise ValueError(f"spectra rows {bad.tolist()} have zero sum (unusable bins)")
        S_norm = S / F0[:, None]
        # built from S_norm, the matrix the Jacobians use, so J(0) = -U bitwise
        U = _channel_ratio(S_norm, np.ones((1, S.shape[1])), mu)[0]
        U_pinv = None
        if U.shape[0] >= U.shape[1] and np.linalg.matrix_rank(U) == U.shape[1]:
            U_pinv = np.linalg.solve(U.T @ U, U.T)
        for name, value in (("S", S), ("mu", mu), ("U", U), ("F0", F0), ("S_norm", S_norm),
                            ("U_pinv", U_pinv)):
            if value is not None:
                value.setflags(write=False)
            object.__setattr__(self, name, value)

    @property
    def n_bins(self) -> int:
        return self.S.shape[0]

    @property
    def n_energies(self) -> int:
        return self.S.shape[1]

    @property
    def n_materials(self) -> int:
        return self.mu.shape[1]

    def normalized(self) -> "SpectralSystem":
        return SpectralSystem(self.S_norm, self.mu)


def normalize_spectra(S_raw, mu) -> SpectralSystem:
    """Recalibrated system: each spectrum divided by its row sum."""
    S_raw = np.asarray(S_raw, dtype=np.float64)
    sums = S_raw.sum(axis=1)
    if np.any(sums <= 0):
        raise ValueError(f"spectra rows {np.flatnonzero(sums <= 0).tolist()} "
                         "have zero sum (unusable bins)")
    return SpectralSystem(S_raw / sums[:, None], mu)


def _check_image(sys: SpectralSystem, A: RadonOperator, X):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape != (A.shape[1], sys.n_materials):
        raise ValueError(f"material image must be {(A.shape[1], sys.n_materials)}, got {X.shape}")
    if not np.all(np.isfinite(X)):
        raise ValueError("material image contains non-finite values")
    return X


def _check_sino(sys: SpectralSystem, Z):
    Z = np.asarray(Z, dtype=np.float64)
    if Z.ndim != 2 or Z.shape[1] != sys.n_materials:
        raise ValueError(f"material sinogram must have {sys.n_materials} columns, got {Z.shape}")
    return Z


def _check_data(sys: SpectralSystem, A: RadonOperator, eta):
    eta = np.asarray(eta, dtype=np.float64)
    if eta.shape != (A.shape[0], sys.n_bins):
        raise ValueError(f"spectral data must be {(A.shape[0], sys.n_bins)}, got {eta.shape}")
    return eta


def _transmission(sys: SpectralSystem, Z) -> np.ndarray:
    """``exp(-Z mu^T)``, shape ``(N_y, E)``."""
    return np.exp(-(Z @ sys.mu.T))


def _safe_log(values):
    if np.any(values <= 0):
        rows = np.unique(np.nonzero(values <= 0)[0])
        raise FloatingPointError(
            f"bin-summed transmission underflowed to 0 on {rows.size} rays "
            f"(first: {rows[0]}); attenuation is unreasonably large")
    return np.log(values)


def virtual_data(sys: SpectralSystem, Z) -> np.ndarray:
    """Per-energy transmission factors ``exp(-mu Z^T)``, shape ``(E, N_y)``."""
    Z = _check_sino(sys, Z)
    return _transmission(sys, Z).T


def phi(sys: SpectralSystem, Z) -> np.ndarray:
    """Channel nonlinearity ``log(exp(-Z mu^T) S_norm^T)`` on a material sinogram.

    Evaluated as ``log1p(expm1(-Z mu^T) S_norm^T)``, which is exactly 0 at
    ``Z = 0`` and keeps full relative accuracy for weak attenuation.
    """
    Z = _check_sino(sys, Z)
    G = np.expm1(-(Z @ sys.mu.T)) @ sys.S_norm.T
    if G.size and G.min() <= -0.5:
        # only strongly attenuated rays can underflow; check them exactly
        _safe_log(_transmission(sys, Z) @ sys.S_norm.T)
    return np.log1p(G)


def forward_F(sys: SpectralSystem, A: RadonOperator, X) -> np.ndarray:
    """Expected intensities ``exp(-A X mu^T) S^T`` with the spectra as stored."""
    X = _check_image(sys, A, X)
    return _transmission(sys, A.apply(X)) @ sys.S.T


def forward_H(sys: SpectralSystem, A: RadonOperator, X) -> np.ndarray:
    """Log data ``log(F(X) / F(0))``, evaluated as ``phi(A X)``."""
    X = _check_image(sys, A, X)
    return phi(sys, A.apply(X))


def dF(sys: SpectralSystem, A: RadonOperator, X, xi) -> np.ndarray:
    X = _check_image(sys, A, X)
    xi = _check_image(sys, A, xi)
    Q = _transmission(sys, A.apply(X))
    return -(Q * (A.apply(xi) @ sys.mu.T)) @ sys.S.T


def dF_adjoint(sys: SpectralSystem, A: RadonOperator, X, eta) -> np.ndarray:
    X = _check_image(sys, A, X)
    eta = _check_data(sys, A, eta)
    Q = _transmission(sys, A.apply(X))
    return -A.apply_adjoint((Q * (eta @ sys.S)) @ sys.mu)


def phi_derivative(sys: SpectralSystem, Z, zeta) -> np.ndarray:
    """``phi'[Z](zeta)`` for a material-sinogram perturbation ``zeta``."""
    Q = _transmission(sys, Z)
    F = Q @ sys.S_norm.T
    return -((Q * (zeta @ sys.mu.T)) @ sys.S_norm.T) / F


def phi_adjoint(sys: SpectralSystem, Z, eta) -> np.ndarray:
    """``phi'[Z]^*(eta)``, mapping data-space ``eta`` to sinogram space."""
    Q = _transmission(sys, Z)
    F = Q @ sys.S_norm.T
    return -(Q * ((eta / F) @ sys.S_norm)) @ sys.mu


def dH(sys: SpectralSystem, A: RadonOperator, X, xi) -> np.ndarray:
    """Directional derivative of ``forward_H`` at ``X`` along ``xi``."""
    X = _check_image(sys, A, X)
    xi = _check_image(sys, A, xi)
    return phi_derivative(sys, A.apply(X), A.apply(xi))


def dH_adjoint(sys: SpectralSystem, A: RadonOperator, X, eta) -> np.ndarray:
    """Adjoint of :func:`dH` at ``X`` applied to data-space ``eta``."""
    X = _check_image(sys, A, X)
    eta = _check_data(sys, A, eta)
    return A.apply_adjoint(phi_adjoint(sys, A.apply(X), eta))


def lsq_value(sys: SpectralSystem, A: RadonOperator, X, Y_H) -> float:
    r = forward_H(sys, A, X) - _log_values(Y_H)
    return 0.5 * float(np.sum(r * r))


def lsq_gradient(sys: SpectralSystem, A: RadonOperator, X, Y_H) -> np.ndarray:
    Y_H = _log_values(Y_H)
    return dH_adjoint(sys, A, X, forward_H(sys, A, X) - Y_H)


def channel_jacobians(sys: SpectralSystem, Z) -> np.ndarray:
    """Jacobians of ``phi`` for every ray of ``Z``, shape ``(N_y, B, M)``."""
    Z = _check_sino(sys, Z)
    return -_channel_ratio(sys.S_norm, _transmission(sys, Z), sys.mu)


def channel_jacobian(sys: SpectralSystem, z_row) -> np.ndarray:
    """``B x M`` Jacobian of ``phi`` at a single ray value ``z_row``."""
    z_row = np.asarray(z_row, dtype=np.float64).reshape(1, -1)
    return channel_jacobians(sys, z_row)[0]


def channel_pinv(J, damping: float = 0.0) -> np.ndarray:
    """Damped pseudoinverse ``(J^T J + damping I)^-1 J^T``.

    Accepts one ``(B, M)`` matrix or a stack ``(N, B, M)``.
    """
    J = np.asarray(J, dtype=np.float64)
    if damping < 0:
        raise ValueError(f"damping must be >= 0, got {damping!r}")
    Jt = np.swapaxes(J, -1, -2)
    normal = Jt @ J
    if damping:
        normal = normal + damping * np.eye(J.shape[-1])
    try:
        return np.linalg.solve(normal, Jt)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError(
            "degenerate channel system: J^T J is singular; use damping > 0") from exc
