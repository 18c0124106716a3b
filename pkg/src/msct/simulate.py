"""Phantoms, synthetic attenuation curves and spectra, and photon-count data."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .radon import RadonOperator, ScanGeometry, build_radon
from .spectral import COUNTS, LOG_DATA, EnergyGrid, SpectralData, SpectralSystem, forward_F

E_REF = 100.0
COUNT_FLOOR = 0.5
PROFILES = ("flat", "smooth")


@dataclass(frozen=True)
class Shape:
    """Disk or axis-aligned ellipse in pixel coordinates.

    Pixel ``(ix, iy)`` has its center at coordinates ``(ix, iy)``.  A
    ``flat`` shape paints ``density`` on every pixel center inside it; a
    ``smooth`` one paints ``density * (1 - rho^2)^2`` with ``rho`` the
    normalized elliptic radius, which vanishes with its slope at the rim.
    """

    shape: str
    center: tuple[float, float]
    radii: tuple[float, float]
    material_index: int
    density: float
    profile: str = "flat"

    def __post_init__(self):
        if self.shape not in ("disk", "ellipse"):
            raise ValueError(f"unknown shape {self.shape!r}")
        if self.profile not in PROFILES:
            raise ValueError(f"unknown profile {self.profile!r}; choose from {', '.join(PROFILES)}")
        radii = self.radii
        if np.isscalar(radii):
            radii = (radii, radii)
        radii = tuple(float(r) for r in radii)
        if self.shape == "disk" and radii[0] != radii[1]:
            raise ValueError("a disk has a single radius")
        if min(radii) <= 0:
            raise ValueError("radii must be > 0")
        if self.density < 0:
            raise ValueError(f"density must be >= 0, got {self.density}")
        if self.material_index < 0:
            raise ValueError(f"material_index must be >= 0, got {self.material_index}")
        object.__setattr__(self, "radii", radii)
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))


@dataclass(frozen=True)
class PhantomSpec:
    grid: tuple[int, int]
    shapes: list[Shape] = field(default_factory=list)


@dataclass(frozen=True)
class MaterialCurve:
    """Synthetic attenuation per unit density of one basis material.

    With ``reference_keV`` set, the curve is divided by its value at that
    energy, so the material image is measured in attenuation units
    (cm^-1 at the reference energy) instead of mass density.
    """

    name: str
    compton_coeff: float
    photo_coeff: float
    photo_exponent: float = 3.0
    k_edge_keV: float | None = None
    k_edge_jump: float = 1.0
    reference_keV: float | None = None

    def __call__(self, e):
        e = np.asarray(e, dtype=np.float64)
        jump = 1.0
        if self.k_edge_keV is not None:
            jump = np.where(e >= self.k_edge_keV, self.k_edge_jump, 1.0)
        mu = self.compton_coeff + self.photo_coeff * (e / E_REF) ** (-self.photo_exponent) * jump
        if self.reference_keV is not None:
            mu = mu / replace(self, reference_keV=None)(self.reference_keV)
        return mu


@dataclass(frozen=True)
class SpectralBump:
    center: float
    width: float
    amplitude: float


@dataclass(frozen=True)
class NoiseSpec:
    photons_per_ray: float = 1e5
    rng_seed: int = 0
    enabled: bool = True

    def __post_init__(self):
        if not self.photons_per_ray > 0:
            raise ValueError(f"photons_per_ray must be > 0, got {self.photons_per_ray}")


def make_phantom(spec: PhantomSpec, n_materials: int) -> np.ndarray:
    """Rasterize shapes into an ``(nx * ny, M)`` density image.

    A pixel is painted when its center lies inside the shape (boundary
    included); overlapping shapes of one material add up.
    """
    nx, ny = spec.grid
    iy, ix = np.mgrid[0:ny, 0:nx]
    X = np.zeros((ny, nx, n_materials))
    for shape in spec.shapes:
        if shape.material_index >= n_materials:
            raise ValueError(f"material_index {shape.material_index} out of range "
                             f"for {n_materials} materials")
        (cx, cy), (rx, ry) = shape.center, shape.radii
        rho2 = ((ix - cx) / rx) ** 2 + ((iy - cy) / ry) ** 2
        if shape.profile == "smooth":
            values = np.clip(1.0 - rho2, 0.0, None) ** 2
        else:
            values = (rho2 <= 1.0).astype(np.float64)
        X[..., shape.material_index] += shape.density * values
    return X.reshape(nx * ny, n_materials)


def refine_phantom(spec: PhantomSpec, factor: int = 2) -> PhantomSpec:
    """Same shapes on a grid ``factor`` times finer."""
    nx, ny = spec.grid
    offset = 0.5 * (factor - 1)
    shapes = [Shape(s.shape, (factor * s.center[0] + offset, factor * s.center[1] + offset),
                    (factor * s.radii[0], factor * s.radii[1]), s.material_index, s.density,
                    s.profile)
              for s in spec.shapes]
    return PhantomSpec((factor * nx, factor * ny), shapes)


def downsample(X_fine, grid, factor: int = 2) -> np.ndarray:
    """Average ``factor x factor`` blocks of an image given on the fine grid."""
    nx, ny = grid
    M = X_fine.shape[1]
    blocks = X_fine.reshape(ny, factor, nx, factor, M)
    return blocks.mean(axis=(1, 3)).reshape(nx * ny, M)


def synth_attenuation(materials, grid: EnergyGrid) -> np.ndarray:
    """Compton floor plus photoelectric power law with an optional K-edge.

    ``mu(e) = compton + photo * (e / 100 keV)^-exponent * (jump if e >= edge)``.

    Returns the ``(E, M)`` table ``mu[e, m]``.
    """
    columns = []
    for mat in materials:
        if mat.compton_coeff < 0 or mat.photo_coeff < 0 or mat.k_edge_jump < 1:
            raise ValueError(f"invalid attenuation parameters for {mat.name!r}")
        if mat.reference_keV is not None and not mat.reference_keV > 0:
            raise ValueError(f"reference_keV of {mat.name!r} must be > 0")
        col = mat(grid.energies)
        if np.any(~np.isfinite(col)) or np.any(col <= 0):
            raise ValueError(f"attenuation of {mat.name!r} is not strictly positive on the grid")
        columns.append(col)
    return np.column_stack(columns)


def synth_spectra(bumps, grid: EnergyGrid) -> np.ndarray:
    """One Gaussian bump per energy bin, returned as ``(B, E)``.

    Each bump is normalized to unit sum over the grid before scaling, so
    ``amplitude`` is the share of incident photons landing in that bin.
    """
    e = grid.energies
    rows = []
    for b, bump in enumerate(bumps):
        if not (bump.width > 0 and bump.amplitude > 0):
            raise ValueError(f"bin {b}: width and amplitude must be > 0")
        g = np.exp(-0.5 * ((e - bump.center) / bump.width) ** 2)
        total = g.sum()
        if total <= 0:
            raise ValueError(f"bin {b}: bump at {bump.center} keV has no support on the grid")
        rows.append(bump.amplitude * g / total)
    return np.vstack(rows)


def simulate_counts(sys_raw: SpectralSystem, A: RadonOperator, X_true,
                    noise: NoiseSpec) -> SpectralData:
    """Photon counts ``I0 * F(X_true)``, Poisson-sampled when noise is on."""
    X_true = np.asarray(X_true, dtype=np.float64)
    if np.any(X_true < 0):
        raise ValueError("ground-truth densities must be nonnegative")
    lam = noise.photons_per_ray * forward_F(sys_raw, A, X_true)
    if not np.all(np.isfinite(lam)):
        raise FloatingPointError("non-finite expected counts")
    if not noise.enabled:
        return SpectralData(lam, COUNTS)
    rng = np.random.Generator(np.random.Philox(noise.rng_seed))
    return SpectralData(rng.poisson(lam).astype(np.float64), COUNTS)


def to_log_data(Y: SpectralData, sys: SpectralSystem, I0: float) -> SpectralData:
    """Recalibrated log data ``log(max(Y, 0.5) / (I0 F(0)))``."""
    if Y.kind != COUNTS:
        raise TypeError(f"expected counts, got {Y.kind}")
    counts = np.maximum(Y.values, COUNT_FLOOR)
    return SpectralData(np.log(counts / (I0 * sys.F0[None, :])), LOG_DATA)


def fine_operator(geometry: ScanGeometry, factor: int = 2) -> RadonOperator:
    """Same rays over a grid ``factor`` times finer (for data generation)."""
    fine = ScanGeometry(geometry.n_pixels_x * factor, geometry.n_pixels_y * factor,
                        geometry.pixel_size / factor, geometry.n_angles,
                        geometry.n_detectors, geometry.detector_spacing,
                        geometry.detector_offset)
    return build_radon(fine)


def blank_scan_ratio(counts) -> np.ndarray:
    """Per-bin variance/mean ratio of blank-scan counts."""
    counts = np.asarray(counts, dtype=np.float64)
    return counts.var(axis=0, ddof=1) / counts.mean(axis=0)
