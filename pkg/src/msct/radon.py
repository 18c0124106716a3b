"""Parallel-beam Radon transform as an explicit sparse matrix.

Rays are indexed by ``(angle i, detector j)`` with row ``i * n_detectors + j``.
The ray with normal angle ``theta`` and signed distance ``r`` is the line
``x cos(theta) + y sin(theta) = r``.  The image is centered at the origin and
pixel ``(ix, iy)`` (``iy = 0`` at the bottom) has flat index ``iy * nx + ix``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

# trig values below this magnitude are treated as exact zeros
_AXIS_EPS = 1e-12
# relative tolerance for a ray lying on a grid line
_EDGE_EPS = 1e-9


@dataclass(frozen=True)
class ScanGeometry:
    n_pixels_x: int
    n_pixels_y: int
    pixel_size: float
    n_angles: int
    n_detectors: int
    detector_spacing: float
    detector_offset: float

    def __post_init__(self):
        for name in ("n_pixels_x", "n_pixels_y", "n_angles", "n_detectors"):
            value = getattr(self, name)
            if int(value) != value or value < 1:
                raise ValueError(f"{name} must be a positive integer, got {value!r}")
        for name in ("pixel_size", "detector_spacing", "detector_offset"):
            value = getattr(self, name)
            if not math.isfinite(value):
                raise ValueError(f"{name} must be finite, got {value!r}")
        if self.pixel_size <= 0:
            raise ValueError(f"pixel_size must be > 0, got {self.pixel_size!r}")
        if self.detector_spacing <= 0:
            raise ValueError(f"detector_spacing must be > 0, got {self.detector_spacing!r}")

    @classmethod
    def centered(cls, n_pixels_x, n_pixels_y, pixel_size, n_angles, n_detectors,
                 detector_spacing=None):
        """Geometry with the detector row symmetric about the rotation center."""
        if detector_spacing is None:
            detector_spacing = pixel_size
        offset = -0.5 * (n_detectors - 1) * detector_spacing
        return cls(n_pixels_x, n_pixels_y, pixel_size, n_angles, n_detectors,
                   detector_spacing, offset)

    @property
    def n_x(self) -> int:
        return self.n_pixels_x * self.n_pixels_y

    @property
    def n_y(self) -> int:
        return self.n_angles * self.n_detectors

    @property
    def angles(self) -> np.ndarray:
        return np.arange(self.n_angles) * (np.pi / self.n_angles)

    @property
    def detector_positions(self) -> np.ndarray:
        return self.detector_offset + np.arange(self.n_detectors) * self.detector_spacing

    @property
    def diagonal(self) -> float:
        return self.pixel_size * math.hypot(self.n_pixels_x, self.n_pixels_y)


class RadonOperator:
    """Sparse line-integral matrix ``A`` with exact transpose.

    The CSR matrix is built once and never modified, so an operator can be
    shared freely between solvers.
    """

    def __init__(self, matrix, geometry: ScanGeometry | None = None):
        matrix = sp.csr_matrix(matrix, dtype=np.float64)
        matrix.sum_duplicates()
        matrix.sort_indices()
        if geometry is not None and matrix.shape != (geometry.n_y, geometry.n_x):
            raise ValueError(
                f"matrix shape {matrix.shape} does not match geometry "
                f"({geometry.n_y}, {geometry.n_x})")
        self.geometry = geometry
        self.matrix = matrix
        self._matrix_t = matrix.T.tocsr()
        self.matrix.data.setflags(write=False)

    @property
    def shape(self) -> tuple[int, int]:
        return self.matrix.shape

    def apply(self, image):
        """Return ``A @ image``; ``image`` is ``(N_x,)`` or ``(N_x, M)``."""
        image = np.asarray(image, dtype=np.float64)
        if image.shape[:1] != (self.shape[1],):
            raise ValueError(f"image has {image.shape[0] if image.ndim else 0} rows, "
                             f"operator expects {self.shape[1]}")
        return self.matrix @ image

    def apply_adjoint(self, sino):
        """Return ``A.T @ sino``; ``sino`` is ``(N_y,)`` or ``(N_y, M)``."""
        sino = np.asarray(sino, dtype=np.float64)
        if sino.shape[:1] != (self.shape[0],):
            raise ValueError(f"sinogram has {sino.shape[0] if sino.ndim else 0} rows, "
                             f"operator expects {self.shape[0]}")
        return self._matrix_t @ sino

    def row(self, index: int) -> dict[int, float]:
        """Stored ``{pixel: length}`` pairs of one ray."""
        start, stop = self.matrix.indptr[index], self.matrix.indptr[index + 1]
        return dict(zip(self.matrix.indices[start:stop].tolist(),
                        self.matrix.data[start:stop].tolist()))


def apply(op: RadonOperator, image):
    return op.apply(image)


def apply_adjoint(op: RadonOperator, sino):
    return op.apply_adjoint(sino)


def estimate_norm(op: RadonOperator, iterations: int = 100, seed: int = 0) -> float:
    """Power-iteration estimate of the largest singular value of ``A``."""
    if iterations < 1:
        raise ValueError(f"iterations must be >= 1, got {iterations!r}")
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(op.shape[1])
    v /= np.linalg.norm(v)
    sigma = 0.0
    for _ in range(iterations):
        w = op.apply_adjoint(op.apply(v))
        norm_w = np.linalg.norm(w)
        if norm_w == 0.0:
            return 0.0
        v = w / norm_w
        sigma = float(np.linalg.norm(op.apply(v)))
    return sigma


def _axis_ray(coord, n_along, n_across, pixel_size):
    """Pixels hit by a line parallel to one grid axis.

    ``coord`` is the line position across the axis, measured from the lower
    image edge.  A line lying exactly on a grid line gives half its length
    to each neighbouring pixel strip.
    """
    u = coord / pixel_size
    if u < -_EDGE_EPS or u > n_across + _EDGE_EPS:
        return []
    k = round(u)
    if abs(u - k) <= _EDGE_EPS:
        strips = [(s, 0.5 * pixel_size) for s in (k - 1, k) if 0 <= s < n_across]
    else:
        strips = [(int(math.floor(u)), pixel_size)]
    return [(strip, along, w) for strip, w in strips for along in range(n_along)]


def _trace_angle(geometry: ScanGeometry, theta: float):
    """Siddon traversal for all detectors of one angle.

    Returns ``(detector, pixel, length)`` triplets as three arrays.
    """
    nx, ny, ps = geometry.n_pixels_x, geometry.n_pixels_y, geometry.pixel_size
    x0, y0 = -0.5 * nx * ps, -0.5 * ny * ps
    r = geometry.detector_positions
    c, s = math.cos(theta), math.sin(theta)
    if abs(c) < _AXIS_EPS:
        c = 0.0
    if abs(s) < _AXIS_EPS:
        s = 0.0

    if s == 0.0 or c == 0.0:
        dets, pix, lens = [], [], []
        for j, rj in enumerate(r):
            if s == 0.0:
                # vertical line x = r * c
                hits = _axis_ray(rj * c - x0, ny, nx, ps)
                flat = [along * nx + strip for strip, along, _ in hits]
            else:
                # horizontal line y = r * s
                hits = _axis_ray(rj * s - y0, nx, ny, ps)
                flat = [strip * nx + along for strip, along, _ in hits]
            dets.extend([j] * len(hits))
            pix.extend(flat)
            lens.extend(w for _, _, w in hits)
        return (np.asarray(dets, dtype=np.int64), np.asarray(pix, dtype=np.int64),
                np.asarray(lens, dtype=np.float64))

    # p(t) = r (c, s) + t (-s, c)
    xs = x0 + ps * np.arange(nx + 1)
    ys = y0 + ps * np.arange(ny + 1)
    tx = (r[:, None] * c - xs[None, :]) / s
    ty = (ys[None, :] - r[:, None] * s) / c
    t_in = np.maximum(np.minimum(tx[:, 0], tx[:, -1]), np.minimum(ty[:, 0], ty[:, -1]))
    t_out = np.minimum(np.maximum(tx[:, 0], tx[:, -1]), np.maximum(ty[:, 0], ty[:, -1]))
    t_out = np.maximum(t_out, t_in)

    t = np.concatenate([t_in[:, None], tx, ty, t_out[:, None]], axis=1)
    t = np.clip(t, t_in[:, None], t_out[:, None])
    t.sort(axis=1)
    seg = np.diff(t, axis=1)
    mid = 0.5 * (t[:, 1:] + t[:, :-1])
    px = r[:, None] * c - mid * s
    py = r[:, None] * s + mid * c
    ix = np.clip(np.floor((px - x0) / ps).astype(np.int64), 0, nx - 1)
    iy = np.clip(np.floor((py - y0) / ps).astype(np.int64), 0, ny - 1)

    keep = seg > _EDGE_EPS * ps
    det = np.broadcast_to(np.arange(len(r))[:, None], seg.shape)
    return det[keep], (iy * nx + ix)[keep], seg[keep]


def build_radon(geometry: ScanGeometry) -> RadonOperator:
    """Exact line-pixel intersection lengths for every ray of ``geometry``."""
    rows, cols, vals = [], [], []
    for i, theta in enumerate(geometry.angles):
        det, pix, length = _trace_angle(geometry, float(theta))
        rows.append(i * geometry.n_detectors + det)
        cols.append(pix)
        vals.append(length)
    matrix = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(geometry.n_y, geometry.n_x))
    return RadonOperator(matrix, geometry)
