"""Run configuration (JSON), numeric tables (CSV), images (PGM) and traces (CSV).

Every writer emits floats with 17 significant digits, so any table or trace
written here reads back bit for bit.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .radon import ScanGeometry
from .simulate import (
    PROFILES,
    MaterialCurve,
    NoiseSpec,
    PhantomSpec,
    Shape,
    SpectralBump,
    synth_attenuation,
    synth_spectra,
)
from .solvers import ALGORITHMS, IterationRecord, SolverConfig
from .spectral import EnergyGrid


class ConfigError(ValueError):
    """Invalid run configuration; ``field`` names the offending key path."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class TableError(ValueError):
    pass


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


# ---------------------------------------------------------------------------
# run configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EnergySpec:
    n_nodes: int = 150
    e_min: float = 1.0
    e_max: float = 150.0

    def grid(self) -> EnergyGrid:
        return EnergyGrid.uniform(self.n_nodes, self.e_min, self.e_max)


@dataclass(frozen=True)
class SpectraSpec:
    mode: str = "synthetic"
    bins: tuple[SpectralBump, ...] = ()
    path: str | None = None


@dataclass(frozen=True)
class AttenuationSpec:
    mode: str = "synthetic"
    materials: tuple[MaterialCurve, ...] = ()
    path: str | None = None


@dataclass(frozen=True)
class RunConfig:
    geometry: ScanGeometry
    energy: EnergySpec
    spectra: SpectraSpec
    attenuation: AttenuationSpec
    phantom: PhantomSpec
    noise: NoiseSpec
    solver: SolverConfig
    fine_grid: bool = False
    output_dir: str = "out"
    material_names: tuple[str, ...] = field(default=(), compare=False)
    benchmark_iterations: dict = field(default_factory=dict)

    def iterations_for(self, algorithm: str) -> int:
        """Benchmark budget of ``algorithm``, falling back to the solver's."""
        return self.benchmark_iterations.get(algorithm, self.solver.max_iterations)

    @property
    def n_materials(self) -> int:
        return len(self.material_names)

    def spectra_matrix(self) -> np.ndarray:
        """Raw effective spectra ``(B, E)``."""
        if self.spectra.mode == "csv":
            return load_table_csv(self.spectra.path, expected_rows=self.energy.n_nodes).T
        return synth_spectra(self.spectra.bins, self.energy.grid())

    def attenuation_matrix(self) -> np.ndarray:
        """Attenuation table ``(E, M)``."""
        if self.attenuation.mode == "csv":
            return load_table_csv(self.attenuation.path, expected_rows=self.energy.n_nodes,
                                  expected_cols=self.n_materials)
        return synth_attenuation(self.attenuation.materials, self.energy.grid())


DEFAULT_BINS = (
    SpectralBump(28.0, 4.0, 0.2),
    SpectralBump(40.0, 4.0, 0.2),
    SpectralBump(55.0, 4.0, 0.2),
    SpectralBump(75.0, 8.0, 0.2),
    SpectralBump(100.0, 12.0, 0.2),
)

# Coefficients are mass attenuations in cm^2/g, but every curve is rescaled
# to 1 at 70 keV, so phantom densities are attenuation contributions in
# cm^-1 at 70 keV (water at 1 g/cm^3 gives 0.18; iodine and gadolinium at
# 20 mg/ml give 0.08 and 0.14).
REFERENCE_KEV = 70.0
DEFAULT_MATERIALS = (
    MaterialCurve("water", 0.165, 0.0055, reference_keV=REFERENCE_KEV),
    MaterialCurve("iodine", 0.5, 0.23, 3.0, 33.2, 5.5, REFERENCE_KEV),
    MaterialCurve("gadolinium", 0.5, 0.44, 3.0, 50.2, 5.0, REFERENCE_KEV),
)

DEFAULT_SHAPES = (
    Shape("disk", (31.5, 31.5), (26.0, 26.0), 0, 0.18, "smooth"),
    Shape("disk", (18.0, 33.0), (8.0, 8.0), 1, 0.08, "smooth"),
    Shape("disk", (32.0, 20.0), (8.0, 8.0), 2, 0.14, "smooth"),
    Shape("disk", (45.0, 34.0), (8.0, 8.0), 1, 0.04, "smooth"),
    Shape("disk", (45.0, 34.0), (8.0, 8.0), 2, 0.07, "smooth"),
)

# Landweber needs far more iterations than the channel-preconditioned
# methods before its error bottoms out on noisy data.
DEFAULT_BENCHMARK_ITERATIONS = {"landweber": 3000, "cp_full": 500, "cp_fast": 500}

DEFAULT_GEOMETRY = {
    "n_pixels_x": 64, "n_pixels_y": 64, "pixel_size": 0.25,
    "n_angles": 90, "n_detectors": 95, "detector_spacing": 0.25, "detector_offset": None,
}


def default_config_dict() -> dict:
    """The desk-scale protocol: 64x64, 3 materials, 5 bins, 150 energies."""
    return {
        "geometry": dict(DEFAULT_GEOMETRY),
        "energy": {"n_nodes": 150, "e_min": 1.0, "e_max": 150.0},
        "spectra": {"mode": "synthetic",
                    "bins": [vars(b).copy() for b in DEFAULT_BINS]},
        "attenuation": {"mode": "synthetic",
                        "materials": [vars(m).copy() for m in DEFAULT_MATERIALS]},
        "phantom": {"n_materials": 3,
                    "shapes": [_shape_dict(s) for s in DEFAULT_SHAPES]},
        "noise": {"enabled": True, "photons_per_ray": 1e5, "rng_seed": 0},
        "solver": {"algorithm": "cp_fast", "step_size": "auto", "max_iterations": 500,
                   "positivity": True, "stop_tolerance": 0.0, "seed": 0, "damping": 0.0},
        "simulation": {"fine_grid": False},
        "benchmark": {"max_iterations": dict(DEFAULT_BENCHMARK_ITERATIONS)},
        "output_dir": "out",
    }


def _shape_dict(s: Shape) -> dict:
    return {"shape": s.shape, "center": list(s.center), "radii": list(s.radii),
            "material_index": s.material_index, "density": s.density, "profile": s.profile}


class _Section:
    """Reads keys out of one JSON object, tracking the key path for errors."""

    def __init__(self, data, path: str):
        if not isinstance(data, dict):
            raise ConfigError(path, f"expected an object, got {type(data).__name__}")
        self.data = dict(data)
        self.path = path

    def sub(self, key):
        return f"{self.path}.{key}" if self.path else key

    def get(self, key, kind, default=..., check=None, why=""):
        name = self.sub(key)
        if key not in self.data:
            if default is ...:
                raise ConfigError(name, "missing required key")
            return default
        value = self.data.pop(key)
        if value is None and default is None:
            return None
        if kind is float and isinstance(value, int) and not isinstance(value, bool):
            value = float(value)
        if kind is int and isinstance(value, float) and value.is_integer():
            value = int(value)
        if not isinstance(value, kind) or (kind in (int, float) and isinstance(value, bool)):
            raise ConfigError(name, f"expected {getattr(kind, '__name__', kind)}, got {value!r}")
        if kind is float and not math.isfinite(value):
            raise ConfigError(name, f"must be finite, got {value!r}")
        if check is not None and not check(value):
            raise ConfigError(name, f"{why}, got {value!r}")
        return value

    def section(self, key, default=...):
        name = self.sub(key)
        if key not in self.data:
            if default is ...:
                raise ConfigError(name, "missing required section")
            return _Section(default, name)
        return _Section(self.data.pop(key), name)

    def items(self, key):
        name = self.sub(key)
        if key not in self.data:
            raise ConfigError(name, "missing required list")
        value = self.data.pop(key)
        if not isinstance(value, list):
            raise ConfigError(name, "expected a list")
        return [_Section(v, f"{name}[{i}]") for i, v in enumerate(value)]

    def done(self):
        if self.data:
            raise ConfigError(self.sub(sorted(self.data)[0]), "unknown key")


def _positive(v):
    return v > 0


def _nonneg(v):
    return v >= 0


def _resolve(path: str, base: Path | None, name: str) -> str:
    p = Path(path)
    if not p.is_absolute() and base is not None:
        p = base / p
    if not p.is_file():
        raise ConfigError(name, f"file not found: {p}")
    return str(p.resolve())


def _csv_header(path: str) -> list[str]:
    with open(path, newline="") as fh:
        return next(csv.reader(fh), [])


def config_from_dict(data: dict, base_dir: Path | None = None) -> RunConfig:
    """Validate a parsed config document and build the :class:`RunConfig`."""
    root = _Section(data, "")

    g = root.section("geometry", DEFAULT_GEOMETRY)
    nx = g.get("n_pixels_x", int, 64, _positive, "must be >= 1")
    ny = g.get("n_pixels_y", int, 64, _positive, "must be >= 1")
    ps = g.get("pixel_size", float, 0.25, _positive, "must be > 0")
    na = g.get("n_angles", int, 90, _positive, "must be >= 1")
    nd = g.get("n_detectors", int, 95, _positive, "must be >= 1")
    ds = g.get("detector_spacing", float, ps, _positive, "must be > 0")
    off = g.get("detector_offset", float, None)
    g.done()
    if off is None:
        off = -0.5 * (nd - 1) * ds
    geometry = ScanGeometry(nx, ny, ps, na, nd, ds, off)

    e = root.section("energy", {})
    energy = EnergySpec(e.get("n_nodes", int, 150, _positive, "must be >= 1"),
                        e.get("e_min", float, 1.0, _positive, "must be > 0"),
                        e.get("e_max", float, 150.0, _positive, "must be > 0"))
    if energy.n_nodes > 1 and energy.e_max <= energy.e_min:
        raise ConfigError(e.sub("e_max"), f"must exceed energy.e_min={energy.e_min}")
    e.done()

    s = root.section("spectra", {"mode": "synthetic", "bins": [vars(b) for b in DEFAULT_BINS]})
    mode = s.get("mode", str, "synthetic", lambda v: v in ("synthetic", "csv"),
                 "must be 'synthetic' or 'csv'")
    if mode == "csv":
        path = _resolve(s.get("path", str), base_dir, s.sub("path"))
        spectra = SpectraSpec("csv", (), path)
        n_bins = len(_csv_header(path))
    else:
        bins = []
        for b in s.items("bins"):
            bins.append(SpectralBump(b.get("center", float),
                                     b.get("width", float, check=_positive, why="must be > 0"),
                                     b.get("amplitude", float, check=_positive, why="must be > 0")))
            b.done()
        if not bins:
            raise ConfigError(s.sub("bins"), "needs at least one bin")
        spectra = SpectraSpec("synthetic", tuple(bins))
        n_bins = len(bins)
    s.done()

    a = root.section("attenuation", {"mode": "synthetic",
                                     "materials": [vars(m) for m in DEFAULT_MATERIALS]})
    mode = a.get("mode", str, "synthetic", lambda v: v in ("synthetic", "csv"),
                 "must be 'synthetic' or 'csv'")
    if mode == "csv":
        path = _resolve(a.get("path", str), base_dir, a.sub("path"))
        attenuation = AttenuationSpec("csv", (), path)
        names = tuple(_csv_header(path))
        att_field = a.sub("path")
    else:
        mats = []
        for m in a.items("materials"):
            mats.append(MaterialCurve(
                m.get("name", str),
                m.get("compton_coeff", float, check=_nonneg, why="must be >= 0"),
                m.get("photo_coeff", float, check=_nonneg, why="must be >= 0"),
                m.get("photo_exponent", float, 3.0),
                m.get("k_edge_keV", float, None),
                m.get("k_edge_jump", float, 1.0, lambda v: v >= 1, "must be >= 1"),
                m.get("reference_keV", float, None, _positive, "must be > 0")))
            m.done()
        attenuation = AttenuationSpec("synthetic", tuple(mats))
        names = tuple(m.name for m in mats)
        att_field = a.sub("materials")
    a.done()

    p = root.section("phantom", {"n_materials": 3,
                                 "shapes": [_shape_dict(x) for x in DEFAULT_SHAPES]})
    n_mat = p.get("n_materials", int, check=_positive, why="must be >= 1")
    if n_mat != len(names):
        raise ConfigError(p.sub("n_materials"),
                          f"phantom.n_materials={n_mat} but {att_field} defines "
                          f"{len(names)} materials")
    shapes = []
    for sh in p.items("shapes"):
        kind = sh.get("shape", str, check=lambda v: v in ("disk", "ellipse"),
                      why="must be 'disk' or 'ellipse'")
        center = sh.get("center", list, check=lambda v: len(v) == 2, why="needs [x, y]")
        radii = sh.get("radii", list, check=lambda v: len(v) == 2 and min(v) > 0,
                       why="needs two positive radii")
        if kind == "disk" and radii[0] != radii[1]:
            raise ConfigError(sh.sub("radii"), "a disk needs equal radii")
        if not (0 <= center[0] <= nx - 1 and 0 <= center[1] <= ny - 1):
            raise ConfigError(sh.sub("center"), f"outside the {nx}x{ny} grid, got {center!r}")
        index = sh.get("material_index", int, check=lambda v: 0 <= v < n_mat,
                       why=f"must be in [0, {n_mat})")
        density = sh.get("density", float, check=_nonneg, why="must be >= 0")
        profile = sh.get("profile", str, "flat", lambda v: v in PROFILES,
                         f"must be one of {PROFILES}")
        sh.done()
        shapes.append(Shape(kind, tuple(float(c) for c in center),
                            tuple(float(r) for r in radii), index, density, profile))
    p.done()
    phantom = PhantomSpec((nx, ny), shapes)

    n = root.section("noise", {})
    noise = NoiseSpec(n.get("photons_per_ray", float, 1e5, _positive, "must be > 0"),
                      n.get("rng_seed", int, 0, _nonneg, "must be >= 0"),
                      n.get("enabled", bool, True))
    n.done()

    sv = root.section("solver", {})
    step = sv.get("step_size", (float, int, str), "auto")
    if isinstance(step, bool) or (isinstance(step, str) and step != "auto"):
        raise ConfigError(sv.sub("step_size"), f"must be > 0 or 'auto', got {step!r}")
    if not isinstance(step, str):
        step = float(step)
        if not (math.isfinite(step) and step > 0):
            raise ConfigError(sv.sub("step_size"), f"must be > 0 or 'auto', got {step!r}")
    solver = SolverConfig(
        algorithm=sv.get("algorithm", str, "cp_fast", lambda v: v in ALGORITHMS,
                         f"must be one of {ALGORITHMS}"),
        step_size=step,
        max_iterations=sv.get("max_iterations", int, 500, _positive, "must be >= 1"),
        positivity=sv.get("positivity", bool, True),
        stop_tolerance=sv.get("stop_tolerance", float, 0.0, _nonneg, "must be >= 0"),
        seed=sv.get("seed", int, 0, _nonneg, "must be >= 0"),
        damping=sv.get("damping", float, 0.0, _nonneg, "must be >= 0"))
    sv.done()

    sim = root.section("simulation", {})
    fine = sim.get("fine_grid", bool, False)
    sim.done()

    bm = root.section("benchmark", {"max_iterations": dict(DEFAULT_BENCHMARK_ITERATIONS)})
    budgets = bm.section("max_iterations", {})
    bench_iters = {}
    for alg in ALGORITHMS:
        value = budgets.get(alg, int, None, _positive, "must be >= 1")
        if value is not None:
            bench_iters[alg] = value
    budgets.done()
    bm.done()

    out = root.get("output_dir", str, "out")
    root.done()

    cfg = RunConfig(geometry, energy, spectra, attenuation, phantom, noise, solver,
                    fine, out, names, bench_iters)
    if spectra.mode == "csv":
        load_table_csv(spectra.path, expected_rows=energy.n_nodes, expected_cols=n_bins)
    _check_rank(cfg)
    return cfg


def _check_rank(cfg: RunConfig):
    # imported here to keep io_formats importable without building operators
    from .spectral import normalize_spectra
    try:
        sys = normalize_spectra(cfg.spectra_matrix(), cfg.attenuation_matrix())
    except (ValueError, TableError) as exc:
        raise ConfigError("spectra", str(exc)) from exc
    if sys.U_pinv is None:
        raise ConfigError("attenuation", "channel matrix U is rank deficient "
                          f"({sys.n_bins} bins, {sys.n_materials} materials)")


def config_to_dict(cfg: RunConfig) -> dict:
    g = cfg.geometry
    if cfg.spectra.mode == "csv":
        spectra = {"mode": "csv", "path": cfg.spectra.path}
    else:
        spectra = {"mode": "synthetic", "bins": [vars(b).copy() for b in cfg.spectra.bins]}
    if cfg.attenuation.mode == "csv":
        attenuation = {"mode": "csv", "path": cfg.attenuation.path}
    else:
        attenuation = {"mode": "synthetic",
                       "materials": [vars(m).copy() for m in cfg.attenuation.materials]}
    sv = cfg.solver
    return {
        "geometry": {"n_pixels_x": g.n_pixels_x, "n_pixels_y": g.n_pixels_y,
                     "pixel_size": g.pixel_size, "n_angles": g.n_angles,
                     "n_detectors": g.n_detectors, "detector_spacing": g.detector_spacing,
                     "detector_offset": g.detector_offset},
        "energy": vars(cfg.energy).copy(),
        "spectra": spectra,
        "attenuation": attenuation,
        "phantom": {"n_materials": cfg.n_materials,
                    "shapes": [_shape_dict(s) for s in cfg.phantom.shapes]},
        "noise": {"enabled": cfg.noise.enabled, "photons_per_ray": cfg.noise.photons_per_ray,
                  "rng_seed": cfg.noise.rng_seed},
        "solver": {"algorithm": sv.algorithm, "step_size": sv.step_size,
                   "max_iterations": sv.max_iterations, "positivity": sv.positivity,
                   "stop_tolerance": sv.stop_tolerance, "seed": sv.seed, "damping": sv.damping},
        "simulation": {"fine_grid": cfg.fine_grid},
        "benchmark": {"max_iterations": dict(cfg.benchmark_iterations)},
        "output_dir": cfg.output_dir,
    }


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(str(path), f"cannot read config: {exc}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(str(path), f"parse error at line {exc.lineno}: {exc.msg}") from exc
    return config_from_dict(data, path.parent)


def save_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(json.dumps(config_to_dict(cfg), indent=2) + "\n")


def with_solver(cfg: RunConfig, **changes) -> RunConfig:
    return replace(cfg, solver=replace(cfg.solver, **changes))


# ---------------------------------------------------------------------------
# tables
# ---------------------------------------------------------------------------

def read_table_csv(path) -> tuple[list[str], np.ndarray]:
    """Header names and numeric body of a CSV table."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header:
            raise TableError(f"{path}: missing header row")
        rows = []
        for row in reader:
            if not row:
                continue
            if len(row) != len(header):
                raise TableError(f"{path}:{reader.line_num}: expected {len(header)} "
                                 f"columns, got {len(row)}")
            try:
                values = [float(cell) for cell in row]
            except ValueError as exc:
                raise TableError(f"{path}:{reader.line_num}: non-numeric cell ({exc})") from exc
            if not all(math.isfinite(v) for v in values):
                raise TableError(f"{path}:{reader.line_num}: non-finite value")
            rows.append(values)
    body = np.array(rows, dtype=np.float64).reshape(len(rows), len(header))
    return header, body


def load_table_csv(path, expected_rows=None, expected_cols=None) -> np.ndarray:
    _, body = read_table_csv(path)
    if expected_rows is not None and body.shape[0] != expected_rows:
        raise TableError(f"{path}: expected {expected_rows} rows, got {body.shape[0]}")
    if expected_cols is not None and body.shape[1] != expected_cols:
        raise TableError(f"{path}: expected {expected_cols} columns, got {body.shape[1]}")
    return body


def write_table_csv(path, matrix, header=None) -> None:
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.ndim == 1:
        matrix = matrix[:, None]
    if header is None:
        header = [f"c{j}" for j in range(matrix.shape[1])]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows([_fmt(v) for v in row] for row in matrix)


# ---------------------------------------------------------------------------
# images
# ---------------------------------------------------------------------------

def pgm_samples(image, vmin=None, vmax=None) -> np.ndarray:
    """16-bit samples: ``[vmin, vmax]`` maps linearly onto ``[0, 65535]``.

    Rounds half up and clamps; a degenerate range yields all zeros.
    """
    image = np.asarray(image, dtype=np.float64)
    if not np.all(np.isfinite(image)):
        raise ValueError("image contains non-finite values")
    vmin = float(image.min()) if vmin is None else float(vmin)
    vmax = float(image.max()) if vmax is None else float(vmax)
    if not vmax > vmin:
        return np.zeros(image.shape, dtype=np.uint16)
    scaled = np.floor((image - vmin) / (vmax - vmin) * 65535.0 + 0.5)
    return np.clip(scaled, 0, 65535).astype(np.uint16)


def write_image_pgm(path, image, vmin=None, vmax=None) -> None:
    """Binary 16-bit big-endian PGM (P5); row 0 of ``image`` is the top row."""
    samples = pgm_samples(image, vmin, vmax)
    if samples.ndim != 2:
        raise ValueError(f"expected a 2-D image, got shape {samples.shape}")
    h, w = samples.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
        fh.write(samples.astype(">u2").tobytes())


def read_image_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 3)
    if len(parts) != 4 or parts[0] != b"P5" or parts[2] != b"65535":
        raise ValueError(f"{path}: not a 16-bit P5 PGM written by this package")
    w, h = (int(v) for v in parts[1].split())
    return np.frombuffer(parts[3], dtype=">u2", count=w * h).reshape(h, w).astype(np.uint16)


def to_picture(column, nx: int, ny: int) -> np.ndarray:
    """Flat image (``iy = 0`` at the bottom) to a top-row-first 2-D array."""
    return np.asarray(column).reshape(ny, nx)[::-1]


# ---------------------------------------------------------------------------
# convergence traces
# ---------------------------------------------------------------------------

def write_trace_csv(path, trace) -> None:
    if not trace:
        raise ValueError("cannot write an empty trace")
    n_rel = None if trace[0].rel_error is None else len(trace[0].rel_error)
    header = ["iter", "lsq", "residual"]
    if n_rel is not None:
        header += [f"relerr_m{m}" for m in range(n_rel)]
    header.append("seconds")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for rec in trace:
            row = [str(rec.k), _fmt(rec.lsq_value), _fmt(rec.residual_norm)]
            if n_rel is not None:
                row += [_fmt(v) for v in rec.rel_error]
            row.append(_fmt(rec.wall_time))
            writer.writerow(row)


def read_trace_csv(path) -> list[IterationRecord]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        n_rel = sum(1 for h in header if h.startswith("relerr_m"))
        records = []
        for row in reader:
            rel = np.array([float(v) for v in row[3:3 + n_rel]]) if n_rel else None
            records.append(IterationRecord(int(row[0]), float(row[1]), float(row[2]),
                                           rel, float(row[-1])))
    return records
