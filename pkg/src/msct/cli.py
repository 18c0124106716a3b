"""Command-line harness: ``msct {simulate, reconstruct, benchmark, render}``.

Exit codes: 0 success, 1 usage error, 2 invalid input (config, data
files, dimensions), 3 runtime failure or solver divergence.
"""

from __future__ import annotations

import argparse
import hashlib
import logging
import sys
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .io_formats import (
    ConfigError,
    RunConfig,
    config_from_dict,
    default_config_dict,
    load_config,
    load_table_csv,
    read_table_csv,
    save_config,
    to_picture,
    write_image_pgm,
    write_table_csv,
    write_trace_csv,
)
from .radon import RadonOperator, build_radon
from .simulate import (
    downsample,
    fine_operator,
    make_phantom,
    refine_phantom,
    simulate_counts,
    to_log_data,
)
from .solvers import ALGORITHMS, ReconstructionResult, reconstruct
from .spectral import SpectralData, SpectralSystem, forward_H, normalize_spectra

log = logging.getLogger("msct")

EXIT_OK, EXIT_USAGE, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2, 3
SELF_CHECK_TOL = 1e-12


class _Parser(argparse.ArgumentParser):
    """ArgumentParser whose usage errors exit with code 1 instead of 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# shared pipeline
# ---------------------------------------------------------------------------

@dataclass
class Dataset:
    """Everything needed to reconstruct and score one simulated scan."""

    A: RadonOperator
    sys_raw: SpectralSystem
    sys: SpectralSystem
    X_true: np.ndarray
    counts: SpectralData
    log_data: SpectralData
    # operator and image the counts were generated from (fine when fine_grid)
    A_gen: RadonOperator
    X_gen: np.ndarray


def simulate_dataset(cfg: RunConfig, A: RadonOperator | None = None) -> Dataset:
    S_raw, mu = cfg.spectra_matrix(), cfg.attenuation_matrix()
    sys_raw = SpectralSystem(S_raw, mu)
    sys = normalize_spectra(S_raw, mu)
    A = build_radon(cfg.geometry) if A is None else A
    M = cfg.n_materials
    if cfg.fine_grid:
        X_gen = make_phantom(refine_phantom(cfg.phantom), M)
        A_gen = fine_operator(cfg.geometry)
        X_true = downsample(X_gen, cfg.phantom.grid)
    else:
        X_gen = X_true = make_phantom(cfg.phantom, M)
        A_gen = A
    counts = simulate_counts(sys_raw, A_gen, X_gen, cfg.noise)
    log_data = to_log_data(counts, sys_raw, cfg.noise.photons_per_ray)
    return Dataset(A, sys_raw, sys, X_true, counts, log_data, A_gen, X_gen)


def _load(args) -> RunConfig:
    if args.config is None:
        return config_from_dict(default_config_dict())
    return load_config(args.config)


def _out_dir(args, cfg: RunConfig) -> Path:
    out = Path(args.out if args.out is not None else cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _bin_names(n: int) -> list[str]:
    return [f"bin{b}" for b in range(n)]


def _write_material_images(out: Path, prefix: str, X, cfg: RunConfig):
    nx, ny = cfg.phantom.grid
    for m, name in enumerate(cfg.material_names):
        write_image_pgm(out / f"{prefix}_{name}.pgm", to_picture(X[:, m], nx, ny), 0.0)


def _sha256(paths) -> str:
    h = hashlib.sha256()
    for p in paths:
        h.update(Path(p).read_bytes())
    return h.hexdigest()


def _untimed(result: ReconstructionResult) -> ReconstructionResult:
    for rec in result.trace:
        rec.wall_time = 0.0
    return result


def _seconds_per_iteration(result: ReconstructionResult) -> float:
    return result.trace[-1].wall_time / max(result.iterations, 1)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_simulate(args) -> int:
    cfg = _load(args)
    out = _out_dir(args, cfg)
    if args.self_check and cfg.noise.enabled:
        raise ConfigError("noise.enabled", "--self-check needs noise disabled")
    data = simulate_dataset(cfg)

    names = list(cfg.material_names)
    B = data.sys.n_bins
    write_table_csv(out / "phantom.csv", data.X_true, names)
    _write_material_images(out, "phantom", data.X_true, cfg)
    write_table_csv(out / "counts.csv", data.counts.values, _bin_names(B))
    write_table_csv(out / "logdata.csv", data.log_data.values, _bin_names(B))
    write_table_csv(out / "spectra.csv", data.sys_raw.S.T, _bin_names(B))
    write_table_csv(out / "attenuation.csv", data.sys_raw.mu, names)
    save_config(cfg, out / "config.json")

    digest = _sha256([out / "phantom.csv", out / "counts.csv", out / "logdata.csv"])
    print(f"sha256 {digest}")

    if args.self_check:
        expected = forward_H(data.sys, data.A_gen, data.X_gen)
        err = float(np.max(np.abs(data.log_data.values - expected)))
        print(f"self-check max |Y_H - H(X)| = {err:.3e}")
        if not err <= SELF_CHECK_TOL:
            log.error("self-check failed: %.3e > %.0e", err, SELF_CHECK_TOL)
            return EXIT_RUNTIME
    return EXIT_OK


def _read_data_dir(data_dir: Path, cfg: RunConfig, n_rays: int, n_bins: int):
    path = data_dir / "logdata.csv"
    if not path.is_file():
        raise ConfigError("--data", f"missing {path}")
    _, Y_H = read_table_csv(path)
    if Y_H.shape != (n_rays, n_bins):
        raise ConfigError("--data", f"{path} is {Y_H.shape}, config expects {(n_rays, n_bins)}")
    X_true = None
    truth = data_dir / "phantom.csv"
    if truth.is_file():
        _, X_true = read_table_csv(truth)
        expected = (cfg.geometry.n_x, cfg.n_materials)
        if X_true.shape != expected:
            raise ConfigError("--data", f"{truth} is {X_true.shape}, config expects {expected}")
    return SpectralData(Y_H, "log_data"), X_true


def _write_result(out: Path, result: ReconstructionResult, cfg: RunConfig):
    names = list(cfg.material_names)
    write_trace_csv(out / "trace.csv", result.trace)
    write_table_csv(out / "final.csv", result.X_final, names)
    _write_material_images(out, "final", result.X_final, cfg)
    if result.X_best is not None:
        write_table_csv(out / "best.csv", result.X_best, names)
        _write_material_images(out, "best", result.X_best, cfg)


def cmd_reconstruct(args) -> int:
    cfg = _load(args)
    if args.algorithm is not None:
        cfg = replace(cfg, solver=replace(cfg.solver, algorithm=args.algorithm))
    if args.iterations is not None:
        cfg = replace(cfg, solver=replace(cfg.solver, max_iterations=args.iterations))
    A = build_radon(cfg.geometry)
    sys = normalize_spectra(cfg.spectra_matrix(), cfg.attenuation_matrix())
    Y_H, X_true = _read_data_dir(Path(args.data), cfg, A.shape[0], sys.n_bins)
    X0 = None
    if args.init is not None:
        try:
            X0 = load_table_csv(args.init, expected_rows=A.shape[1],
                                expected_cols=cfg.n_materials)
        except FileNotFoundError as exc:
            raise ConfigError("--init", f"file not found: {args.init}") from exc
    out = _out_dir(args, cfg)

    result = reconstruct(sys, A, Y_H, cfg.solver, X_true=X_true, X0=X0)
    if args.no_timing:
        _untimed(result)
    _write_result(out, result, cfg)

    last = result.trace[-1]
    print(f"{cfg.solver.algorithm}: {result.iterations} iterations, stop={result.stop_reason}, "
          f"lsq={last.lsq_value:.6g}")
    if X_true is not None:
        for name, k, err in zip(cfg.material_names, result.best_iteration,
                                np.min([r.rel_error for r in result.trace], axis=0)):
            print(f"  {name}: best relative error {err:.4f} at iteration {k}")
    if result.stop_reason == "diverged":
        log.error("%s diverged at iteration %d", cfg.solver.algorithm, last.k)
        return EXIT_RUNTIME
    return EXIT_OK


def run_benchmark(cfg: RunConfig, algorithms=ALGORITHMS, data: Dataset | None = None):
    """Run each algorithm on the same simulated data.

    Returns ``(data, {algorithm: ReconstructionResult})``.
    """
    data = simulate_dataset(cfg) if data is None else data
    results = {}
    for alg in algorithms:
        solver = replace(cfg.solver, algorithm=alg, max_iterations=cfg.iterations_for(alg))
        log.info("benchmark: %s for %d iterations", alg, solver.max_iterations)
        results[alg] = reconstruct(data.sys, data.A, data.log_data, solver, X_true=data.X_true)
    return data, results


def summary_rows(results, material_names):
    rows = []
    for alg, res in results.items():
        errs = np.array([r.rel_error for r in res.trace])
        spi = _seconds_per_iteration(res)
        for m, name in enumerate(material_names):
            k = int(np.argmin(errs[:, m]))
            rows.append((alg, name, float(errs[k, m]), k, spi))
    return rows


def write_summary_csv(path, rows) -> None:
    with open(path, "w") as fh:
        fh.write("algorithm,material,min_relerr,min_iter,seconds_per_iter\n")
        for alg, name, err, k, spi in rows:
            fh.write(f"{alg},{name},{err:.17g},{k},{spi:.17g}\n")


def cmd_benchmark(args) -> int:
    cfg = _load(args)
    out = _out_dir(args, cfg)
    _, results = run_benchmark(cfg)
    diverged = []
    for alg, res in results.items():
        if args.no_timing:
            _untimed(res)
        write_trace_csv(out / f"trace_{alg}.csv", res.trace)
        if res.stop_reason == "diverged":
            diverged.append(alg)
    rows = summary_rows(results, cfg.material_names)
    write_summary_csv(out / "summary.csv", rows)
    print(f"{'algorithm':<10} {'material':<12} {'min relerr':>10} {'at iter':>8} {'s/iter':>8}")
    for alg, name, err, k, spi in rows:
        print(f"{alg:<10} {name:<12} {err:>10.4f} {k:>8d} {spi:>8.4f}")
    if diverged:
        log.error("diverged: %s", ", ".join(diverged))
        return EXIT_RUNTIME
    return EXIT_OK


def _select_column(header, body, column):
    if column in header:
        return body[:, header.index(column)]
    try:
        index = int(column)
    except ValueError:
        raise ConfigError("--column", f"no column {column!r}; have {', '.join(header)}") from None
    if not 0 <= index < body.shape[1]:
        raise ConfigError("--column", f"index {index} out of range for {body.shape[1]} columns")
    return body[:, index]


def cmd_render(args) -> int:
    try:
        header, body = read_table_csv(args.matrix)
    except FileNotFoundError as exc:
        raise ConfigError("--matrix", f"file not found: {args.matrix}") from exc
    if args.column is None:
        image = body
    else:
        values = _select_column(header, body, args.column)
        width = args.width
        if width is None:
            width = int(round(np.sqrt(values.size)))
            if width * width != values.size:
                raise ConfigError("--width", f"{values.size} values are not a square image; "
                                  "pass --width")
        if width < 1 or values.size % width:
            raise ConfigError("--width", f"{values.size} values do not split into rows of {width}")
        image = to_picture(values, width, values.size // width)
    if image.size == 0:
        raise ConfigError("--matrix", "table has no rows")
    write_image_pgm(args.out, image, args.min, args.max)
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="msct", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", help="simulate phantom and spectral data")
    p.add_argument("--config", help="JSON run config (built-in default if omitted)")
    p.add_argument("--out", help="output directory (config output_dir if omitted)")
    p.add_argument("--self-check", action="store_true",
                   help="assert log data equals H(X_true); needs noise disabled")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("reconstruct", help="reconstruct material images from simulated data")
    p.add_argument("--config", help="JSON run config (built-in default if omitted)")
    p.add_argument("--data", required=True, help="directory written by 'simulate'")
    p.add_argument("--algorithm", choices=ALGORITHMS, help="override solver.algorithm")
    p.add_argument("--iterations", type=int, help="override solver.max_iterations")
    p.add_argument("--init", help="starting image CSV, pixels by materials (zero if omitted)")
    p.add_argument("--out", help="output directory")
    p.add_argument("--no-timing", action="store_true",
                   help="write zero wall times so outputs are byte-reproducible")
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("benchmark", help="compare all algorithms on identical data")
    p.add_argument("--config", help="JSON run config (built-in default if omitted)")
    p.add_argument("--out", help="output directory")
    p.add_argument("--no-timing", action="store_true",
                   help="write zero wall times so outputs are byte-reproducible")
    p.set_defaults(func=cmd_benchmark)

    p = sub.add_parser("render", help="render a CSV matrix as a 16-bit PGM")
    p.add_argument("--matrix", required=True, help="CSV table with a header row")
    p.add_argument("--out", required=True, help="output .pgm path")
    p.add_argument("--min", type=float, help="value mapped to 0 (data minimum if omitted)")
    p.add_argument("--max", type=float, help="value mapped to 65535 (data maximum if omitted)")
    p.add_argument("--column", help="render one column (name or index) as a square image")
    p.add_argument("--width", type=int, help="image width for --column (default: square)")
    p.set_defaults(func=cmd_render)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "iterations", None) is not None and args.iterations < 1:
        parser.error("--iterations must be >= 1")
    try:
        return args.func(args)
    except (FloatingPointError, np.linalg.LinAlgError, OSError) as exc:
        # LinAlgError subclasses ValueError, so it must be caught first
        print(f"msct: runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except ValueError as exc:
        # ConfigError and TableError included
        print(f"msct: invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
