"""Acceptance gate: one test class per criterion.

Each class carries a ``criterion`` marker; ``conftest.py`` prints one
PASS/FAIL line per criterion at the end of the run.
"""

import json
import time
from dataclasses import replace

import numpy as np
import pytest

from conftest import random_geometry, random_system
from msct import cli
from msct.io_formats import (
    config_from_dict,
    config_to_dict,
    default_config_dict,
    load_config,
    read_image_pgm,
    read_table_csv,
    read_trace_csv,
    save_config,
    write_image_pgm,
    write_table_csv,
    write_trace_csv,
)
from msct.radon import ScanGeometry, build_radon
from msct.simulate import NoiseSpec, blank_scan_ratio, simulate_counts
from msct.solvers import IterationRecord, SolverConfig, reconstruct
from msct.spectral import (
    SpectralSystem,
    channel_jacobian,
    dF,
    dF_adjoint,
    dH,
    dH_adjoint,
    forward_F,
    forward_H,
    lsq_gradient,
    lsq_value,
    normalize_spectra,
    phi,
)

THRESHOLD = 0.02


def _pairing_gap(lhs_vec, eta, xi, rhs_vec):
    """Dot-product test residual relative to the Cauchy-Schwarz scale."""
    lhs, rhs = np.sum(lhs_vec * eta), np.sum(xi * rhs_vec)
    scale = (np.linalg.norm(lhs_vec) * np.linalg.norm(eta)
             + np.linalg.norm(xi) * np.linalg.norm(rhs_vec))
    return abs(lhs - rhs) / max(scale, 1e-300)


def _first_below(result, threshold=THRESHOLD):
    for rec in result.trace:
        if np.all(rec.rel_error <= threshold):
            return rec.k
    return None


def _default_config(noise: bool):
    data = default_config_dict()
    data["noise"]["enabled"] = noise
    return config_from_dict(data)


@pytest.fixture(scope="module")
def default_operator():
    cfg = _default_config(False)
    return build_radon(cfg.geometry)


@pytest.mark.criterion(1, "adjoint suite")
class TestAdjointSuite:
    def test_random_instances(self):
        rng = np.random.default_rng(2024)
        start = time.perf_counter()
        worst = {"A": 0.0, "dF": 0.0, "dH": 0.0}
        for _ in range(100):
            A = build_radon(random_geometry(rng, max_pixels=16))
            M, B, E = (int(v) for v in (rng.integers(1, 4), rng.integers(1, 6),
                                        rng.integers(1, 21)))
            sys = random_system(rng, B, E, M, normalized=bool(rng.integers(2)))
            x, y = rng.standard_normal(A.shape[1]), rng.standard_normal(A.shape[0])
            worst["A"] = max(worst["A"], _pairing_gap(A.apply(x), y, x, A.apply_adjoint(y)))
            X = rng.uniform(0, 0.3, (A.shape[1], M))
            xi = rng.standard_normal(X.shape)
            eta = rng.standard_normal((A.shape[0], B))
            worst["dF"] = max(worst["dF"], _pairing_gap(dF(sys, A, X, xi), eta, xi,
                                                        dF_adjoint(sys, A, X, eta)))
            worst["dH"] = max(worst["dH"], _pairing_gap(dH(sys, A, X, xi), eta, xi,
                                                        dH_adjoint(sys, A, X, eta)))
        elapsed = time.perf_counter() - start
        assert max(worst.values()) <= 1e-10, worst
        assert elapsed < 10.0


@pytest.mark.criterion(2, "gradient suite")
class TestGradientSuite:
    @pytest.fixture(scope="class")
    @staticmethod
    def instance():
        rng = np.random.default_rng(8)
        # three pixels in a row, seen from four directions
        A = build_radon(ScanGeometry.centered(3, 1, 1.0, 4, 5))
        sys = normalize_spectra(rng.uniform(0.2, 1.0, (3, 10)), rng.uniform(0.1, 1.5, (10, 2)))
        X = rng.uniform(0.2, 1.0, (3, 2))
        Y_H = forward_H(sys, A, rng.uniform(0.0, 1.2, (3, 2)))
        return sys, A, X, Y_H

    def _central_gradient(self, sys, A, X, Y_H, h):
        g = np.zeros_like(X)
        for idx in np.ndindex(X.shape):
            step = np.zeros_like(X)
            step[idx] = h
            g[idx] = (lsq_value(sys, A, X + step, Y_H) - lsq_value(sys, A, X - step, Y_H)) / (2 * h)
        return g

    def test_matches_central_differences(self, instance):
        start = time.perf_counter()
        sys, A, X, Y_H = instance
        g = lsq_gradient(sys, A, X, Y_H)
        assert np.all(np.abs(g) > 1e-3)
        err = np.abs(self._central_gradient(sys, A, X, Y_H, 1e-4) - g) / np.abs(g)
        assert err.max() <= 1e-5
        assert time.perf_counter() - start < 5.0

    def test_second_order_decay(self, instance):
        sys, A, X, Y_H = instance
        g = lsq_gradient(sys, A, X, Y_H)
        e1 = np.linalg.norm(self._central_gradient(sys, A, X, Y_H, 1e-4) - g)
        e2 = np.linalg.norm(self._central_gradient(sys, A, X, Y_H, 5e-5) - g)
        assert 3.0 <= e1 / e2 <= 5.0


@pytest.mark.criterion(3, "algebraic identities")
class TestIdentities:
    @pytest.fixture(scope="class")
    @staticmethod
    def problem():
        rng = np.random.default_rng(31)
        A = build_radon(ScanGeometry.centered(10, 10, 1.0, 12, 15))
        S_raw = rng.uniform(0, 40, (5, 20))
        mu = rng.uniform(0.05, 1.0, (20, 3))
        X = rng.uniform(0, 0.15, (100, 3))
        return A, S_raw, mu, X

    def test_H_of_zero(self, problem):
        A, S_raw, mu, X = problem
        sys = normalize_spectra(S_raw, mu)
        assert not np.any(forward_H(sys, A, np.zeros_like(X)))

    def test_recalibration(self, problem):
        A, S_raw, mu, X = problem
        raw, norm = SpectralSystem(S_raw, mu), normalize_spectra(S_raw, mu)
        ratio = forward_F(raw, A, X) / forward_F(raw, A, np.zeros_like(X))
        np.testing.assert_allclose(ratio, forward_F(norm, A, X), rtol=1e-13, atol=0)

    def test_jacobian_at_zero_is_minus_U(self, problem):
        _, S_raw, mu, _ = problem
        sys = normalize_spectra(S_raw, mu)
        np.testing.assert_array_equal(channel_jacobian(sys, np.zeros(3)), -sys.U)

    def test_factorization(self, problem):
        A, S_raw, mu, X = problem
        sys = normalize_spectra(S_raw, mu)
        assert phi(sys, A.apply(X)).tobytes() == forward_H(sys, A, X).tobytes()

    def test_first_steps_agree(self, problem):
        A, S_raw, mu, X = problem
        sys = normalize_spectra(S_raw, mu)
        Y_H = forward_H(sys, A, X)
        steps = [reconstruct(sys, A, Y_H, SolverConfig(alg, max_iterations=1),
                             keep_iterates=True).iterates[1] for alg in ("cp_full", "cp_fast")]
        np.testing.assert_allclose(steps[0], steps[1], rtol=0, atol=1e-12)


@pytest.mark.criterion(4, "single-energy degeneration")
class TestSingleEnergy:
    @pytest.fixture(scope="class")
    @staticmethod
    def problem():
        A = build_radon(ScanGeometry.centered(2, 2, 1.0, 4, 3))
        assert A.shape[1] == 4
        sys = normalize_spectra([[1.0], [2.5], [0.4]], [[0.7, 0.3]])
        return A, sys

    def test_H_is_linear(self, problem):
        A, sys = problem
        rng = np.random.default_rng(41)
        X, xi = rng.uniform(0, 1, (4, 2)), rng.standard_normal((4, 2))
        gap = forward_H(sys, A, X + xi) - forward_H(sys, A, X) - dH(sys, A, X, xi)
        assert np.abs(gap).max() <= 1e-12

    def test_cp_fast_matches_linear_landweber(self):
        A = build_radon(ScanGeometry.centered(2, 2, 1.0, 4, 3))
        sys = normalize_spectra([[1.0], [2.0]], [[0.7]])
        rng = np.random.default_rng(42)
        Y_H = rng.uniform(-2.0, -0.1, (A.shape[0], 2))
        step, n = 0.05, 60
        res = reconstruct(sys, A, Y_H, SolverConfig("cp_fast", step_size=step,
                                                    max_iterations=n, positivity=False),
                          keep_iterates=True)
        # with E = 1, U = -0.7 in every bin, so the preconditioned data are the
        # bin-averaged sinogram divided by 0.7
        dense = A.matrix.toarray()
        b = -Y_H.mean(axis=1) / 0.7
        x = np.zeros(4)
        for k in range(n + 1):
            np.testing.assert_allclose(res.iterates[k][:, 0], x, rtol=0, atol=1e-12)
            x = x - step * dense.T @ (dense @ x - b)


@pytest.mark.criterion(5, "noiseless convergence benchmark")
class TestNoiselessBenchmark:
    def test_iteration_counts(self, default_operator):
        start = time.perf_counter()
        cfg = _default_config(False)
        data = cli.simulate_dataset(cfg, default_operator)
        assert data.A.shape == (90 * 95, 64 * 64)
        assert data.sys.n_bins == 5 and data.sys.n_energies == 150
        assert data.sys.n_materials == 3

        def run(alg, n):
            solver = replace(cfg.solver, algorithm=alg, max_iterations=n)
            return reconstruct(data.sys, data.A, data.log_data, solver, X_true=data.X_true)

        fast = run("cp_fast", 500)
        k_fast = _first_below(fast)
        assert k_fast is not None and k_fast <= 500
        full = run("cp_full", k_fast)
        k_full = _first_below(full)
        assert k_full is not None and k_full <= k_fast
        landweber = run("landweber", k_fast)
        assert landweber.trace[k_fast].rel_error.sum() > fast.trace[k_fast].rel_error.sum()
        print(f"\nthreshold iterations: cp_fast {k_fast}, cp_full {k_full}; summed error at "
              f"{k_fast}: landweber {landweber.trace[k_fast].rel_error.sum():.4f}, "
              f"cp_fast {fast.trace[k_fast].rel_error.sum():.4f}")
        assert time.perf_counter() - start < 300.0


@pytest.mark.criterion(6, "noisy benchmark")
class TestNoisyBenchmark:
    def test_best_iterates(self, default_operator):
        cfg = _default_config(True)
        assert cfg.noise.photons_per_ray == 1e5
        data = cli.simulate_dataset(cfg, default_operator)
        _, results = cli.run_benchmark(cfg, data=data)
        rows = cli.summary_rows(results, cfg.material_names)
        for alg, name, err, k, _ in rows:
            print(f"{alg:<10} {name:<11} best {err:.4f} at {k}")
        for alg, res in results.items():
            best = np.min([r.rel_error for r in res.trace], axis=0)
            assert np.all(np.isfinite(best)), alg
            assert np.all(best <= 0.15), (alg, best)
        k_iodine, k_gd = results["cp_fast"].best_iteration[1:]
        assert min(k_iodine, k_gd) >= 1
        assert max(k_iodine, k_gd) <= 2 * min(k_iodine, k_gd)


@pytest.mark.criterion(7, "Poisson statistics")
class TestPoissonStatistics:
    def test_blank_scan_dispersion(self):
        cfg = _default_config(True)
        A = build_radon(ScanGeometry.centered(8, 8, 1.0, 100, 101))
        assert A.shape[0] >= 10**4
        raw = SpectralSystem(cfg.spectra_matrix(), cfg.attenuation_matrix())
        Y = simulate_counts(raw, A, np.zeros((A.shape[1], 3)), NoiseSpec(1e5, rng_seed=7))
        ratio = blank_scan_ratio(Y.values)
        assert ratio.shape == (5,)
        assert np.all((ratio >= 0.95) & (ratio <= 1.05)), ratio


@pytest.mark.criterion(8, "determinism and round trips")
class TestDeterminism:
    def _config(self, tmp_path):
        data = default_config_dict()
        data["geometry"].update(n_pixels_x=16, n_pixels_y=16, pixel_size=1.0, n_angles=12,
                                n_detectors=23, detector_spacing=1.0)
        data["phantom"]["shapes"] = [
            {"shape": "disk", "center": [7.5, 7.5], "radii": [6, 6], "material_index": 0,
             "density": 0.18, "profile": "smooth"},
            {"shape": "disk", "center": [5, 8], "radii": [2.5, 2.5], "material_index": 1,
             "density": 0.08},
            {"shape": "ellipse", "center": [10, 8], "radii": [2.5, 1.5], "material_index": 2,
             "density": 0.14}]
        data["noise"]["rng_seed"] = 11
        data["benchmark"]["max_iterations"] = {"landweber": 20, "cp_full": 10, "cp_fast": 10}
        path = tmp_path / "run.json"
        path.write_text(json.dumps(data))
        return path

    def test_pipeline_bytes(self, tmp_path):
        cfg = load_config(self._config(tmp_path))
        a, b = cli.simulate_dataset(cfg), cli.simulate_dataset(cfg)
        for name in ("X_true", "counts", "log_data"):
            va, vb = getattr(a, name), getattr(b, name)
            va, vb = getattr(va, "values", va), getattr(vb, "values", vb)
            assert va.tobytes() == vb.tobytes(), name
        ra = reconstruct(a.sys, a.A, a.log_data, cfg.solver, X_true=a.X_true)
        rb = reconstruct(b.sys, b.A, b.log_data, cfg.solver, X_true=b.X_true)
        assert ra.X_final.tobytes() == rb.X_final.tobytes()

    def test_cli_outputs(self, tmp_path):
        config = str(self._config(tmp_path))
        snapshots = []
        for run in ("one", "two"):
            base = tmp_path / run
            assert cli.main(["simulate", "--config", config, "--out", str(base / "sim")]) == 0
            assert cli.main(["reconstruct", "--config", config, "--data", str(base / "sim"),
                             "--iterations", "15", "--no-timing", "--out",
                             str(base / "rec")]) == 0
            assert cli.main(["benchmark", "--config", config, "--no-timing",
                             "--out", str(base / "bench")]) == 0
            snapshots.append({p.relative_to(base).as_posix(): p.read_bytes()
                              for p in sorted(base.rglob("*")) if p.is_file()})
        assert snapshots[0].keys() == snapshots[1].keys()
        assert len(snapshots[0]) > 10
        for key in snapshots[0]:
            assert snapshots[0][key] == snapshots[1][key], key

    def test_table_round_trip(self, tmp_path):
        rng = np.random.default_rng(81)
        matrix = rng.standard_normal((17, 4)) * 10.0 ** rng.integers(-300, 300, (17, 4))
        matrix[0, 0], matrix[1, 1] = -0.0, 5e-324
        write_table_csv(tmp_path / "t.csv", matrix, ["a", "b", "c", "d"])
        header, body = read_table_csv(tmp_path / "t.csv")
        assert header == ["a", "b", "c", "d"]
        assert body.tobytes() == matrix.tobytes()

    def test_image_round_trip(self, tmp_path):
        rng = np.random.default_rng(82)
        samples = rng.integers(0, 65536, (7, 5)).astype(float)
        write_image_pgm(tmp_path / "i.pgm", samples, 0.0, 65535.0)
        assert read_image_pgm(tmp_path / "i.pgm").tobytes() == samples.astype(np.uint16).tobytes()

    def test_trace_round_trip(self, tmp_path):
        rng = np.random.default_rng(83)
        trace = [IterationRecord(k, float(rng.uniform()), float(rng.standard_normal()),
                                 rng.uniform(0, 1, 3), float(rng.uniform()))
                 for k in range(6)]
        write_trace_csv(tmp_path / "tr.csv", trace)
        back = read_trace_csv(tmp_path / "tr.csv")
        for r, s in zip(trace, back):
            assert (r.k, r.lsq_value, r.residual_norm, r.wall_time) == \
                (s.k, s.lsq_value, s.residual_norm, s.wall_time)
            assert r.rel_error.tobytes() == s.rel_error.tobytes()

    def test_config_round_trip(self, tmp_path):
        cfg = load_config(self._config(tmp_path))
        save_config(cfg, tmp_path / "again.json")
        again = load_config(tmp_path / "again.json")
        assert config_to_dict(again) == config_to_dict(cfg)
        assert again.spectra_matrix().tobytes() == cfg.spectra_matrix().tobytes()
        assert again.attenuation_matrix().tobytes() == cfg.attenuation_matrix().tobytes()
        save_config(again, tmp_path / "third.json")
        assert (tmp_path / "again.json").read_bytes() == (tmp_path / "third.json").read_bytes()
