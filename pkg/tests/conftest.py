import numpy as np
import pytest

from msct.radon import ScanGeometry, build_radon
from msct.spectral import SpectralSystem, normalize_spectra

_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


def pytest_runtest_logreport(report):
    number = getattr(report, "criterion", None)
    if number is None:
        return
    entry = _CRITERIA.setdefault(number[0], [number[1], True])
    if report.failed or (report.when == "call" and report.skipped):
        entry[1] = False


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is not None:
        report.criterion = marker.args


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, ok = _CRITERIA[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {title}")


def random_geometry(rng, max_pixels=16):
    nx, ny = rng.integers(1, max_pixels + 1, size=2)
    ps = float(rng.uniform(0.5, 2.0))
    n_det = int(rng.integers(1, 2 * max(nx, ny) + 2))
    spacing = float(rng.uniform(0.3, 1.5)) * ps
    return ScanGeometry.centered(int(nx), int(ny), ps, int(rng.integers(1, 9)), n_det, spacing)


def random_system(rng, B, E, M, normalized=True):
    S = rng.uniform(0.1, 1.0, size=(B, E))
    mu = rng.uniform(0.05, 1.0, size=(E, M))
    return normalize_spectra(S, mu) if normalized else SpectralSystem(S, mu)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_problem(rng):
    """8x8 grid, M=2, B=3, E=12 with a positive random image."""
    geom = ScanGeometry.centered(8, 8, 1.0, 10, 13)
    A = build_radon(geom)
    sys = random_system(rng, 3, 12, 2)
    X = rng.uniform(0.0, 0.1, size=(geom.n_x, 2))
    return sys, A, X
