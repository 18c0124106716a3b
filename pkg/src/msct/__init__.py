"""Multispectral CT material decomposition with channel-preconditioned solvers."""

from .radon import RadonOperator, ScanGeometry, build_radon, estimate_norm
from .simulate import (
    MaterialCurve,
    NoiseSpec,
    PhantomSpec,
    Shape,
    SpectralBump,
    make_phantom,
    simulate_counts,
    synth_attenuation,
    synth_spectra,
    to_log_data,
)
from .solvers import (
    ALGORITHMS,
    ReconstructionResult,
    SolverConfig,
    reconstruct,
    run_cp_fast,
    run_cp_full,
    run_landweber,
)
from .spectral import (
    EnergyGrid,
    SpectralData,
    SpectralSystem,
    forward_F,
    forward_H,
    lsq_gradient,
    lsq_value,
    normalize_spectra,
    phi,
)

__version__ = "0.1.0"

__all__ = [
    "ALGORITHMS",
    "EnergyGrid",
    "MaterialCurve",
    "NoiseSpec",
    "PhantomSpec",
    "RadonOperator",
    "ReconstructionResult",
    "ScanGeometry",
    "Shape",
    "SolverConfig",
    "SpectralBump",
    "SpectralData",
    "SpectralSystem",
    "build_radon",
    "estimate_norm",
    "forward_F",
    "forward_H",
    "lsq_gradient",
    "lsq_value",
    "make_phantom",
    "normalize_spectra",
    "phi",
    "reconstruct",
    "run_cp_fast",
    "run_cp_full",
    "run_landweber",
    "simulate_counts",
    "synth_attenuation",
    "synth_spectra",
    "to_log_data",
]
