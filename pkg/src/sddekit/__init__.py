"""Simulation, rate certificates and Monte Carlo checks for stochastic delay equations."""

__version__ = "0.1.0"

from .model import (  # noqa: E402
    DiscreteDelay, DissipativityCert, DistributedDelay, FsdeModel, LinearDrift, LipschitzCert,
    ModelValidationError, Segment, SemiLinearModel, SignedMatrixMeasure, TanhDelay, ZeroDelay,
    apply_measure, nu_total_variation_norm, probe_dissipativity, validate_model,
)
from .certify import (  # noqa: E402
    HarnackParams, RateCert, best_harnack_exponent, check_cor12, harnack_exponent,
    nw2_exponent, rate_cor14, rate_thm11, rate_thm13,
)
from .spectral import (  # noqa: E402
    CharRootResult, GammaTable, PpBoundResult, ck_empirical, gamma_fourier, gamma_solve,
    lambda0, pp_bound,
)
from .simulate import (  # noqa: E402
    CouplingRun, PathRecord, girsanov_batch, girsanov_coupling, representation_path, simulate,
    simulate_coupled,
)
from .config import ConfigError, RunConfig, load_config  # noqa: E402

__all__ = [
    "DiscreteDelay", "DissipativityCert", "DistributedDelay", "FsdeModel", "LinearDrift",
    "LipschitzCert", "ModelValidationError", "Segment", "SemiLinearModel", "SignedMatrixMeasure",
    "TanhDelay", "ZeroDelay", "apply_measure", "nu_total_variation_norm", "probe_dissipativity",
    "validate_model",
    "HarnackParams", "RateCert", "best_harnack_exponent", "check_cor12", "harnack_exponent",
    "nw2_exponent", "rate_cor14", "rate_thm11", "rate_thm13",
    "CharRootResult", "GammaTable", "PpBoundResult", "ck_empirical", "gamma_fourier",
    "gamma_solve", "lambda0", "pp_bound",
    "CouplingRun", "PathRecord", "girsanov_batch", "girsanov_coupling", "representation_path",
    "simulate", "simulate_coupled",
    "ConfigError", "RunConfig", "load_config",
]
