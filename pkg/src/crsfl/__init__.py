"""Conditional Random Sampling for federated learning, with an LDP accountant.

Set ``CRSFL_NUMBA=0`` before import to force the pure-numpy kernels.
"""

from ._kernels import USE_NUMBA
from .config import ConfigError, ExperimentConfig, parse_config, parse_text
from .engine import CertificateRefused, Experiment, fedavg_aggregate, run_experiment
from .linalg import Codec, SparseUpdate, densify, deserialize, payload_bytes, serialize
from .metrics import RoundMetrics, accuracy_per_ot, emit_csv, overall_transmission
from .privacy import (
    PrivacyCertificate, delta_bound, issue_certificate, max_sampling_probability, max_sampling_size,
)
from .samplers import Sampler, SamplerConfig, SamplerKind

__version__ = "0.1.0"

__all__ = [
    "USE_NUMBA", "ConfigError", "ExperimentConfig", "parse_config", "parse_text",
    "CertificateRefused", "Experiment", "fedavg_aggregate", "run_experiment",
    "Codec", "SparseUpdate", "densify", "deserialize", "payload_bytes", "serialize",
    "RoundMetrics", "accuracy_per_ot", "emit_csv", "overall_transmission",
    "PrivacyCertificate", "delta_bound", "issue_certificate", "max_sampling_probability",
    "max_sampling_size", "Sampler", "SamplerConfig", "SamplerKind",
]
