"""Covariance-based neural network test coverage engine.

Quantifies how thoroughly a test suite exercises a model by tracking the
per-layer covariance of neuron outputs (plus eight classic neuron-level
baseline criteria) over activation traces, and drives coverage-guided
input mutation to surface fault-revealing inputs.
"""

from .accum import BatchStats, CovAccumulator, batch_stats, entrywise_l1, merge
from .criteria import (
    ActivationBatch,
    CovarianceCoverage,
    Criterion,
    CriterionConfig,
    LayerMeta,
    RangeTable,
    fit_ranges,
    make_criterion,
)
from .errors import ConfigError, FormatError, NlcovError, RunnerError
from .fuzz import FuzzConfig, FuzzReport, SeedEntry, report_metrics, run_fuzz
from .mutate import ValidityParams, build_ops, default_ops, is_valid
from .runner import MlpModel, MlpRunner, RunResult, forward, load_mlp, spawn_external
from .state import load_state, save_state
from .trace import TraceHeader, TraceWriter, read_trace, write_trace

__version__ = "0.1.0"
