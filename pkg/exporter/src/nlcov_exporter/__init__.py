"""Bridge from PyTorch models to the nlcov coverage engine.

Captures per-layer activations through forward hooks into .nlct trace
files and serves models over the engine's framed subprocess protocol.
Both surfaces are wire-format implementations: this package does not
import the engine.
"""

from .hooks import ActivationCapture, HookPlan, HookSpec
from .export import export_trace

# the protocol server lives in nlcov_exporter.serve (run it with
# `python -m nlcov_exporter.serve`); it is not imported here so the
# module can double as __main__ without a double-import warning

__version__ = "0.1.0"
