"""Coverage-guided input mutation.

The loop picks a seed, tries up to `num` sampled transformations, and
accepts the first mutant that is both valid (see `mutate.is_valid`) and
increases the coverage value; accepted mutants join the seed pool.  The
coverage gate is evaluated by snapshotting the criterion, tentatively
absorbing the mutant's activations, and rolling back when the value does
not rise by more than `rel_eps` (relative).  Every evaluated mutant is
also checked against the metamorphic oracle: a prediction different from
its seed's expected label is recorded as a fault whether or not the
mutant was accepted.

With `random_mode` the coverage gate always passes (baseline mode); the
validity check still applies.  With `speculative` the candidates of one
iteration are evaluated against a frozen snapshot in parallel and the
first acceptable one is committed in candidate order; the output is
identical to sequential mode.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .criteria import Criterion, single_input_batch
from .errors import ConfigError, RunnerError
from .mutate import MutationOp, ValidityParams, default_ops, is_valid
from .runner import MlpRunner, Runner
from .trace import TraceWriter

REPORT_SCHEMA = {
    "$schema": "http://json-schema.org/draft-07/schema#",
    "type": "object",
    "required": [
        "schema", "criterion", "seed", "iterations", "evaluated", "accepted",
        "faults", "fault_rate", "per_class_faults", "classes_covered",
        "entropy", "coverage_initial", "coverage_final", "trajectory",
        "incomplete", "random_mode",
    ],
    "properties": {
        "schema": {"const": "nlcov-fuzz-report/1"},
        "criterion": {"type": "string"},
        "seed": {"type": "integer"},
        "iterations": {"type": "integer", "minimum": 0},
        "evaluated": {"type": "integer", "minimum": 0},
        "accepted": {"type": "integer", "minimum": 0},
        "faults": {"type": "integer", "minimum": 0},
        "fault_rate": {"type": "number", "minimum": 0},
        "per_class_faults": {
            "type": "object",
            "additionalProperties": {"type": "integer", "minimum": 0},
        },
        "classes_covered": {"type": "integer", "minimum": 0},
        "entropy": {"type": "number", "minimum": 0, "maximum": 1},
        "coverage_initial": {"type": "number"},
        "coverage_final": {"type": "number"},
        "trajectory": {
            "type": "array",
            "items": {
                "type": "array",
                "prefixItems": [{"type": "integer"}, {"type": "number"}],
                "minItems": 2,
                "maxItems": 2,
            },
        },
        "incomplete": {"type": "boolean"},
        "random_mode": {"type": "boolean"},
        "rollback_checks": {"type": "integer", "minimum": 0},
        "error": {"type": "string"},
    },
    "additionalProperties": True,
}


@dataclass
class FuzzConfig:
    max_iterations: int = 10_000
    num: int = 50  # transformation tries per picked seed
    validity: ValidityParams = field(default_factory=ValidityParams)
    rel_eps: float = 1e-7
    seed: int = 0
    random_mode: bool = False
    oracle: bool = True
    check_rollback: bool = False
    speculative: bool = False
    ops: Optional[list[MutationOp]] = None
    # absorb the seed suite into the criterion before the loop; without
    # this a cold covariance state rejects every single-input candidate
    # (one point has zero spread), deadlocking the gate
    warm_start_on_seeds: bool = True

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ConfigError("max_iterations must be >= 1")
        if self.num < 1:
            raise ConfigError("num must be >= 1")


@dataclass
class SeedEntry:
    image: np.ndarray
    expected_label: int
    seed_id: str
    op_chain: tuple[str, ...] = ()


@dataclass
class AcceptedRecord:
    entry: SeedEntry
    predicted: int
    activations: list[np.ndarray]
    iteration: int
    fault: bool


@dataclass
class FaultRecord:
    image: np.ndarray
    predicted: int
    expected: int
    seed_id: str
    op_chain: tuple[str, ...]
    iteration: int


@dataclass
class FuzzReport:
    criterion: str
    seed: int
    iterations: int
    evaluated: int
    accepted: int
    faults: int
    fault_rate: float
    per_class_faults: dict[int, int]
    classes_covered: int
    entropy: float
    coverage_initial: float
    coverage_final: float
    trajectory: list[tuple[int, float]]
    incomplete: bool
    random_mode: bool
    rollback_checks: int
    error: Optional[str] = None

    def to_dict(self) -> dict:
        doc = {
            "schema": "nlcov-fuzz-report/1",
            "criterion": self.criterion,
            "seed": self.seed,
            "iterations": self.iterations,
            "evaluated": self.evaluated,
            "accepted": self.accepted,
            "faults": self.faults,
            "fault_rate": self.fault_rate,
            "per_class_faults": {str(k): v for k, v in sorted(self.per_class_faults.items())},
            "classes_covered": self.classes_covered,
            "entropy": self.entropy,
            "coverage_initial": self.coverage_initial,
            "coverage_final": self.coverage_final,
            "trajectory": [[it, val] for it, val in self.trajectory],
            "incomplete": self.incomplete,
            "random_mode": self.random_mode,
            "rollback_checks": self.rollback_checks,
        }
        if self.error is not None:
            doc["error"] = self.error
        return doc


@dataclass
class FuzzResult:
    report: FuzzReport
    pool: list[SeedEntry]
    accepted: list[AcceptedRecord]
    fault_records: list[FaultRecord]
    input_shape: tuple[int, int, int]
    class_count: int
    layers: list = field(default_factory=list)


def report_metrics(fault_labels: Sequence[int], class_count: int) -> tuple[int, float]:
    """Distinct predicted classes among faults, and the scaled entropy of
    the fault class histogram (uniform over all classes scores 1)."""
    if class_count < 1:
        raise ConfigError("class_count must be >= 1")
    labels = list(fault_labels)
    if not labels:
        return 0, 0.0
    counts: dict[int, int] = {}
    for lab in labels:
        counts[lab] = counts.get(lab, 0) + 1
    n_classes = len(counts)
    if class_count == 1:
        return n_classes, 0.0
    total = len(labels)
    acc = 0.0
    for c in counts.values():
        p = c / total
        acc -= p * math.log(p)
    return n_classes, acc / math.log(class_count)


def _coverage_inc(before: float, after: float, rel_eps: float) -> bool:
    return (after - before) > rel_eps * max(abs(before), 1.0)


def _evaluate_candidates(runner, images: list[np.ndarray], parallel: bool):
    if parallel and len(images) > 1 and isinstance(runner, MlpRunner):
        with ThreadPoolExecutor(max_workers=min(8, len(images))) as pool:
            return list(pool.map(runner.run, images))
    return [runner.run(img) for img in images]


def run_fuzz(
    config: FuzzConfig,
    runner: Runner,
    criterion: Criterion,
    seeds: Sequence[SeedEntry],
) -> FuzzResult:
    """Run the mutation loop; deterministic for a fixed config and seed."""
    if not seeds:
        raise ConfigError("seed set is empty")
    runner_widths = [m.neurons for m in runner.layers]
    crit_widths = [m.neurons for m in criterion.layers]
    if runner_widths != crit_widths:
        raise ConfigError(
            f"criterion layers {crit_widths} do not match runner layers {runner_widths}"
        )
    ops = config.ops if config.ops is not None else default_ops()
    if not ops:
        raise ConfigError("operator set is empty")

    rng = np.random.default_rng(config.seed)
    pool: list[SeedEntry] = list(seeds)
    accepted: list[AcceptedRecord] = []
    faults: list[FaultRecord] = []
    trajectory: list[tuple[int, float]] = []
    evaluated = 0
    rollback_checks = 0
    incomplete = False
    error: Optional[str] = None
    iterations_run = 0

    if config.warm_start_on_seeds:
        try:
            for entry in pool:
                seeded = runner.run(entry.image)
                criterion.update(
                    single_input_batch(seeded.activations, label=entry.expected_label)
                )
        except RunnerError as exc:
            incomplete = True
            error = str(exc)
    coverage_initial = criterion.value()

    for iteration in range(config.max_iterations if not incomplete else 0):
        entry = pool[int(rng.integers(len(pool)))]
        # the try loop draws from a spawned child generator so sequential
        # and speculative mode consume identical randomness
        try_rng = rng.spawn(1)[0]
        candidates = []
        for _ in range(config.num):
            op = ops[int(try_rng.integers(len(ops)))]
            params = op.sample(try_rng)
            candidates.append((op, params))

        try:
            if config.speculative:
                stop = _iterate_speculative(
                    config, runner, criterion, entry, candidates,
                    iteration, pool, accepted, faults,
                )
            else:
                stop = _iterate_sequential(
                    config, runner, criterion, entry, candidates,
                    iteration, pool, accepted, faults,
                )
            evaluated += stop.evaluated
            rollback_checks += stop.rollback_checks
        except RunnerError as exc:
            incomplete = True
            error = str(exc)
            iterations_run = iteration
            break
        iterations_run = iteration + 1
        trajectory.append((iteration, criterion.value()))

    fault_labels = [f.predicted for f in faults]
    classes_covered, entropy = report_metrics(fault_labels, max(1, runner.classes))
    per_class: dict[int, int] = {}
    for lab in fault_labels:
        per_class[lab] = per_class.get(lab, 0) + 1
    report = FuzzReport(
        criterion=criterion.key,
        seed=config.seed,
        iterations=iterations_run,
        evaluated=evaluated,
        accepted=len(accepted),
        faults=len(faults),
        fault_rate=(len(faults) / evaluated) if evaluated else 0.0,
        per_class_faults=per_class,
        classes_covered=classes_covered,
        entropy=entropy,
        coverage_initial=coverage_initial,
        coverage_final=criterion.value(),
        trajectory=trajectory,
        incomplete=incomplete,
        random_mode=config.random_mode,
        rollback_checks=rollback_checks,
        error=error,
    )
    return FuzzResult(
        report=report,
        pool=pool,
        accepted=accepted,
        fault_records=faults,
        input_shape=runner.input_shape,
        class_count=runner.classes,
        layers=list(runner.layers),
    )


@dataclass
class _IterationOutcome:
    evaluated: int = 0
    rollback_checks: int = 0


def _gate_and_commit(config, criterion, entry, result, image, op_desc,
                     iteration, pool, accepted, faults, outcome) -> bool:
    """Oracle check plus the coverage gate for one evaluated candidate.
    Returns True when the candidate was accepted (ends the iteration)."""
    fault = bool(config.oracle and result.prediction != entry.expected_label)
    if fault:
        faults.append(
            FaultRecord(
                image=image,
                predicted=result.prediction,
                expected=entry.expected_label,
                seed_id=entry.seed_id,
                op_chain=entry.op_chain + (op_desc,),
                iteration=iteration,
            )
        )
    batch = single_input_batch(result.activations, label=entry.expected_label)
    if config.random_mode:
        criterion.update(batch)
        accept = True
    else:
        snap = criterion.snapshot()
        before = criterion.value()
        criterion.update(batch)
        accept = _coverage_inc(before, criterion.value(), config.rel_eps)
        if not accept:
            criterion.restore(snap)
            if config.check_rollback:
                if not criterion.state_equal(snap):
                    raise AssertionError(
                        "rollback soundness violated: state differs from snapshot"
                    )
                outcome.rollback_checks += 1
    if accept:
        new_entry = SeedEntry(
            image=image,
            expected_label=entry.expected_label,
            seed_id=entry.seed_id,
            op_chain=entry.op_chain + (op_desc,),
        )
        pool.append(new_entry)
        accepted.append(
            AcceptedRecord(
                entry=new_entry,
                predicted=result.prediction,
                activations=result.activations,
                iteration=iteration,
                fault=fault,
            )
        )
    return accept


def _iterate_sequential(config, runner, criterion, entry, candidates,
                        iteration, pool, accepted, faults) -> _IterationOutcome:
    outcome = _IterationOutcome()
    for op, params in candidates:
        image = op.apply_params(entry.image, params)
        if not is_valid(entry.image, image, config.validity):
            continue
        result = runner.run(image)
        outcome.evaluated += 1
        if _gate_and_commit(config, criterion, entry, result, image,
                            op.describe(params), iteration, pool, accepted,
                            faults, outcome):
            break
    return outcome


def _iterate_speculative(config, runner, criterion, entry, candidates,
                         iteration, pool, accepted, faults) -> _IterationOutcome:
    outcome = _IterationOutcome()
    prepared = []
    for op, params in candidates:
        image = op.apply_params(entry.image, params)
        if is_valid(entry.image, image, config.validity):
            prepared.append((op, params, image))
    results = _evaluate_candidates(
        runner, [image for _, _, image in prepared], parallel=True
    )
    # commit in candidate order; candidates past the first accepted one are
    # discarded unseen so the outcome matches sequential mode exactly
    for (op, params, image), result in zip(prepared, results):
        outcome.evaluated += 1
        if _gate_and_commit(config, criterion, entry, result, image,
                            op.describe(params), iteration, pool, accepted,
                            faults, outcome):
            break
    return outcome


# ---------------------------------------------------------------------------
# corpus and report output
# ---------------------------------------------------------------------------


def write_corpus(out_dir, result: FuzzResult) -> None:
    """Write report.json, accepted inputs as raw float32 files with a
    provenance manifest, and the accepted mutants' activations as a trace."""
    out = Path(out_dir)
    (out / "inputs").mkdir(parents=True, exist_ok=True)
    with open(out / "report.json", "w") as fh:
        json.dump(result.report.to_dict(), fh, indent=2)
        fh.write("\n")

    entries = []
    for i, rec in enumerate(result.accepted):
        fname = f"mutant_{i:06d}.bin"
        np.ascontiguousarray(rec.entry.image, dtype="<f4").tofile(out / "inputs" / fname)
        entries.append(
            {
                "file": fname,
                "iteration": rec.iteration,
                "seed": rec.entry.seed_id,
                "expected_label": rec.entry.expected_label,
                "predicted": rec.predicted,
                "fault": rec.fault,
                "ops": list(rec.entry.op_chain),
            }
        )
    manifest = {
        "shape": list(result.input_shape),
        "entries": entries,
    }
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2)
        fh.write("\n")

    if result.accepted:
        with TraceWriter(
            out / "corpus.nlct", result.layers, labeled=True,
            class_count=max(1, result.class_count),
        ) as writer:
            for rec in result.accepted:
                writer.append(rec.activations, label=rec.entry.expected_label)
