"""Command-line interface.

Subcommands: fit, coverage, fuzz, bench, synth, inspect.  All outputs are
JSON on stdout; errors print one machine-parsable line to stderr and map
to exit codes 2 (usage), 3 (file format), 4 (runner failure).  The
NLC_LOG environment variable sets the log level.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import bench as bench_mod
from . import state as state_mod
from .criteria import (
    ActivationBatch,
    CriterionConfig,
    LayerMeta,
    criterion_config_from_pairs,
    fit_ranges,
    make_criterion,
    parse_kv_pairs,
)
from .errors import ConfigError, FormatError, NlcovError, RunnerError
from .fuzz import FuzzConfig, SeedEntry, run_fuzz, write_corpus
from .mutate import ValidityParams, build_ops
from .runner import MlpRunner, forward_batch, load_mlp, save_mlp, spawn_external
from .synth import (
    DatasetScheme,
    make_gaussian_classifier_data,
    make_smoothed_classifier,
    make_variant,
    train_toy_mlp,
)
from .trace import TraceWriter, read_header, read_trace

log = logging.getLogger("nlcov")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_FORMAT = 3
EXIT_RUNNER = 4


def _setup_logging():
    level = os.environ.get("NLC_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


def _emit(doc, out_path=None):
    text = json.dumps(doc, indent=2, sort_keys=True)
    print(text)
    if out_path:
        Path(out_path).write_text(text + "\n")


# ---------------------------------------------------------------------------
# input handling: binary traces plus a tiny CSV import for hand fixtures
# ---------------------------------------------------------------------------


def _parse_layer_spec(spec: str) -> list[LayerMeta]:
    metas = []
    for part in spec.split(","):
        part = part.strip()
        if not part:
            continue
        if ":" not in part:
            raise ConfigError(f"layer spec needs name:neurons, got {part!r}")
        name, neurons = part.rsplit(":", 1)
        metas.append(LayerMeta(name, int(neurons)))
    if not metas:
        raise ConfigError("empty layer spec")
    return metas


def _read_csv_batch(path, metas, labeled):
    """Hand-written fixture import: columns are the concatenated layer
    activations in layer order, plus a trailing label column if labeled."""
    widths = [m.neurons for m in metas]
    total = sum(widths)
    expect = total + (1 if labeled else 0)
    rows = []
    labels = []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), 1):
            if not row or row[0].lstrip().startswith("#"):
                continue
            if len(row) != expect:
                raise FormatError(
                    f"{path}:{lineno}: expected {expect} columns, got {len(row)}"
                )
            values = [float(v) for v in row]
            if labeled:
                labels.append(int(values[-1]))
                values = values[:-1]
            rows.append(values)
    if not rows:
        raise FormatError(f"{path}: no data rows")
    data = np.asarray(rows, dtype=np.float64)
    layers = np.split(data, np.cumsum(widths)[:-1], axis=1) if len(widths) > 1 else [data]
    return ActivationBatch(
        layers=list(layers),
        labels=np.asarray(labels) if labeled else None,
    )


def _open_activations(args):
    """Returns (layer metas, class_count, batch-iterator factory)."""
    path = args.trace
    if path.endswith(".csv"):
        if not args.csv_layers:
            raise ConfigError("CSV input needs --csv-layers name:neurons,...")
        metas = _parse_layer_spec(args.csv_layers)
        batch = _read_csv_batch(path, metas, args.csv_labeled)
        classes = int(batch.labels.max()) + 1 if batch.labels is not None else 0
        return metas, classes, lambda: iter([batch])
    header, _ = read_trace(path, batch_size=args.batch_size)

    def factory():
        _, batches = read_trace(path, batch_size=args.batch_size)
        return batches

    return header.layers, header.class_count, factory


_CRITERION_KEYS = ("criterion", "t", "k", "cc_t", "layers", "class_conditional",
                   "class_count")


def _criterion_config(args, class_count, file_pairs=None) -> CriterionConfig:
    pairs = {}
    if file_pairs is None and getattr(args, "config", None):
        file_pairs = parse_kv_pairs(Path(args.config).read_text())
    if file_pairs:
        pairs.update({k: v for k, v in file_pairs.items() if k in _CRITERION_KEYS})
    if args.criterion:
        pairs["criterion"] = args.criterion
    if args.t is not None:
        pairs["t"] = str(args.t)
    if args.k is not None:
        pairs["k"] = str(args.k)
    if args.cc_t is not None:
        pairs["cc_t"] = str(args.cc_t)
    if args.layers:
        pairs["layers"] = args.layers
    if args.class_conditional:
        pairs["class_conditional"] = "true"
    cfg = criterion_config_from_pairs(pairs)
    if cfg.class_conditional and cfg.class_count == 0:
        cfg.class_count = class_count
    return cfg


def cmd_fit(args) -> int:
    metas, class_count, batches = _open_activations(args)
    cfg = _criterion_config(args, class_count)
    crit = make_criterion(cfg, metas)
    if crit.needs_ranges:
        try:
            crit.set_ranges(fit_ranges(batches()))
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
    absorbed = 0
    for batch in batches():
        crit.update(batch)
        absorbed += batch.n
    if absorbed == 0 and not crit.needs_ranges:
        log.warning("fit over an empty trace produced an empty state")
    state_mod.save_state(args.out, crit)
    _emit({
        "criterion": crit.key,
        "inputs": absorbed,
        "value": crit.value(),
        "state": str(args.out),
    })
    return EXIT_OK


def cmd_coverage(args) -> int:
    metas, class_count, batches = _open_activations(args)
    if args.state:
        crit = state_mod.load_state(args.state, metas)
        if args.criterion and args.criterion != crit.key:
            raise ConfigError(
                f"state file holds criterion {crit.key!r}, not {args.criterion!r}"
            )
        warm_value = crit.value()
    else:
        cfg = _criterion_config(args, class_count)
        crit = make_criterion(cfg, metas)
        warm_value = None
    absorbed = 0
    try:
        for batch in batches():
            crit.update(batch)
            absorbed += batch.n
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    doc = {
        "criterion": crit.key,
        "inputs": absorbed,
        "value": crit.value(),
        "per_layer": crit.per_layer(),
    }
    if warm_value is not None:
        doc["warm_value"] = warm_value
        doc["delta"] = crit.value() - warm_value
    _emit(doc, args.out)
    return EXIT_OK


def _load_seed_dir(path):
    manifest_path = Path(path) / "seeds.json"
    if not manifest_path.exists():
        raise FormatError(f"seed directory {path} has no seeds.json")
    doc = json.loads(manifest_path.read_text())
    try:
        shape = tuple(int(v) for v in doc["shape"])
        entries = doc["entries"]
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"malformed seeds.json: {exc}") from exc
    seeds = []
    for entry in entries:
        raw = np.fromfile(Path(path) / entry["file"], dtype="<f4")
        if raw.size != int(np.prod(shape)):
            raise FormatError(
                f"seed {entry['file']} has {raw.size} values, expected shape {shape}"
            )
        seeds.append(
            SeedEntry(
                image=raw.astype(np.float64).reshape(shape),
                expected_label=int(entry["label"]),
                seed_id=entry["file"],
            )
        )
    if not seeds:
        raise FormatError("seed directory holds no seeds")
    return shape, seeds


def cmd_fuzz(args) -> int:
    if bool(args.model) == bool(args.runner):
        raise ConfigError("fuzz needs exactly one of --model or --runner")
    shape, seeds = _load_seed_dir(args.seeds)
    if args.model:
        runner = MlpRunner(load_mlp(args.model), input_shape=shape)
    else:
        runner = spawn_external(args.runner, timeout=args.timeout)
        if tuple(runner.input_shape) != shape:
            raise ConfigError(
                f"runner expects shape {runner.input_shape}, seeds are {shape}"
            )
    pairs = {}
    if args.config:
        pairs.update(parse_kv_pairs(Path(args.config).read_text()))

    def pick(flag, key, cast):
        if flag is not None:
            return flag
        if key in pairs:
            return cast(pairs[key])
        return None

    if args.state:
        criterion = state_mod.load_state(args.state, runner.layers)
        if args.criterion and args.criterion != criterion.key:
            raise ConfigError(
                f"state file holds criterion {criterion.key!r}, not "
                f"{args.criterion!r}"
            )
    else:
        crit_cfg = _criterion_config(args, class_count=runner.classes,
                                     file_pairs=pairs)
        criterion = make_criterion(crit_cfg, runner.layers)
        if criterion.needs_ranges:
            raise ConfigError(
                f"criterion {criterion.key!r} needs fitted ranges; fit a warm "
                "state first and pass it with --state"
            )

    ops_spec = args.ops or pairs.get("ops")
    ops = build_ops(ops_spec.split(",")) if ops_spec else None
    fuzz_cfg = FuzzConfig(
        max_iterations=pick(args.max_iterations, "max_iterations", int) or 10_000,
        num=pick(args.num, "num", int) or 50,
        validity=ValidityParams(
            alpha=pick(args.alpha, "alpha", float) or 0.2,
            beta=pick(args.beta, "beta", float) or 0.4,
        ),
        rel_eps=pick(args.rel_eps, "rel_eps", float) or 1e-7,
        seed=pick(args.seed, "seed", int) or 0,
        random_mode=args.random_mode,
        check_rollback=args.check_rollback,
        speculative=args.speculative,
        ops=ops,
    )
    try:
        result = run_fuzz(fuzz_cfg, runner, criterion, seeds)
    finally:
        runner.close()
    write_corpus(args.out, result)
    _emit(result.report.to_dict())
    if result.report.incomplete:
        raise RunnerError(result.report.error or "runner failed mid-run")
    return EXIT_OK


def cmd_bench(args) -> int:
    report = bench_mod.run_bench(
        m=args.m, batches=args.batches, batch_size=args.batch_size, seed=args.seed or 0
    )
    _emit(report, args.out)
    return EXIT_OK


def _write_model_trace(path, model, points, labels, class_count, batch_size=512):
    metas = model.layer_metas()
    with TraceWriter(path, metas, labeled=labels is not None,
                     class_count=class_count) as writer:
        for lo in range(0, len(points), batch_size):
            chunk = points[lo : lo + batch_size]
            _, acts = forward_batch(model, chunk)
            writer.append_batch(ActivationBatch(
                layers=acts,
                labels=labels[lo : lo + batch_size] if labels is not None else None,
            ))


def cmd_synth(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(args.seed or 0)
    if args.smooth:
        model, train_points, train_labels = make_smoothed_classifier(
            args.classes, args.per_class, args.dim, args.separation,
            seed=args.seed or 0, hidden=args.hidden, epochs=args.epochs,
            lr=args.lr, smoothing_self_weight=args.smooth,
        )
        rng = np.random.default_rng((args.seed or 0) + 1)
    else:
        train_points, train_labels = make_gaussian_classifier_data(
            args.classes, args.per_class, args.dim, args.separation, rng
        )
        model = train_toy_mlp(
            (train_points, train_labels), epochs=args.epochs, lr=args.lr,
            hidden=args.hidden, seed=args.seed or 0,
            target_accuracy=args.target_accuracy,
        )
    save_mlp(out / "model.json", model)
    _write_model_trace(out / "train.nlct", model, train_points, train_labels,
                       args.classes)

    test_points, test_labels = make_gaussian_classifier_data(
        args.classes, args.test_per_class, args.dim, args.separation, rng
    )
    _write_model_trace(out / "test.nlct", model, test_points, test_labels,
                       args.classes)

    if args.variants:
        for variant in ("times1", "times10"):
            scheme = DatasetScheme(variant, noise_bound=args.noise_bound)
            data = make_variant(test_points, scheme,
                                np.random.default_rng((args.seed or 0) + 7))
            _write_model_trace(out / f"{variant}.nlct", model, data, None, 0)

    side = int(round(args.dim ** 0.5))
    shape = (side, side, 1) if side * side == args.dim else (1, 1, args.dim)
    preds, _ = forward_batch(model, test_points)
    seed_dir = out / "seeds"
    seed_dir.mkdir(exist_ok=True)
    entries = []
    correct = np.flatnonzero(preds == test_labels)[: args.seed_count]
    for i, idx in enumerate(correct):
        fname = f"seed_{i:04d}.bin"
        test_points[idx].astype("<f4").tofile(seed_dir / fname)
        entries.append({"file": fname, "label": int(test_labels[idx])})
    (seed_dir / "seeds.json").write_text(
        json.dumps({"shape": list(shape), "entries": entries}, indent=2) + "\n"
    )
    _emit({
        "out": str(out),
        "model": str(out / "model.json"),
        "train_inputs": len(train_points),
        "test_inputs": len(test_points),
        "seeds": len(entries),
        "variants": bool(args.variants),
    })
    return EXIT_OK


def cmd_inspect(args) -> int:
    path = args.path
    if path.endswith(".nlcs"):
        _emit(state_mod.peek_state(path))
        return EXIT_OK
    with open(path, "rb") as fh:
        header = read_header(fh)
    _emit({
        "magic": "NLCT",
        "layers": [{"name": m.name, "neurons": m.neurons} for m in header.layers],
        "input_count": header.input_count,
        "has_labels": header.has_labels,
        "class_count": header.class_count,
        "record_bytes": header.record_bytes,
    })
    return EXIT_OK


def _add_criterion_flags(p):
    p.add_argument("--criterion", choices=(
        "nlc", "nc", "ncs", "kmnc", "nbc", "snac", "tknc", "tknp", "cc"))
    p.add_argument("--t", type=float, help="threshold for nc/ncs")
    p.add_argument("--k", type=int, help="K for kmnc/tknc/tknp")
    p.add_argument("--cc-t", dest="cc_t", type=float, help="cc distance threshold")
    p.add_argument("--layers", help="comma list of monitored layers (cc)")
    p.add_argument("--class-conditional", dest="class_conditional",
                   action="store_true")
    p.add_argument("--config", help="key=value config file")


def _add_trace_flags(p):
    p.add_argument("trace", help=".nlct trace (or .csv fixture)")
    p.add_argument("--batch-size", dest="batch_size", type=int, default=256)
    p.add_argument("--csv-layers", dest="csv_layers",
                   help="layer spec name:neurons,... for CSV input")
    p.add_argument("--csv-labeled", dest="csv_labeled", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="nlcov",
        description="Covariance-based DNN coverage engine with baseline "
                    "criteria and coverage-guided fuzzing.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit ranges / warm-start a criterion state")
    _add_trace_flags(p)
    _add_criterion_flags(p)
    p.add_argument("--out", required=True, help="output .nlcs state file")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("coverage", help="coverage value (and delta) of a trace")
    _add_trace_flags(p)
    _add_criterion_flags(p)
    p.add_argument("--state", help="warm-start .nlcs state")
    p.add_argument("--out", help="also write the JSON report here")
    p.set_defaults(func=cmd_coverage)

    p = sub.add_parser("fuzz", help="coverage-guided input mutation")
    _add_criterion_flags(p)
    p.add_argument("--model", help="built-in MLP model JSON")
    p.add_argument("--runner", help="external runner command line")
    p.add_argument("--seeds", required=True, help="seed directory (seeds.json)")
    p.add_argument("--out", required=True, help="corpus output directory")
    p.add_argument("--state", help="warm-start criterion state (.nlcs)")
    p.add_argument("--max-iterations", dest="max_iterations", type=int)
    p.add_argument("--num", type=int, help="mutation tries per seed pick")
    p.add_argument("--alpha", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--rel-eps", dest="rel_eps", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--ops", help="comma list of mutation operators")
    p.add_argument("--random-mode", dest="random_mode", action="store_true",
                   help="baseline: accept every valid mutant")
    p.add_argument("--check-rollback", dest="check_rollback", action="store_true")
    p.add_argument("--speculative", action="store_true")
    p.add_argument("--timeout", type=float, default=30.0)
    p.set_defaults(func=cmd_fuzz)

    p = sub.add_parser("bench", help="matrix vs loop accumulation benchmark")
    p.add_argument("--m", type=int, default=256)
    p.add_argument("--batches", type=int, default=2)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=256)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="also write the JSON report here")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("synth", help="generate toy model, traces and seeds")
    p.add_argument("--out", required=True)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--per-class", dest="per_class", type=int, default=250)
    p.add_argument("--test-per-class", dest="test_per_class", type=int, default=250)
    p.add_argument("--dim", type=int, default=16)
    p.add_argument("--separation", type=float, default=8.0)
    p.add_argument("--hidden", type=int, default=32)
    p.add_argument("--epochs", type=int, default=400)
    p.add_argument("--lr", type=float, default=0.5)
    p.add_argument("--target-accuracy", dest="target_accuracy", type=float,
                   default=0.95)
    p.add_argument("--smooth", type=float, default=0.0,
                   help="smoothing front-end self-weight (0 disables)")
    p.add_argument("--seed", type=int)
    p.add_argument("--seed-count", dest="seed_count", type=int, default=50)
    p.add_argument("--variants", action="store_true",
                   help="also emit times1/times10 variant traces")
    p.add_argument("--noise-bound", dest="noise_bound", type=float, default=0.1)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("inspect", help="pretty-print .nlct/.nlcs headers")
    p.add_argument("path")
    p.set_defaults(func=cmd_inspect)

    return parser


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else 0
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error[usage]: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FormatError as exc:
        print(f"error[format]: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except RunnerError as exc:
        print(f"error[runner]: {exc}", file=sys.stderr)
        return EXIT_RUNNER
    except FileNotFoundError as exc:
        print(f"error[usage]: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NlcovError as exc:
        print(f"error[engine]: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
