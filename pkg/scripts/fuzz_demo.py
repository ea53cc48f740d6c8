#!/usr/bin/env python3
"""End-to-end fuzzing demo against a brittle brightness classifier.

Builds a 2-class model whose label is the image's mean brightness, seeds
the fuzzer with near-boundary inputs, and compares covariance-guided
mutation against the random baseline.

Usage: python scripts/fuzz_demo.py [--iterations 2000] [--out DIR]
"""

import argparse
import json

import numpy as np

from nlcov.criteria import CovarianceCoverage
from nlcov.fuzz import FuzzConfig, SeedEntry, run_fuzz, write_corpus
from nlcov.mutate import Brightness, Contrast
from nlcov.runner import MlpRunner, forward_batch
from nlcov.synth import train_toy_mlp


def build_fixture(seed=321):
    rng = np.random.default_rng(seed)
    dim, n_per = 16, 100
    low = np.clip(0.35 + 0.04 * rng.normal(size=(n_per, dim)), 0, 1)
    high = np.clip(0.65 + 0.04 * rng.normal(size=(n_per, dim)), 0, 1)
    points = np.vstack([low, high])
    labels = np.repeat([0, 1], n_per)
    model = train_toy_mlp((points, labels), epochs=2000, lr=1.0, hidden=16,
                          seed=5, target_accuracy=1.0)
    order = np.argsort(-low.mean(axis=1))[:10]
    seeds = [
        SeedEntry(image=low[i].reshape(4, 4, 1), expected_label=0,
                  seed_id=f"seed_{i:03d}")
        for i in order
    ]
    return model, seeds


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--iterations", type=int, default=2000)
    parser.add_argument("--seed", type=int, default=11)
    parser.add_argument("--out", help="write the guided run's corpus here")
    args = parser.parse_args()

    model, seeds = build_fixture()
    runner = MlpRunner(model, input_shape=(4, 4, 1))
    ops = [Brightness(), Contrast()]

    for label, random_mode in (("guided", False), ("random baseline", True)):
        crit = CovarianceCoverage(runner.layers)
        cfg = FuzzConfig(max_iterations=args.iterations, num=50, seed=args.seed,
                         random_mode=random_mode, ops=ops)
        result = run_fuzz(cfg, runner, crit, seeds)
        r = result.report
        print(f"{label}: {r.faults} faults / {r.evaluated} evaluated "
              f"({100 * r.fault_rate:.1f}%), {r.accepted} accepted, "
              f"{r.classes_covered} classes, entropy {r.entropy:.3f}, "
              f"coverage {r.coverage_initial:.4f} -> {r.coverage_final:.4f}")
        if args.out and not random_mode:
            write_corpus(args.out, result)
            print(f"corpus written to {args.out}")
            print(json.dumps(r.to_dict(), indent=2)[:400] + " ...")


if __name__ == "__main__":
    main()
