import json
import math

import jsonschema
import numpy as np
import pytest

from nlcov.criteria import (
    CovarianceCoverage,
    LayerMeta,
    NeuronCoverage,
    TopKPatternCoverage,
)
from nlcov.errors import ConfigError, RunnerError
from nlcov.fuzz import (
    REPORT_SCHEMA,
    FuzzConfig,
    SeedEntry,
    report_metrics,
    run_fuzz,
    write_corpus,
)
from nlcov.mutate import Brightness, Contrast, ValidityParams
from nlcov.runner import MlpLayer, MlpModel, MlpRunner
from nlcov.trace import read_trace_full


def brightness_split_model(dim=16):
    """Hand-built classifier: predicts 1 iff the image mean exceeds 0.5.

    Layer "pool" emits the input mean; "logits" emits +-(mean - 0.5).
    Label depends on a mutation-sensitive feature, so brightness shifts
    across 0.5 are guaranteed fault inputs under the identity oracle.
    """
    pool = MlpLayer("pool", np.full((1, dim), 1.0 / dim), np.zeros(1), "none")
    logits = MlpLayer(
        "logits", np.array([[-1.0], [1.0]]), np.array([0.5, -0.5]), "none"
    )
    return MlpModel(input_dim=dim, layers=[pool, logits])


def constant_model(dim=4):
    """Activations ignore the input entirely."""
    frozen = MlpLayer("frozen", np.zeros((3, dim)), np.array([0.1, 0.2, 0.3]), "none")
    return MlpModel(input_dim=dim, layers=[frozen])


def make_seeds(rng, n=8, shape=(4, 4, 1), lo=0.25, hi=0.45):
    seeds = []
    for i in range(n):
        img = rng.uniform(lo, hi, size=shape)
        seeds.append(SeedEntry(image=img, expected_label=0, seed_id=f"seed_{i:03d}"))
    return seeds


def nlc_for(runner):
    return CovarianceCoverage(runner.layers)


class TestReportMetrics:
    def test_single_class_zero_entropy(self):
        n, h = report_metrics([3, 3, 3, 3], class_count=10)
        assert (n, h) == (1, 0.0)

    def test_uniform_faults_max_entropy(self):
        n, h = report_metrics([0, 1, 2, 3], class_count=4)
        assert n == 4
        assert h == pytest.approx(1.0, abs=1e-12)

    def test_three_quarters_split(self):
        labels = [0] * 75 + [1] * 25
        n, h = report_metrics(labels, class_count=2)
        expected = -(0.75 * math.log(0.75) + 0.25 * math.log(0.25)) / math.log(2)
        assert n == 2
        assert h == pytest.approx(expected, abs=1e-12)
        assert h == pytest.approx(0.8113, abs=1e-4)

    def test_no_faults(self):
        assert report_metrics([], class_count=5) == (0, 0.0)

    def test_one_class_universe(self):
        assert report_metrics([0, 0], class_count=1) == (1, 0.0)

    def test_invalid_class_count(self):
        with pytest.raises(ConfigError):
            report_metrics([0], class_count=0)


class TestFuzzLoop:
    def test_constant_model_accepts_nothing(self):
        runner = MlpRunner(constant_model(), input_shape=(2, 2, 1))
        rng = np.random.default_rng(0)
        seeds = make_seeds(rng, shape=(2, 2, 1))
        cfg = FuzzConfig(max_iterations=50, num=5, seed=1, oracle=False)
        result = run_fuzz(cfg, runner, nlc_for(runner), seeds)
        assert result.report.accepted == 0
        # merging identical points leaves only float dust in the covariance
        assert abs(result.report.coverage_final) < 1e-30

    def test_random_mode_accepts_first_valid_candidate_each_iteration(self):
        runner = MlpRunner(brightness_split_model(), input_shape=(4, 4, 1))
        rng = np.random.default_rng(5)
        seeds = make_seeds(rng)
        cfg = FuzzConfig(
            max_iterations=30, num=5, seed=2, random_mode=True,
            ops=[Brightness()],  # |delta| <= 0.15 < beta keeps every mutant valid
        )
        result = run_fuzz(cfg, runner, nlc_for(runner), seeds)
        assert result.report.accepted == 30
        assert result.report.evaluated == 30

    def test_guided_run_finds_planted_faults(self):
        runner = MlpRunner(brightness_split_model(), input_shape=(4, 4, 1))
        rng = np.random.default_rng(7)
        seeds = make_seeds(rng, lo=0.38, hi=0.47)  # close to the 0.5 boundary
        cfg = FuzzConfig(max_iterations=200, num=10, seed=3, ops=[Brightness()])
        result = run_fuzz(cfg, runner, nlc_for(runner), seeds)
        assert result.report.faults >= 1
        assert result.report.accepted >= 1
        assert all(f.predicted == 1 for f in result.fault_records)

    def test_deterministic_given_seed(self):
        runner = MlpRunner(brightness_split_model(), input_shape=(4, 4, 1))

        def once():
            rng = np.random.default_rng(11)
            seeds = make_seeds(rng)
            cfg = FuzzConfig(max_iterations=40, num=6, seed=9,
                             ops=[Brightness(), Contrast()])
            return run_fuzz(cfg, runner, nlc_for(runner), seeds)

        a, b = once(), once()
        assert a.report.to_dict() == b.report.to_dict()
        assert len(a.accepted) == len(b.accepted)
        for ra, rb in zip(a.accepted, b.accepted):
            np.testing.assert_array_equal(ra.entry.image, rb.entry.image)
            assert ra.entry.op_chain == rb.entry.op_chain

    def test_rollback_soundness_checks_run(self):
        runner = MlpRunner(brightness_split_model(), input_shape=(4, 4, 1))
        rng = np.random.default_rng(3)
        seeds = make_seeds(rng)
        cfg = FuzzConfig(max_iterations=40, num=6, seed=4, check_rollback=True,
                         ops=[Brightness()])
        result = run_fuzz(cfg, runner, nlc_for(runner), seeds)
        assert result.report.rollback_checks > 0

    def test_monotone_criterion_trajectory_never_decreases(self):
        runner = MlpRunner(brightness_split_model(), input_shape=(4, 4, 1))
        rng = np.random.default_rng(8)
        seeds = make_seeds(rng)
        crit = NeuronCoverage(runner.layers, threshold=0.45)
        cfg = FuzzConfig(max_iterations=60, num=8, seed=5, ops=[Brightness()])
        result = run_fuzz(cfg, runner, crit, seeds)
        values = [v for _, v in result.report.trajectory]
        assert values == sorted(values)

    def test_speculative_equals_sequential(self):
        runner = MlpRunner(brightness_split_model(), input_shape=(4, 4, 1))

        def run(speculative):
            rng = np.random.default_rng(21)
            seeds = make_seeds(rng)
            crit = TopKPatternCoverage(runner.layers, k=1)
            cfg = FuzzConfig(max_iterations=50, num=8, seed=13,
                             speculative=speculative,
                             ops=[Brightness(), Contrast()])
            return run_fuzz(cfg, runner, crit, seeds)

        seq = run(False)
        spec = run(True)
        assert seq.report.to_dict() == spec.report.to_dict()
        assert len(seq.accepted) == len(spec.accepted)
        for ra, rb in zip(seq.accepted, spec.accepted):
            np.testing.assert_array_equal(ra.entry.image, rb.entry.image)

    def test_empty_seed_set_rejected(self):
        runner = MlpRunner(brightness_split_model(), input_shape=(4, 4, 1))
        with pytest.raises(ConfigError, match="seed set"):
            run_fuzz(FuzzConfig(max_iterations=1), runner, nlc_for(runner), [])

    def test_layer_mismatch_rejected(self):
        runner = MlpRunner(brightness_split_model(), input_shape=(4, 4, 1))
        crit = CovarianceCoverage([LayerMeta("x", 5)])
        seeds = make_seeds(np.random.default_rng(0))
        with pytest.raises(ConfigError, match="do not match"):
            run_fuzz(FuzzConfig(max_iterations=1), runner, crit, seeds)

    def test_runner_failure_yields_partial_report(self):
        class FlakyRunner(MlpRunner):
            calls = 0

            def run(self, image):
                FlakyRunner.calls += 1
                if FlakyRunner.calls > 12:
                    raise RunnerError("child exploded")
                return super().run(image)

        runner = FlakyRunner(brightness_split_model(), input_shape=(4, 4, 1))
        rng = np.random.default_rng(2)
        seeds = make_seeds(rng)
        cfg = FuzzConfig(max_iterations=100, num=4, seed=6, ops=[Brightness()])
        result = run_fuzz(cfg, runner, nlc_for(runner), seeds)
        assert result.report.incomplete
        assert "child exploded" in result.report.error
        assert result.report.iterations < 100

    def test_faults_recorded_even_when_rejected(self):
        # constant activations never increase coverage, yet a mispredicting
        # model must still produce fault findings
        dim = 4
        frozen = MlpLayer("frozen", np.zeros((2, dim)), np.array([0.0, 1.0]), "none")
        model = MlpModel(input_dim=dim, layers=[frozen])  # always predicts 1
        runner = MlpRunner(model, input_shape=(2, 2, 1))
        seeds = [
            SeedEntry(
                image=np.full((2, 2, 1), 0.5), expected_label=0, seed_id="s0"
            )
        ]
        cfg = FuzzConfig(max_iterations=10, num=3, seed=0, ops=[Brightness()])
        result = run_fuzz(cfg, runner, nlc_for(runner), seeds)
        assert result.report.accepted == 0
        assert result.report.faults == result.report.evaluated > 0


class TestCorpusOutput:
    def test_write_corpus_and_schema(self, tmp_path):
        runner = MlpRunner(brightness_split_model(), input_shape=(4, 4, 1))
        rng = np.random.default_rng(15)
        seeds = make_seeds(rng)
        cfg = FuzzConfig(max_iterations=60, num=8, seed=7,
                         ops=[Brightness(), Contrast()])
        result = run_fuzz(cfg, runner, nlc_for(runner), seeds)
        assert result.report.accepted > 0

        out = tmp_path / "corpus"
        write_corpus(out, result)

        report = json.loads((out / "report.json").read_text())
        jsonschema.validate(report, REPORT_SCHEMA)

        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["shape"] == [4, 4, 1]
        assert len(manifest["entries"]) == result.report.accepted
        first = manifest["entries"][0]
        raw = np.fromfile(out / "inputs" / first["file"], dtype="<f4")
        assert raw.shape[0] == 16
        assert first["ops"], "provenance chain must not be empty"

        header, batch = read_trace_full(out / "corpus.nlct")
        assert header.input_count == result.report.accepted
        assert [m.name for m in header.layers] == ["pool", "logits"]

    def test_replayed_corpus_entries_reproduce_activations(self, tmp_path):
        runner = MlpRunner(brightness_split_model(), input_shape=(4, 4, 1))
        rng = np.random.default_rng(19)
        seeds = make_seeds(rng)
        cfg = FuzzConfig(max_iterations=40, num=8, seed=17, ops=[Brightness()])
        result = run_fuzz(cfg, runner, nlc_for(runner), seeds)
        assert result.accepted
        for rec in result.accepted[:5]:
            replay = runner.run(rec.entry.image)
            for got, want in zip(replay.activations, rec.activations):
                np.testing.assert_array_equal(got, want)
