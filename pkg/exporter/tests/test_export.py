import numpy as np
import pytest
import torch
from torch import nn

from nlcov_exporter.export import export_trace
from nlcov_exporter.hooks import ActivationCapture, ExporterError, HookPlan, HookSpec
from nlcov_exporter.toy import identity_linear, tiny_conv

# the engine is the verification harness for byte compatibility
from nlcov.criteria import ActivationBatch, CovarianceCoverage
from nlcov.trace import read_trace_full


def conv_dataset(n=12, seed=3):
    gen = torch.Generator().manual_seed(seed)
    return [
        (torch.rand((1, 8, 8), generator=gen), int(i % 3)) for i in range(n)
    ]


PLAN = HookPlan([HookSpec("conv", "spatial-mean"), HookSpec("fc")])


class TestHookPlan:
    def test_parse(self):
        plan = HookPlan.parse("conv:spatial-mean, fc")
        assert plan.hooks[0].reduction == "spatial-mean"
        assert plan.hooks[1] == HookSpec("fc", "none")

    def test_unknown_reduction(self):
        with pytest.raises(ExporterError, match="reduction"):
            HookSpec("conv", "max")

    def test_unresolvable_path(self):
        with pytest.raises(ExporterError, match="does not resolve"):
            ActivationCapture(tiny_conv(), HookPlan([HookSpec("missing")]))

    def test_feature_map_requires_spatial_mean(self):
        capture = ActivationCapture(tiny_conv(), HookPlan([HookSpec("conv")]))
        with pytest.raises(ExporterError, match="spatial-mean"):
            capture.run(torch.zeros((1, 8, 8)))

    def test_spatial_mean_rejected_on_flat_output(self):
        capture = ActivationCapture(
            tiny_conv(), HookPlan([HookSpec("fc", "spatial-mean")])
        )
        with pytest.raises(ExporterError, match="2-d"):
            capture.run(torch.zeros((1, 8, 8)))


class TestCapture:
    def test_spatial_mean_of_constant_feature_map(self):
        model = tiny_conv()
        with torch.no_grad():
            model.conv.weight.zero_()
            model.conv.bias.copy_(torch.tensor([0.1, -0.2, 0.3, 0.0]))
        with ActivationCapture(model, PLAN) as capture:
            _, vectors = capture.run(torch.rand((1, 8, 8)))
        np.testing.assert_allclose(vectors[0], [0.1, -0.2, 0.3, 0.0], atol=1e-7)

    def test_shape_change_between_inputs_rejected(self):
        model = nn.Sequential()
        model.add_module("flatten", nn.Flatten())
        model.add_module("head", nn.Identity())
        capture = ActivationCapture(model, HookPlan([HookSpec("flatten")]))
        capture.run(torch.zeros(4))
        with pytest.raises(ExporterError, match="changed between inputs"):
            capture.run(torch.zeros(6))


class TestExport:
    def test_header_matches_plan(self, tmp_path):
        path = tmp_path / "conv.nlct"
        written = export_trace(tiny_conv(), conv_dataset(), PLAN, path,
                               class_count=3)
        assert written == 12
        header, batch = read_trace_full(path)
        assert [m.name for m in header.layers] == ["conv", "fc"]
        assert [m.neurons for m in header.layers] == [4, 3]
        assert header.input_count == 12
        assert header.class_count == 3
        np.testing.assert_array_equal(batch.labels, [i % 3 for i in range(12)])

    def test_identity_model_round_trip(self, tmp_path):
        model = identity_linear(4)
        plan = HookPlan([HookSpec("fc")])
        inputs = [torch.tensor([0.1, 0.2, 0.3, 0.4]) * (i + 1) for i in range(3)]
        path = tmp_path / "id.nlct"
        export_trace(model, inputs, plan, path)
        header, batch = read_trace_full(path)
        assert [m.name for m in header.layers] == ["fc"]
        for i, x in enumerate(inputs):
            np.testing.assert_array_equal(
                batch.layers[0][i], x.numpy().astype(np.float32)
            )

    def test_values_bit_equal_to_in_process_capture(self, tmp_path):
        model = tiny_conv(seed=1)
        data = conv_dataset(n=8, seed=9)
        path = tmp_path / "conv.nlct"
        export_trace(model, data, PLAN, path, class_count=3)
        _, batch = read_trace_full(path)
        with ActivationCapture(model, PLAN) as capture:
            for i, (tensor, _) in enumerate(data):
                _, vectors = capture.run(tensor)
                for li, vec in enumerate(vectors):
                    np.testing.assert_array_equal(
                        batch.layers[li][i], vec.astype(np.float32)
                    )

    def test_engine_coverage_matches_in_process_capture(self, tmp_path):
        model = tiny_conv(seed=2)
        data = conv_dataset(n=20, seed=4)
        path = tmp_path / "conv.nlct"
        export_trace(model, data, PLAN, path, class_count=3)
        header, batch = read_trace_full(path)

        from_file = CovarianceCoverage(header.layers)
        from_file.update(batch)

        rows = {0: [], 1: []}
        with ActivationCapture(model, PLAN) as capture:
            for tensor, _ in data:
                _, vectors = capture.run(tensor)
                rows[0].append(vectors[0])
                rows[1].append(vectors[1])
        in_process = CovarianceCoverage(header.layers)
        in_process.update(ActivationBatch(layers=[np.stack(rows[0]),
                                                  np.stack(rows[1])]))
        assert from_file.value() == pytest.approx(in_process.value(), abs=1e-6)

    def test_empty_dataset_rejected(self, tmp_path):
        with pytest.raises(ExporterError, match="empty"):
            export_trace(tiny_conv(), [], PLAN, tmp_path / "x.nlct")

    def test_missing_label_rejected(self, tmp_path):
        with pytest.raises(ExporterError, match="no label"):
            export_trace(tiny_conv(), [torch.zeros((1, 8, 8))], PLAN,
                         tmp_path / "x.nlct", class_count=3)
