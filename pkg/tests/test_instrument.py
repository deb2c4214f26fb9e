import json
import os

import numpy as np
import pytest

from lesa.attention import AttentionLayer, decompose_attention
from lesa.data import generate_dataset
from lesa.instrument import (
    WeightAccumulator,
    collect_layer_stats,
    evaluate_accuracy,
    export_contribution_maps,
    run_unary_ablation,
    run_weight_tracking,
)
from lesa.io import read_tensor
from lesa.lesa import LesaLayer, lesa_components
from lesa.model import BackboneSpec, build_backbone
from lesa.tensor import Tensor, no_grad
from lesa.trainer import OptimConfig, train


def small_spec(op, **kw):
    kw.setdefault("base_channels", 8)
    kw.setdefault("heads", 2)
    kw.setdefault("input_size", 16)
    kw.setdefault("stage_blocks", [1, 1, 2, 1])
    return BackboneSpec.with_ops(op, **kw)


@pytest.fixture(scope="module")
def data():
    d = generate_dataset(num_classes=4, count=160, size=16, seed=3)
    return d.images, d.labels


@pytest.fixture(scope="module")
def trained_sa(data):
    model = build_backbone(small_spec("sa", num_classes=4), seed=0)
    cfg = OptimConfig(total_epochs=3, warmup_epochs=1, batch_size=32, lr_init=0.05)
    train(model, data, None, cfg, seed=0)
    model.eval()
    return model


def test_single_location_sa_is_all_unary(rng):
    model = build_backbone(small_spec("sa", input_size=8, stage_blocks=[1, 1, 1, 1]))
    layers = model.instrumented_layers()
    assert len(layers) == 1 and layers[0][1].config.H == 1
    report = collect_layer_stats(model, rng.standard_normal((3, 3, 8, 8)))
    assert report.per_layer[0].unary_pct == 100.0
    assert report.overall_unary_pct == 100.0


def test_forced_half_gate_gives_two_thirds(rng):
    model = build_backbone(small_spec("lesa"))
    for _, layer in model.instrumented_layers():
        layer.force_omega = 0.5
    report = collect_layer_stats(model, rng.standard_normal((2, 3, 16, 16)))
    assert report.overall_unary_pct == pytest.approx(200 / 3, abs=1e-9)
    assert report.overall_binary_pct == pytest.approx(100 / 3, abs=1e-9)


def test_static_lesa_reports_even_split(rng):
    model = build_backbone(small_spec("lesa_static"))
    report = collect_layer_stats(model, rng.standard_normal((2, 3, 16, 16)))
    assert {r.kind for r in report.per_layer} == {"lesa_static"}
    assert report.overall_unary_pct == pytest.approx(50.0, abs=1e-12)


def test_rows_sum_to_100_and_overall_is_mean(trained_sa, data):
    report = run_weight_tracking(trained_sa, data)
    for r in report.per_layer:
        assert r.unary_pct + r.binary_pct == pytest.approx(100.0, abs=1e-9)
    assert report.overall_unary_pct == pytest.approx(np.mean([r.unary_pct for r in report.per_layer]), abs=1e-12)
    assert report.sample_count == len(data[1])


def test_report_matches_rewalk_of_stored_weights(trained_sa, data):
    """Second pass: store every softmax tensor, aggregate independently."""
    images = data[0][:40]
    stored = {}
    layers = trained_sa.instrumented_layers()
    for name, layer in layers:
        layer.recorder = lambda lyr, w, _n=name: stored.setdefault(_n, []).append(w.copy())
    try:
        with no_grad():
            trained_sa.eval()
            trained_sa(Tensor(images))
    finally:
        for _, layer in layers:
            layer.recorder = None
    report = collect_layer_stats(trained_sa, images)
    for row in report.per_layer:
        w = np.concatenate(stored[row.layer_id])
        hw = w.shape[-1]
        diag = [w[b, n, i, i] for b in range(w.shape[0]) for n in range(w.shape[1]) for i in range(hw)]
        assert row.unary_pct == pytest.approx(100.0 * sum(diag) / len(diag), abs=1e-12)


def test_streaming_equals_one_shot(trained_sa, data):
    one_shot = run_weight_tracking(trained_sa, data, batch_size=len(data[1]))
    streamed = run_weight_tracking(trained_sa, data, batch_size=7)
    for a, b in zip(one_shot.per_layer, streamed.per_layer):
        assert a.unary_pct == pytest.approx(b.unary_pct, abs=1e-12)
    assert one_shot.overall_unary_pct == pytest.approx(streamed.overall_unary_pct, abs=1e-12)


def test_merge_of_halves_equals_whole(trained_sa, data):
    images, labels = data
    half = len(labels) // 2
    acc_a, acc_b, whole = WeightAccumulator(), WeightAccumulator(), WeightAccumulator()
    collect_layer_stats(trained_sa, images[:half], acc_a)
    collect_layer_stats(trained_sa, images[half:], acc_b)
    collect_layer_stats(trained_sa, images, whole)
    merged = acc_a.merge(acc_b).report()
    full = whole.report()
    assert merged.sample_count == full.sample_count
    for a, b in zip(merged.per_layer, full.per_layer):
        assert a.unary_pct == pytest.approx(b.unary_pct, abs=1e-12)


def test_max_batches(trained_sa, data):
    report = run_weight_tracking(trained_sa, data, max_batches=2, batch_size=10)
    assert report.sample_count == 20


def test_report_serialization(trained_sa, data):
    report = run_weight_tracking(trained_sa, data, max_batches=1)
    rows = report.to_csv().strip().splitlines()
    assert rows[0] == "layer_id,kind,unary_pct,binary_pct,count"
    assert len(rows) == len(report.per_layer) + 1
    summary = json.loads(report.to_json())
    assert summary["overall"]["unary_pct"] == report.overall_unary_pct


def test_no_instrumented_layers(rng):
    model = build_backbone(small_spec("conv"))
    with pytest.raises(ValueError):
        collect_layer_stats(model, rng.standard_normal((1, 3, 16, 16)))


def test_empty_dataset(trained_sa):
    with pytest.raises(ValueError):
        run_weight_tracking(trained_sa, (np.zeros((0, 3, 16, 16)), np.zeros(0, dtype=int)))


def test_ablation_needs_sa_layers(data):
    model = build_backbone(small_spec("lesa", num_classes=4))
    with pytest.raises(ValueError):
        run_unary_ablation(model, data)


def test_untrained_ablation_near_chance(data):
    model = build_backbone(small_spec("sa", num_classes=4), seed=5)
    result = run_unary_ablation(model, data)
    n = len(data[1])
    band = 3 * np.sqrt(0.25 * 0.75 / n)  # three binomial standard deviations
    for acc in (result.baseline_accuracy, result.ablated_accuracy):
        assert 0.0 <= acc <= 1.0
        assert abs(acc - 0.25) <= band


def test_single_location_ablation_zeroes_layer_output(rng, data):
    model = build_backbone(small_spec("sa", input_size=8, stage_blocks=[1, 1, 1, 1], num_classes=4))
    (_, layer), = model.instrumented_layers()
    layer.ablation = "drop"
    x = Tensor(rng.standard_normal((2, layer.config.d_in, 1, 1)))
    np.testing.assert_array_equal(layer(x).data, 0.0)


def test_trained_ablation_flags_are_restored(trained_sa, data):
    result = run_unary_ablation(trained_sa, data, renormalize=True)
    assert result.renormalize
    assert all(layer.ablation is None for _, layer in trained_sa.instrumented_layers())
    assert result.baseline_accuracy == evaluate_accuracy(trained_sa, data)


class TestContributionMaps:
    def test_lesa_files(self, tmp_path, rng):
        model = build_backbone(small_spec("lesa"))
        image = rng.standard_normal((3, 16, 16))
        paths = export_contribution_maps(model, image, str(tmp_path))
        layers = dict(model.instrumented_layers())
        assert len(paths) == 3 * len(layers)
        for name, layer in layers.items():
            d, H = layer.config.d_out, layer.config.H
            for kind in ("unary", "binary", "omega"):
                arr = read_tensor(os.path.join(tmp_path, f"{name}.{kind}.lten"))
                assert arr.shape == (d, H, H)
            omega = read_tensor(os.path.join(tmp_path, f"{name}.omega.lten"))
            assert np.all((omega > 0) & (omega < 1))

    def test_sa_sum_reconstructs_output_and_round_trips(self, tmp_path, rng):
        model = build_backbone(small_spec("sa"))
        model.eval()
        image = rng.standard_normal((3, 16, 16))
        export_contribution_maps(model, image, str(tmp_path))
        # capture each SA layer's input and output directly
        captured = {}
        for name, layer in model.instrumented_layers():
            def hook(x, _layer=layer, _name=name):
                out = AttentionLayer.forward(_layer, x)
                captured[_name] = (_layer, x, out)
                return out

            layer.forward = hook
        with no_grad():
            model(Tensor(image[None]))
        for name, (layer, x, out) in captured.items():
            del layer.forward
            u = read_tensor(os.path.join(tmp_path, f"{name}.unary.lten"))
            b = read_tensor(os.path.join(tmp_path, f"{name}.binary.lten"))
            np.testing.assert_allclose(u + b, out.data[0], atol=1e-12)
            with no_grad():
                u2, b2, _ = decompose_attention(x, layer)
            np.testing.assert_array_equal(u, u2.data[0])
            np.testing.assert_array_equal(b, b2.data[0])

    def test_needs_single_image(self, tmp_path, rng):
        model = build_backbone(small_spec("sa"))
        with pytest.raises(ValueError):
            export_contribution_maps(model, rng.standard_normal((2, 3, 16, 16)), str(tmp_path))

    def test_unwritable_path_names_path(self, tmp_path, rng):
        model = build_backbone(small_spec("sa"))
        blocker = tmp_path / "file"
        blocker.write_text("x")
        with pytest.raises(OSError, match="file"):
            export_contribution_maps(model, rng.standard_normal((3, 16, 16)), str(blocker / "sub"))


def test_lesa_components_unchanged_by_recording(rng):
    model = build_backbone(small_spec("lesa"))
    model.eval()
    name, layer = model.instrumented_layers()[0]
    assert isinstance(layer, LesaLayer)
    x = Tensor(rng.standard_normal((2, layer.config.d_in, layer.config.H, layer.config.W)))
    with no_grad():
        m1, b1, w1 = lesa_components(x, layer)
        m2, b2, w2 = lesa_components(x, layer)
    np.testing.assert_array_equal(w1.data, w2.data)
