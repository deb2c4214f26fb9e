import numpy as np
import pytest

from lesa.attention import (
    AttentionConfig,
    AttentionLayer,
    ablate_unary,
    attention_forward,
    attention_weights,
    decompose_attention,
    qkv_project,
    relative_logits,
)
from lesa.tensor import ShapeError, Tensor

from oracles import attention_bruteforce


def make_layer(rng, d=4, H=3, W=3, heads=2, use_position=True, d_out=None):
    cfg = AttentionConfig(d, d, d_out or d, H, W, heads=heads, use_position=use_position)
    return AttentionLayer(cfg, rng=rng)


def test_config_rejects_indivisible_heads():
    with pytest.raises(ValueError):
        AttentionConfig(4, 6, 4, 2, 2, heads=4)


def test_init_scales(rng):
    layer = AttentionLayer(AttentionConfig(64, 64, 64, 6, 6, heads=4), rng=rng)
    assert layer.w_q.data.std() == pytest.approx(1 / 8, rel=0.05)
    assert layer.r_row.shape == (4, 11, 16)
    assert layer.r_row.data.std() == pytest.approx(1 / 4, rel=0.1)
    assert not layer.r_row.decay and layer.w_q.decay


@pytest.mark.parametrize("use_position", [True, False])
def test_bruteforce_oracle(rng, use_position):
    layer = make_layer(rng, d=4, H=3, W=2, heads=2, use_position=use_position)
    x = rng.standard_normal((4, 3, 2))
    got = attention_forward(x, layer).data
    want = attention_bruteforce(
        x, layer.w_q.data, layer.w_k.data, layer.w_v.data,
        layer.r_row.data if use_position else None, layer.r_col.data if use_position else None,
        heads=2, use_position=use_position,
    )
    np.testing.assert_allclose(got, want, atol=1e-10)


def test_relative_logits_quadruple_loop(rng):
    layer = make_layer(rng, d=4, H=3, W=4, heads=2)
    x = rng.standard_normal((4, 3, 4))
    q, _, _ = qkv_project(x, layer)
    rel = relative_logits(q, layer).data  # heads × HW × HW
    for n in range(2):
        for i in range(3):
            for j in range(4):
                for h in range(3):
                    for w in range(4):
                        r = layer.r_row.data[n, i - h + 2] + layer.r_col.data[n, j - w + 3]
                        want = float(np.dot(q.data[n, :, i, j], r))
                        assert rel[n, i * 4 + j, h * 4 + w] == pytest.approx(want, abs=1e-12)


def test_batched_equals_per_image(rng):
    layer = make_layer(rng)
    x = rng.standard_normal((3, 4, 3, 3))
    batched = attention_forward(x, layer).data
    for b in range(3):
        np.testing.assert_allclose(batched[b], attention_forward(x[b], layer).data, atol=1e-13)


def test_decomposition_identity(rng):
    layer = make_layer(rng, H=4, W=3)
    x = rng.standard_normal((2, 4, 4, 3))
    unary, binary, stats = decompose_attention(x, layer)
    np.testing.assert_allclose(unary.data + binary.data, attention_forward(x, layer).data, atol=1e-12)
    assert stats.unary_weight + stats.binary_weight == pytest.approx(1.0, abs=1e-15)
    assert stats.count == 2 * 2 * 12


def test_single_location_is_all_unary(rng):
    layer = make_layer(rng, H=1, W=1)
    x = rng.standard_normal((4, 1, 1))
    unary, binary, stats = decompose_attention(x, layer)
    assert stats.unary_weight == 1.0
    np.testing.assert_array_equal(binary.data, 0.0)
    np.testing.assert_array_equal(ablate_unary(x, layer).data, 0.0)


def test_renormalized_ablation_single_location_is_an_error(rng):
    layer = make_layer(rng, H=1, W=1)
    with pytest.raises(ValueError):
        ablate_unary(rng.standard_normal((4, 1, 1)), layer, renormalize=True)


def test_drop_ablation_equals_binary_term(rng):
    layer = make_layer(rng)
    x = rng.standard_normal((2, 4, 3, 3))
    unary, binary, _ = decompose_attention(x, layer)
    ablated = ablate_unary(x, layer).data
    np.testing.assert_array_equal(ablated, binary.data)
    np.testing.assert_allclose(ablated, attention_forward(x, layer).data - unary.data, atol=1e-12)


def test_renormalized_ablation_rows_sum_to_one(rng):
    layer = make_layer(rng, H=2, W=2, heads=1, d=2)
    x = rng.standard_normal((2, 2, 2))
    weights, vf = attention_weights(x, layer)
    s = weights.data[0, 0]
    off = s * (1 - np.eye(4))
    off /= off.sum(axis=-1, keepdims=True)
    want = (off @ vf.data[0, 0]).T.reshape(2, 2, 2)
    np.testing.assert_allclose(ablate_unary(x, layer, renormalize=True).data, want, atol=1e-13)


def test_scale_logits_flag(rng):
    cfg = AttentionConfig(4, 4, 4, 2, 2, heads=1, scale_logits=True)
    layer = AttentionLayer(cfg, rng=np.random.default_rng(3))
    plain = AttentionLayer(AttentionConfig(4, 4, 4, 2, 2, heads=1), rng=np.random.default_rng(3))
    x = rng.standard_normal((4, 2, 2))
    assert not np.allclose(attention_forward(x, layer).data, attention_forward(x, plain).data)


def test_grid_mismatch(rng):
    layer = make_layer(rng, H=3, W=3)
    with pytest.raises(ShapeError):
        attention_forward(rng.standard_normal((4, 2, 3)), layer)


def test_recorder_sees_softmax(rng):
    layer = make_layer(rng)
    seen = []
    layer.recorder = lambda lyr, w: seen.append(w)
    attention_forward(Tensor(rng.standard_normal((1, 4, 3, 3))), layer)
    assert seen[0].shape == (1, 2, 9, 9)
    np.testing.assert_allclose(seen[0].sum(axis=-1), 1.0, atol=1e-14)
