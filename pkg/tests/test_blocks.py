import numpy as np

from m2d.autodiff import GradTape, Tensor, backward, tsum
from m2d.blocks import (
    encoder_layer,
    init_encoder_layer,
    init_skip_merges,
    long_skip_stack,
    multi_head_attention,
    init_mha,
    sinusoidal_embedding,
    sinusoidal_positions,
)


def test_sinusoidal_positions_shape_and_range():
    pe = sinusoidal_positions(10, 16)
    assert pe.shape == (10, 16)
    assert pe.min() >= -1.0 and pe.max() <= 1.0
    assert not np.allclose(pe[0], pe[5])


def test_sinusoidal_embedding_odd_dim_pads():
    emb = sinusoidal_embedding(np.array([0.0, 3.0]), 7)
    assert emb.shape == (2, 7)
    assert np.all(emb[:, -1] == 0.0)


def test_skip_merges_exist_only_for_second_half():
    params = {}
    init_skip_merges(params, np.random.default_rng(0), "s", 4, 8)
    assert set(params) == {"s.skip2.w", "s.skip3.w"}
    params = {}
    init_skip_merges(params, np.random.default_rng(0), "s", 3, 8)
    assert set(params) == {"s.skip2.w"}


def test_long_skip_stack_wires_mirror_layers():
    rng = np.random.default_rng(1)
    params = {}
    n_layers, dim = 4, 8
    for i in range(n_layers):
        init_encoder_layer(params, rng, f"l{i}", dim, 2, np.float64)
    init_skip_merges(params, rng, "skip", n_layers, dim, np.float64)
    x = Tensor(rng.standard_normal((2, 5, dim)), dtype=np.float64)

    def layer(h, i):
        return encoder_layer(h, params, f"l{i}", heads=2)

    out = long_skip_stack(x, n_layers, layer, params, "skip")
    assert out.shape == (2, 5, dim)
    # perturbing a skip-merge weight must change the output
    base = out.data.copy()
    params["skip.skip3.w"].data[0, 0] += 0.5
    out2 = long_skip_stack(x, n_layers, layer, params, "skip")
    assert not np.allclose(base, out2.data)


def test_masked_mha_ignores_masked_keys():
    rng = np.random.default_rng(2)
    params = {}
    init_mha(params, rng, "attn", 8, np.float64)
    kv = Tensor(rng.standard_normal((1, 6, 8)), dtype=np.float64)
    q = Tensor(rng.standard_normal((1, 3, 8)), dtype=np.float64)
    mask = np.zeros((1, 1, 1, 6))
    mask[..., 4:] = -np.inf
    out_masked = multi_head_attention(q, kv, params, "attn", heads=2, mask=mask)
    # changing a masked key's content must not change the output
    kv2 = kv.data.copy()
    kv2[0, 5] += 10.0
    out_masked2 = multi_head_attention(q, Tensor(kv2, dtype=np.float64), params, "attn", heads=2, mask=mask)
    assert np.allclose(out_masked.data, out_masked2.data, atol=1e-12)


def test_fused_and_composed_mha_agree():
    # mask=None takes the fused kernel; an all-zero mask takes the composed
    # path; the two must agree numerically
    rng = np.random.default_rng(3)
    params = {}
    init_mha(params, rng, "attn", 8, np.float64)
    q = Tensor(rng.standard_normal((2, 4, 8)), dtype=np.float64)
    kv = Tensor(rng.standard_normal((2, 4, 8)), dtype=np.float64)
    fused = multi_head_attention(q, kv, params, "attn", heads=2, mask=None)
    zero_mask = np.zeros((2, 1, 4, 4))
    composed = multi_head_attention(q, kv, params, "attn", heads=2, mask=zero_mask)
    assert np.allclose(fused.data, composed.data, atol=1e-10)


def test_fused_attention_gradients_flow():
    rng = np.random.default_rng(4)
    params = {}
    init_mha(params, rng, "attn", 8, np.float64)
    q = Tensor(rng.standard_normal((1, 4, 8)), requires_grad=True, dtype=np.float64)
    with GradTape() as tape:
        out = multi_head_attention(q, q, params, "attn", heads=2)
        loss = tsum(out)
    grads = backward(loss, tape)
    assert np.any(grads[q].data != 0)
