"""Transformer building blocks shared by the model modules.

Parameters live in flat name->Tensor dicts; ``init_*`` helpers register
them in a deterministic order and the matching forward helpers look them
up by prefix. All blocks are pre-LN.
"""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ShapeError
from .parts import N_KEYPOINTS, PartTable

Params = dict[str, Tensor]


# ---------------------------------------------------------------------------
# parameter registration
# ---------------------------------------------------------------------------


def init_linear(params: Params, rng: np.random.Generator, prefix: str, fan_in: int, fan_out: int,
                dtype=np.float32, bias: bool = True, std: float | None = None) -> None:
    std = 1.0 / math.sqrt(fan_in) if std is None else std
    params[f"{prefix}.w"] = Tensor(rng.normal(0, std, size=(fan_in, fan_out)), requires_grad=True, dtype=dtype)
    if bias:
        params[f"{prefix}.b"] = Tensor(np.zeros(fan_out), requires_grad=True, dtype=dtype)


def init_layer_norm(params: Params, prefix: str, dim: int, dtype=np.float32) -> None:
    params[f"{prefix}.g"] = Tensor(np.ones(dim), requires_grad=True, dtype=dtype)
    params[f"{prefix}.b"] = Tensor(np.zeros(dim), requires_grad=True, dtype=dtype)


def init_ffn(params: Params, rng, prefix: str, dim: int, mult: int, dtype=np.float32) -> None:
    init_linear(params, rng, f"{prefix}.fc1", dim, mult * dim, dtype)
    init_linear(params, rng, f"{prefix}.fc2", mult * dim, dim, dtype)


def init_mha(params: Params, rng, prefix: str, dim: int, dtype=np.float32) -> None:
    for name in ("wq", "wk", "wv", "wo"):
        init_linear(params, rng, f"{prefix}.{name}", dim, dim, dtype, bias=False)


def init_encoder_layer(params: Params, rng, prefix: str, dim: int, mult: int, dtype=np.float32) -> None:
    init_layer_norm(params, f"{prefix}.ln1", dim, dtype)
    init_mha(params, rng, f"{prefix}.attn", dim, dtype)
    init_layer_norm(params, f"{prefix}.ln2", dim, dtype)
    init_ffn(params, rng, f"{prefix}.ffn", dim, mult, dtype)


def init_cross_layer(params: Params, rng, prefix: str, dim: int, mult: int, dtype=np.float32) -> None:
    init_layer_norm(params, f"{prefix}.ln1", dim, dtype)
    init_mha(params, rng, f"{prefix}.attn", dim, dtype)
    init_layer_norm(params, f"{prefix}.ln2", dim, dtype)
    init_ffn(params, rng, f"{prefix}.ffn", dim, mult, dtype)


def init_part_attention(params: Params, rng, prefix: str, table: PartTable, dim: int, mult: int,
                        dtype=np.float32) -> None:
    for name, _, _ in table.ranges:
        for proj in ("wq", "wk", "wv"):
            init_linear(params, rng, f"{prefix}.{name}.{proj}", dim, dim, dtype, bias=False)
    init_ffn(params, rng, f"{prefix}.ffn", dim, mult, dtype)


def init_skip_merges(params: Params, rng, prefix: str, n_layers: int, dim: int, dtype=np.float32) -> None:
    for i in range(n_layers):
        if n_layers - 1 - i < i:
            init_linear(params, rng, f"{prefix}.skip{i}", 2 * dim, dim, dtype, bias=False)


# ---------------------------------------------------------------------------
# forward helpers
# ---------------------------------------------------------------------------


def apply_linear(x, params: Params, prefix: str):
    b = params.get(f"{prefix}.b")
    return ad.linear(x, params[f"{prefix}.w"], b)


def apply_layer_norm(x, params: Params, prefix: str):
    return ad.layer_norm(x, params[f"{prefix}.g"], params[f"{prefix}.b"])


def apply_ffn(x, params: Params, prefix: str):
    return apply_linear(ad.gelu(apply_linear(x, params, f"{prefix}.fc1")), params, f"{prefix}.fc2")


def _split_heads(x, heads: int):
    # (..., T, C) -> (..., heads, T, C/heads)
    *lead, t, c = x.shape
    x = ad.reshape(x, (*lead, t, heads, c // heads))
    return ad.swapaxes(x, -3, -2)


def _merge_heads(x):
    # (..., heads, T, hd) -> (..., T, heads*hd)
    x = ad.swapaxes(x, -3, -2)
    *lead, t, h, hd = x.shape
    return ad.reshape(x, (*lead, t, h * hd))


def multi_head_attention(q_in, kv_in, params: Params, prefix: str, heads: int, mask=None):
    """Standard scaled dot-product attention; ``mask`` is additive {0,-inf}."""
    dim = q_in.shape[-1]
    if dim % heads:
        raise ShapeError(f"model dim {dim} not divisible by {heads} heads")
    q = _split_heads(ad.linear(q_in, params[f"{prefix}.wq.w"]), heads)
    k = _split_heads(ad.linear(kv_in, params[f"{prefix}.wk.w"]), heads)
    v = _split_heads(ad.linear(kv_in, params[f"{prefix}.wv.w"]), heads)
    scale = 1.0 / math.sqrt(dim // heads)
    if mask is None:
        attended, _ = ad.attention(q, k, v, scale)
    else:
        scores = ad.scale(ad.matmul(q, ad.swapaxes(k, -1, -2)), scale)
        weights = ad.masked_softmax(scores, mask)
        attended = ad.matmul(weights, v)
    out = _merge_heads(attended)
    return ad.linear(out, params[f"{prefix}.wo.w"])


def encoder_layer(x, params: Params, prefix: str, heads: int, mask=None):
    h = apply_layer_norm(x, params, f"{prefix}.ln1")
    x = ad.add(x, multi_head_attention(h, h, params, f"{prefix}.attn", heads, mask))
    return ad.add(x, apply_ffn(apply_layer_norm(x, params, f"{prefix}.ln2"), params, f"{prefix}.ffn"))


def cross_layer(x, kv, params: Params, prefix: str, heads: int):
    h = apply_layer_norm(x, params, f"{prefix}.ln1")
    x = ad.add(x, multi_head_attention(h, kv, params, f"{prefix}.attn", heads))
    return ad.add(x, apply_ffn(apply_layer_norm(x, params, f"{prefix}.ln2"), params, f"{prefix}.ffn"))


def long_skip_stack(x, n_layers: int, layer_fn, params: Params, prefix: str):
    """U-Net style pairing: layer i's input merges layer n-1-i's output.

    The merge concatenates along channels and projects back down, so the
    second half of the stack sees its mirror's activations directly.
    """
    saved = []
    for i in range(n_layers):
        j = n_layers - 1 - i
        if j < i:
            x = ad.linear(ad.concat([x, saved[j]], axis=-1), params[f"{prefix}.skip{i}.w"])
        x = layer_fn(x, i)
        saved.append(x)
    return x


def part_aware_attention(tokens, part_table: PartTable, params: Params, prefix: str, heads: int,
                         return_weights: bool = False):
    """Within-part attention over the 133 keypoint tokens of each frame.

    Q/K/V come from each part's own projection of its own tokens; scores
    use the full-channel 1/sqrt(C) scaling and softmax runs inside each
    part block, which is arithmetic-identical to softmaxing the assembled
    133x133 score matrix under the additive {0,-inf} part mask. Cross-part
    weights are therefore exactly zero. The attended tokens then pass
    through the FFN.

    tokens: (..., 133, C). Returns (..., 133, C), plus the assembled
    full attention-weight matrix (..., heads, 133, 133) if requested.
    """
    if tokens.shape[-2] != N_KEYPOINTS:
        raise ShapeError(f"part_aware_attention expects {N_KEYPOINTS} tokens, got {tokens.shape[-2]}")
    dim = tokens.shape[-1]
    if dim % heads:
        raise ShapeError(f"model dim {dim} not divisible by {heads} heads")
    inv_sqrt_c = 1.0 / math.sqrt(dim)  # full-channel scaling, not per-head

    attended = []
    weight_blocks = {}
    for name, lo, hi in part_table.ranges:
        part_tokens = ad.narrow(tokens, tokens.ndim - 2, lo, hi - lo)
        q = _split_heads(ad.linear(part_tokens, params[f"{prefix}.{name}.wq.w"]), heads)
        k = _split_heads(ad.linear(part_tokens, params[f"{prefix}.{name}.wk.w"]), heads)
        v = _split_heads(ad.linear(part_tokens, params[f"{prefix}.{name}.wv.w"]), heads)
        out_part, weights = ad.attention(q, k, v, inv_sqrt_c)
        attended.append(_merge_heads(out_part))
        if return_weights:
            weight_blocks[(lo, hi)] = weights
    out = ad.concat(attended, axis=tokens.ndim - 2)
    out = apply_ffn(out, params, f"{prefix}.ffn")
    if not return_weights:
        return out
    lead = tokens.shape[:-2]
    full = np.zeros((*lead, heads, N_KEYPOINTS, N_KEYPOINTS), dtype=tokens.dtype)
    for (lo, hi), block in weight_blocks.items():
        full[..., lo:hi, lo:hi] = block
    return out, full


# ---------------------------------------------------------------------------
# positional / timestep encodings
# ---------------------------------------------------------------------------


def sinusoidal_embedding(positions: np.ndarray, dim: int, dtype=np.float32) -> np.ndarray:
    """Classic sin/cos features of scalar positions: (n,) -> (n, dim)."""
    positions = np.asarray(positions, dtype=np.float64)
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    args = positions[:, None] * freqs[None, :]
    emb = np.concatenate([np.sin(args), np.cos(args)], axis=-1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros((len(positions), 1))], axis=-1)
    return emb.astype(dtype)


def sinusoidal_positions(n: int, dim: int, dtype=np.float32) -> np.ndarray:
    return sinusoidal_embedding(np.arange(n), dim, dtype)
