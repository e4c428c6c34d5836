"""Contrastive text-motion retrieval.

Two encoder towers map captions and motion sequences into one
L2-normalized embedding space; training pulls matched pairs onto the
diagonal of the similarity matrix with a symmetric cross-entropy:
0.5 * [CE(M T^T / tau, diag) + CE(T M^T / tau, diag)].

A deterministic hash text encoder (token -> signed random vector,
averaged, normalized) is available wherever a trainable tower is not
needed, e.g. as the conditioning signal for the diffusion stage.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from . import blocks
from .autodiff import GradTape, Tensor, backward
from .blocks import Params, sinusoidal_positions
from .checkpoint import load_sidecar, load_tensors, save_sidecar, save_tensors
from .errors import M2dError, ShapeError
from .motion import Corpus, MotionSequence
from .optim import AdamWState, adamw_step
from .parts import N_KEYPOINTS
from .vae import normalized_frames, pack_batch

_TOKEN_SPLIT = re.compile(r"[^0-9a-z]+")

PAD_ID = 0
UNK_ID = 1


def tokenize(text: str) -> list[str]:
    if not text:
        raise M2dError("cannot embed empty text")
    tokens = [t for t in _TOKEN_SPLIT.split(text.lower()) if t]
    if not tokens:
        raise M2dError(f"text {text!r} has no alphanumeric tokens")
    return tokens


class HashTextEncoder:
    """Deterministic training-free text embedding.

    Each token maps to a signed (+-1) random vector seeded by its sha256
    digest; token vectors are averaged and L2-normalized.
    """

    variant = "hash_deterministic"

    def __init__(self, dim: int = 64):
        self.dim = dim
        self._cache: dict[str, np.ndarray] = {}

    def _token_vector(self, token: str) -> np.ndarray:
        vec = self._cache.get(token)
        if vec is None:
            seed = int.from_bytes(hashlib.sha256(token.encode("utf-8")).digest()[:8], "little")
            rng = np.random.default_rng(seed)
            vec = rng.integers(0, 2, size=self.dim).astype(np.float64) * 2.0 - 1.0
            self._cache[token] = vec
        return vec

    def embed_text(self, text: str) -> np.ndarray:
        tokens = tokenize(text)
        acc = np.zeros(self.dim)
        for tok in tokens:
            acc += self._token_vector(tok)
        norm = np.linalg.norm(acc)
        if norm == 0.0:  # cancelling tokens; fall back to the first token's direction
            acc = self._token_vector(tokens[0]).astype(np.float64)
            norm = np.linalg.norm(acc)
        return acc / norm


def _l2_normalize_graph(x):
    n2 = ad.tsum(ad.square(x), axis=-1, keepdims=True)
    return ad.mul(x, ad.pow_const(ad.add_const(n2, 1e-12), -0.5))


def contrastive_loss(motion_feats, text_feats, temperature: float = 1.0):
    """Symmetric InfoNCE over unit-normalized feature rows; returns a Tensor."""
    m = motion_feats if isinstance(motion_feats, Tensor) else Tensor(motion_feats)
    t = text_feats if isinstance(text_feats, Tensor) else Tensor(text_feats)
    if m.shape != t.shape:
        raise ShapeError(f"feature shapes differ: {m.shape} vs {t.shape}")
    if m.ndim != 2 or m.shape[0] < 1:
        raise ShapeError(f"expected (B, d) features with B >= 1, got {m.shape}")
    B = m.shape[0]
    eye = Tensor(np.eye(B) / B, dtype=m.dtype)
    logits_m = ad.scale(ad.matmul(m, ad.swapaxes(t, -1, -2)), 1.0 / temperature)
    logits_t = ad.scale(ad.matmul(t, ad.swapaxes(m, -1, -2)), 1.0 / temperature)
    ce_m = ad.neg(ad.tsum(ad.mul(ad.log_softmax(logits_m), eye)))
    ce_t = ad.neg(ad.tsum(ad.mul(ad.log_softmax(logits_t), eye)))
    return ad.scale(ad.add(ce_m, ce_t), 0.5)


@dataclass(frozen=True)
class MolipConfig:
    embed_dim: int = 64
    model_dim: int = 64
    text_layers: int = 2
    motion_layers: int = 2
    heads: int = 4
    max_length: int = 96
    max_text_tokens: int = 16
    ffn_mult: int = 2
    temperature: float = 1.0
    learnable_scale: bool = False

    def __post_init__(self):
        for name in ("embed_dim", "model_dim", "text_layers", "motion_layers", "heads",
                     "max_length", "max_text_tokens", "ffn_mult"):
            if getattr(self, name) < 1:
                raise M2dError(f"MolipConfig.{name} must be positive")
        if self.temperature <= 0:
            raise M2dError("temperature must be positive")
        if self.model_dim % self.heads:
            raise M2dError("model_dim must be divisible by heads")


MOLIP_PRESETS: dict[str, MolipConfig] = {
    "desk": MolipConfig(),
    "paper": MolipConfig(embed_dim=256, model_dim=256, max_length=200, ffn_mult=4),
}


class Molip:
    """Trained motion and text towers sharing one retrieval space."""

    variant = "trained_transformer"

    def __init__(self, config: MolipConfig, vocab: list[str], seed: int = 0, dtype=np.float32):
        self.config = config
        self.vocab = list(vocab)
        self.word_to_id = {w: i + 2 for i, w in enumerate(self.vocab)}  # 0 pad, 1 unk
        self.dtype = np.dtype(dtype)
        self.params: Params = {}
        self._build(np.random.default_rng(seed))
        self.text_pos = sinusoidal_positions(config.max_text_tokens, config.model_dim, self.dtype)
        self.motion_pos = sinusoidal_positions(config.max_length, config.model_dim, self.dtype)

    def _build(self, rng: np.random.Generator) -> None:
        cfg, dt, p = self.config, self.dtype, self.params
        C = cfg.model_dim
        p["txt.emb"] = Tensor(rng.normal(0, 0.02, size=(len(self.vocab) + 2, C)), requires_grad=True, dtype=dt)
        for i in range(cfg.text_layers):
            blocks.init_encoder_layer(p, rng, f"txt.l{i}", C, cfg.ffn_mult, dt)
        blocks.init_layer_norm(p, "txt.final_ln", C, dt)
        blocks.init_linear(p, rng, "txt.proj", C, cfg.embed_dim, dt)

        blocks.init_linear(p, rng, "mot.in_proj", N_KEYPOINTS * 3, C, dt)
        for i in range(cfg.motion_layers):
            blocks.init_encoder_layer(p, rng, f"mot.l{i}", C, cfg.ffn_mult, dt)
        blocks.init_layer_norm(p, "mot.final_ln", C, dt)
        blocks.init_linear(p, rng, "mot.proj", C, cfg.embed_dim, dt)
        if cfg.learnable_scale:
            p["logit_scale"] = Tensor(np.zeros(1), requires_grad=True, dtype=dt)

    # ------------------------------------------------------------------
    # persistence
    # ------------------------------------------------------------------

    def save(self, path) -> None:
        payload_dtype = "<f8" if self.dtype == np.float64 else "<f4"
        save_tensors(path, {k: v.data for k, v in self.params.items()}, dtype=payload_dtype)
        save_sidecar(path, {"kind": "molip", "config": asdict(self.config), "vocab": self.vocab})

    @classmethod
    def load(cls, path) -> "Molip":
        side = load_sidecar(path)
        if side.get("kind") != "molip":
            raise M2dError(f"{path}: not a retrieval checkpoint (kind={side.get('kind')!r})")
        model = cls(MolipConfig(**side["config"]), side["vocab"])
        tensors = load_tensors(path)
        if set(tensors) != set(model.params):
            raise M2dError(f"{path}: parameter names do not match the configuration")
        for name, arr in tensors.items():
            model.params[name].data = arr.astype(model.dtype)
        return model

    # ------------------------------------------------------------------
    # graphs
    # ------------------------------------------------------------------

    def _token_ids(self, text: str) -> np.ndarray:
        ids = [self.word_to_id.get(tok, UNK_ID) for tok in tokenize(text)]
        return np.asarray(ids[: self.config.max_text_tokens], dtype=np.intp)

    def text_graph(self, texts: list[str]):
        cfg, p = self.config, self.params
        B = len(texts)
        ids_list = [self._token_ids(t) for t in texts]
        tmax = max(len(ids) for ids in ids_list)
        ids = np.full((B, tmax), PAD_ID, dtype=np.intp)
        key_mask = np.full((B, 1, 1, tmax), -np.inf, dtype=self.dtype)
        pool = np.zeros((B, tmax, 1), dtype=self.dtype)
        for b, row in enumerate(ids_list):
            ids[b, : len(row)] = row
            key_mask[b, :, :, : len(row)] = 0.0
            pool[b, : len(row), 0] = 1.0 / len(row)
        x = ad.embedding(p["txt.emb"], ids)
        x = ad.add(x, Tensor(self.text_pos[:tmax], dtype=self.dtype))
        for i in range(cfg.text_layers):
            x = blocks.encoder_layer(x, p, f"txt.l{i}", cfg.heads, key_mask)
        pooled = ad.tsum(ad.mul(x, Tensor(pool, dtype=self.dtype)), axis=1)
        pooled = blocks.apply_layer_norm(pooled, p, "txt.final_ln")
        return _l2_normalize_graph(blocks.apply_linear(pooled, p, "txt.proj"))

    def motion_graph(self, x: np.ndarray, lengths: np.ndarray):
        cfg, p = self.config, self.params
        B, lmax = x.shape[0], x.shape[1]
        flat = ad.reshape(Tensor(x, dtype=self.dtype), (B, lmax, N_KEYPOINTS * 3))
        h = blocks.apply_linear(flat, p, "mot.in_proj")
        h = ad.add(h, Tensor(self.motion_pos[:lmax], dtype=self.dtype))
        key_mask = np.full((B, 1, 1, lmax), -np.inf, dtype=self.dtype)
        pool = np.zeros((B, lmax, 1), dtype=self.dtype)
        for b, L in enumerate(lengths):
            key_mask[b, :, :, : int(L)] = 0.0
            pool[b, : int(L), 0] = 1.0 / int(L)
        for i in range(cfg.motion_layers):
            h = blocks.encoder_layer(h, p, f"mot.l{i}", cfg.heads, key_mask)
        pooled = ad.tsum(ad.mul(h, Tensor(pool, dtype=self.dtype)), axis=1)
        pooled = blocks.apply_layer_norm(pooled, p, "mot.final_ln")
        return _l2_normalize_graph(blocks.apply_linear(pooled, p, "mot.proj"))

    # ------------------------------------------------------------------
    # single-item API (expects normalized motion)
    # ------------------------------------------------------------------

    def embed_text(self, text: str) -> np.ndarray:
        return self.text_graph([text]).data[0].astype(np.float64)

    def embed_motion(self, seq: MotionSequence) -> np.ndarray:
        if seq.length > self.config.max_length:
            raise M2dError(f"sequence length {seq.length} exceeds max_length {self.config.max_length}")
        coords = seq.frames[:, :, :2]
        if np.abs(coords).max() > 3.0:
            raise M2dError("embed_motion expects a normalized sequence (coords should be near [-1, 1])")
        x, lengths = pack_batch([seq.frames], dtype=self.dtype)
        return self.motion_graph(x, lengths).data[0].astype(np.float64)

    def temperature(self) -> float:
        if self.config.learnable_scale and "logit_scale" in self.params:
            return float(np.exp(-self.params["logit_scale"].data[0]))
        return self.config.temperature


def embed_text(text: str, encoder) -> np.ndarray:
    return encoder.embed_text(text)


def embed_motion(seq: MotionSequence, encoder) -> np.ndarray:
    return encoder.embed_motion(seq)


def build_vocab(corpus: Corpus) -> list[str]:
    words = set()
    for _, captions in corpus:
        for caption in captions:
            words.update(tokenize(caption))
    return sorted(words)


def train_molip(
    corpus: Corpus,
    config: MolipConfig,
    seed: int = 0,
    epochs: int = 30,
    batch_size: int = 32,
    lr: float = 2e-4,
    dtype=np.float32,
    log_fn=None,
) -> tuple[Molip, list[float]]:
    """Joint contrastive training of both towers; deterministic per seed."""
    if len(corpus) < 2:
        raise M2dError("train_molip needs at least 2 text-motion pairs")
    if batch_size < 2:
        raise M2dError("train_molip needs batch_size >= 2 (loss is degenerate otherwise)")
    model = Molip(config, build_vocab(corpus), seed=seed, dtype=dtype)
    data = normalized_frames(corpus, config.max_length)
    captions = [caps for _, caps in corpus]
    rng = np.random.default_rng(seed + 1)
    opt = AdamWState(lr=lr)
    history: list[float] = []
    n = len(data)
    for epoch in range(epochs):
        order = rng.permutation(n)
        total, seen = 0.0, 0
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            if len(idx) < 2:
                continue  # a 1-pair tail batch has a degenerate loss
            x, lengths = pack_batch([data[i] for i in idx], dtype=dtype)
            texts = [captions[i][int(rng.integers(0, len(captions[i])))] for i in idx]
            with GradTape() as tape:
                m_feats = model.motion_graph(x, lengths)
                t_feats = model.text_graph(texts)
                if config.learnable_scale:
                    tau = ad.exp(ad.neg(model.params["logit_scale"]))
                    sim = ad.matmul(m_feats, ad.swapaxes(t_feats, -1, -2))
                    logits_m = ad.mul(sim, ad.pow_const(tau, -1.0))
                    eye = Tensor(np.eye(len(idx)) / len(idx), dtype=m_feats.dtype)
                    ce_m = ad.neg(ad.tsum(ad.mul(ad.log_softmax(logits_m), eye)))
                    ce_t = ad.neg(ad.tsum(ad.mul(ad.log_softmax(ad.swapaxes(logits_m, -1, -2)), eye)))
                    loss = ad.scale(ad.add(ce_m, ce_t), 0.5)
                else:
                    loss = contrastive_loss(m_feats, t_feats, config.temperature)
            grads = backward(loss, tape, model.params.values())
            adamw_step(model.params, {k: grads[v] for k, v in model.params.items()}, opt)
            total += loss.item() * len(idx)
            seen += len(idx)
        history.append(total / seen)
        if log_fn:
            log_fn(epoch, history[-1])
    return model, history
