"""Part-aware variational auto-encoder over 2D whole-body motion.

Encoder: per-frame part-aware spatial attention over the 133 keypoint
tokens (confidence fed as a third input channel), a linear merge of each
frame into one token, then a temporal transformer with long skip
connections over [2n learnable distribution tokens | frame tokens]. The
first n distribution-token outputs parameterize the latent mean, the
last n the log-variance, giving an n x d latent.

Decoder: L zero-initialized queries carrying sinusoidal positions
cross-attend to the latent tokens through skip-connected layers; the
output head emits (x, y, conf) per keypoint with the confidence squashed
to [0, 1].

Training objective: masked reconstruction MSE over all three channels,
closed-form KL against the unit Gaussian (normalized by n*d), and an MSE
velocity term over coordinate first-differences.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from . import blocks
from .autodiff import GradTape, Tensor, backward
from .blocks import Params, sinusoidal_positions
from .checkpoint import load_sidecar, load_tensors, save_sidecar, save_tensors
from .errors import M2dError, ShapeError
from .motion import Corpus, MotionSequence, frame_velocity, normalize_sequence
from .optim import AdamWState, adamw_step
from .parts import N_KEYPOINTS, PartTable


@dataclass(frozen=True)
class PaVaeConfig:
    spatial_layers: int = 2
    n_parts: int = 4
    temporal_layers: int = 4
    model_dim: int = 64
    latent_tokens: int = 2
    latent_dim: int = 64
    heads: int = 4
    max_length: int = 96
    ffn_mult: int = 2
    lambda_recon: float = 1.0
    lambda_kl: float = 1e-4
    lambda_vel: float = 0.5

    def __post_init__(self):
        for name in ("spatial_layers", "temporal_layers", "model_dim", "latent_tokens",
                     "latent_dim", "heads", "max_length", "ffn_mult"):
            if getattr(self, name) < 1:
                raise M2dError(f"PaVaeConfig.{name} must be positive")
        if self.n_parts not in (2, 3, 4):
            raise M2dError(f"n_parts must be 2, 3 or 4, got {self.n_parts}")
        if self.model_dim % self.heads:
            raise M2dError("model_dim must be divisible by heads")


VAE_PRESETS: dict[str, PaVaeConfig] = {
    "desk": PaVaeConfig(),
    "paper": PaVaeConfig(
        spatial_layers=2, n_parts=4, temporal_layers=9, model_dim=256,
        latent_tokens=8, latent_dim=256, heads=4, max_length=200, ffn_mult=4,
    ),
}


@dataclass
class LatentDistribution:
    """Gaussian over the n x d latent tokens; deviation kept as log-variance."""

    mu: np.ndarray
    log_var: np.ndarray

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64)
        self.log_var = np.asarray(self.log_var, dtype=np.float64)
        if self.mu.shape != self.log_var.shape:
            raise ShapeError(f"mu {self.mu.shape} and log_var {self.log_var.shape} differ")
        if not (np.all(np.isfinite(self.mu)) and np.all(np.isfinite(self.log_var))):
            raise M2dError("latent distribution has non-finite entries")

    @property
    def sigma(self) -> np.ndarray:
        return np.exp(0.5 * self.log_var)


@dataclass
class MotionLatent:
    x_z: np.ndarray

    def __post_init__(self):
        self.x_z = np.asarray(self.x_z, dtype=np.float64)
        if not np.all(np.isfinite(self.x_z)):
            raise M2dError("motion latent has non-finite entries")


def reparameterize(dist: LatentDistribution, rng: np.random.Generator) -> MotionLatent:
    eps = rng.standard_normal(dist.mu.shape)
    return MotionLatent(dist.mu + dist.sigma * eps)


@dataclass(frozen=True)
class VaeLossBreakdown:
    recon: float
    kl: float
    velocity: float
    total: float


def kl_unit_gaussian(mu: np.ndarray, log_var: np.ndarray) -> float:
    """Closed-form KL(N(mu, sigma^2) || N(0, I)) summed, normalized by n*d."""
    return float(0.5 * np.sum(mu**2 + np.exp(log_var) - 1.0 - log_var) / mu.size)


def vae_loss(recon: MotionSequence, target: MotionSequence, dist: LatentDistribution,
             config: PaVaeConfig) -> VaeLossBreakdown:
    if recon.frames.shape != target.frames.shape:
        raise ShapeError(f"recon {recon.frames.shape} vs target {target.frames.shape}")
    recon_mse = float(np.mean((recon.frames - target.frames) ** 2))
    kl = kl_unit_gaussian(dist.mu, dist.log_var)
    if recon.length >= 2:
        velocity = float(np.mean((frame_velocity(recon) - frame_velocity(target)) ** 2))
    else:
        velocity = 0.0
    total = config.lambda_recon * recon_mse + config.lambda_kl * kl + config.lambda_vel * velocity
    return VaeLossBreakdown(recon_mse, kl, velocity, total)


class PaVae:
    def __init__(self, config: PaVaeConfig, seed: int = 0, dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype)
        self.table = PartTable.with_n_parts(config.n_parts)
        self.params: Params = {}
        self._build(np.random.default_rng(seed))
        self.pos = sinusoidal_positions(config.max_length, config.model_dim, self.dtype)

    # ------------------------------------------------------------------
    # construction / persistence
    # ------------------------------------------------------------------

    def _build(self, rng: np.random.Generator) -> None:
        cfg, dt, p = self.config, self.dtype, self.params
        C = cfg.model_dim
        blocks.init_linear(p, rng, "enc.in_proj", 3, C, dt)
        p["enc.kp_emb"] = Tensor(rng.normal(0, 0.02, size=(N_KEYPOINTS, C)), requires_grad=True, dtype=dt)
        for i in range(cfg.spatial_layers):
            blocks.init_layer_norm(p, f"enc.sp{i}.ln", C, dt)
            blocks.init_part_attention(p, rng, f"enc.sp{i}.paa", self.table, C, cfg.ffn_mult, dt)
        blocks.init_layer_norm(p, "enc.sp_ln", C, dt)
        blocks.init_linear(p, rng, "enc.frame_merge", N_KEYPOINTS * C, C, dt)
        p["enc.dist_tokens"] = Tensor(
            rng.normal(0, 0.02, size=(2 * cfg.latent_tokens, C)), requires_grad=True, dtype=dt
        )
        for i in range(cfg.temporal_layers):
            blocks.init_encoder_layer(p, rng, f"enc.tmp{i}", C, cfg.ffn_mult, dt)
        blocks.init_skip_merges(p, rng, "enc.tskip", cfg.temporal_layers, C, dt)
        blocks.init_layer_norm(p, "enc.final_ln", C, dt)
        blocks.init_linear(p, rng, "enc.mu_head", C, cfg.latent_dim, dt)
        blocks.init_linear(p, rng, "enc.lv_head", C, cfg.latent_dim, dt)
        # start near-deterministic (sigma ~ 0.05) so reconstruction is not
        # drowned in reparameterization noise early in training
        p["enc.lv_head.b"].data = np.full(cfg.latent_dim, -6.0, dtype=dt)

        blocks.init_linear(p, rng, "dec.latent_proj", cfg.latent_dim, C, dt)
        for i in range(cfg.temporal_layers):
            blocks.init_cross_layer(p, rng, f"dec.l{i}", C, cfg.ffn_mult, dt)
        blocks.init_skip_merges(p, rng, "dec.skip", cfg.temporal_layers, C, dt)
        blocks.init_layer_norm(p, "dec.final_ln", C, dt)
        blocks.init_linear(p, rng, "dec.out_head", C, N_KEYPOINTS * 3, dt)

    def save(self, path) -> None:
        payload_dtype = "<f8" if self.dtype == np.float64 else "<f4"
        save_tensors(path, {k: v.data for k, v in self.params.items()}, dtype=payload_dtype)
        save_sidecar(path, {"kind": "pa_vae", "config": asdict(self.config)})

    @classmethod
    def load(cls, path) -> "PaVae":
        side = load_sidecar(path)
        if side.get("kind") != "pa_vae":
            raise M2dError(f"{path}: not a motion VAE checkpoint (kind={side.get('kind')!r})")
        model = cls(PaVaeConfig(**side["config"]))
        tensors = load_tensors(path)
        if set(tensors) != set(model.params):
            raise M2dError(f"{path}: parameter names do not match the configuration")
        for name, arr in tensors.items():
            if model.params[name].shape != arr.shape:
                raise ShapeError(f"{path}: {name} has shape {arr.shape}, expected {model.params[name].shape}")
            model.params[name].data = arr.astype(model.dtype)
        return model

    # ------------------------------------------------------------------
    # graph builders (batched, padding-masked)
    # ------------------------------------------------------------------

    def _encode_graph(self, x: np.ndarray, lengths: np.ndarray):
        cfg, p = self.config, self.params
        B, lmax = x.shape[0], x.shape[1]
        C, n = cfg.model_dim, cfg.latent_tokens
        lengths = [int(L) for L in lengths]

        # the spatial stage only sees real frames; padded slots are
        # re-inserted as zeros right before the temporal stage
        packed = np.concatenate([x[b, :L] for b, L in enumerate(lengths)])
        tokens = Tensor(packed, dtype=self.dtype)
        tokens = ad.add(blocks.apply_linear(tokens, p, "enc.in_proj"), p["enc.kp_emb"])
        for i in range(cfg.spatial_layers):
            h = blocks.apply_layer_norm(tokens, p, f"enc.sp{i}.ln")
            tokens = ad.add(tokens, blocks.part_aware_attention(h, self.table, p, f"enc.sp{i}.paa", cfg.heads))
        tokens = blocks.apply_layer_norm(tokens, p, "enc.sp_ln")

        merged = ad.reshape(tokens, (sum(lengths), N_KEYPOINTS * C))
        merged = blocks.apply_linear(merged, p, "enc.frame_merge")
        if all(L == lmax for L in lengths):
            frames = ad.reshape(merged, (B, lmax, C))
        else:
            rows, offset = [], 0
            for L in lengths:
                chunk = ad.narrow(merged, 0, offset, L)
                if L < lmax:
                    pad = Tensor(np.zeros((lmax - L, C), dtype=self.dtype), dtype=self.dtype)
                    chunk = ad.concat([chunk, pad], axis=0)
                rows.append(ad.reshape(chunk, (1, lmax, C)))
                offset += L
            frames = ad.concat(rows, axis=0)
        frames = ad.add(frames, Tensor(self.pos[:lmax], dtype=self.dtype))

        dist_tokens = ad.broadcast_to(p["enc.dist_tokens"], (B, 2 * n, C))
        seq = ad.concat([dist_tokens, frames], axis=1)

        key_mask = np.zeros((B, 1, 1, 2 * n + lmax), dtype=self.dtype)
        for b, L in enumerate(lengths):
            key_mask[b, :, :, 2 * n + int(L):] = -np.inf

        def layer(h, i):
            return blocks.encoder_layer(h, p, f"enc.tmp{i}", cfg.heads, key_mask)

        seq = blocks.long_skip_stack(seq, cfg.temporal_layers, layer, p, "enc.tskip")
        seq = blocks.apply_layer_norm(seq, p, "enc.final_ln")
        mu = blocks.apply_linear(ad.narrow(seq, 1, 0, n), p, "enc.mu_head")
        log_var = blocks.apply_linear(ad.narrow(seq, 1, n, n), p, "enc.lv_head")
        return mu, log_var

    def _decode_graph(self, z, length: int):
        cfg, p = self.config, self.params
        B = z.shape[0]
        kv = blocks.apply_linear(z, p, "dec.latent_proj")
        queries = Tensor(np.broadcast_to(self.pos[:length], (B, length, cfg.model_dim)).copy(), dtype=self.dtype)

        def layer(h, i):
            return blocks.cross_layer(h, kv, p, f"dec.l{i}", cfg.heads)

        h = blocks.long_skip_stack(queries, cfg.temporal_layers, layer, p, "dec.skip")
        h = blocks.apply_layer_norm(h, p, "dec.final_ln")
        out = blocks.apply_linear(h, p, "dec.out_head")
        out = ad.reshape(out, (B, length, N_KEYPOINTS, 3))
        coords = ad.narrow(out, 3, 0, 2)
        conf = ad.sigmoid(ad.narrow(out, 3, 2, 1))
        return ad.concat([coords, conf], axis=3)

    # ------------------------------------------------------------------
    # public single-sequence API (expects normalized input)
    # ------------------------------------------------------------------

    def _check_length(self, L: int) -> None:
        if L < 1:
            raise M2dError("sequence length must be >= 1")
        if L > self.config.max_length:
            raise M2dError(f"sequence length {L} exceeds max_length {self.config.max_length}")

    def encode(self, seq: MotionSequence) -> LatentDistribution:
        self._check_length(seq.length)
        x = seq.frames[None].astype(self.dtype)
        mu, log_var = self._encode_graph(x, np.array([seq.length]))
        return LatentDistribution(mu.data[0], log_var.data[0])

    def decode(self, latent: MotionLatent, length: int, fps: float = 30.0) -> MotionSequence:
        self._check_length(length)
        if latent.x_z.shape != (self.config.latent_tokens, self.config.latent_dim):
            raise ShapeError(
                f"latent shape {latent.x_z.shape} != "
                f"({self.config.latent_tokens}, {self.config.latent_dim})"
            )
        z = Tensor(latent.x_z[None].astype(self.dtype), dtype=self.dtype)
        recon = self._decode_graph(z, length)
        frames = recon.data[0].astype(np.float64)
        # squashed conf can sit exactly on the [0,1] boundary; clip fp fuzz
        frames[:, :, 2] = np.clip(frames[:, :, 2], 0.0, 1.0)
        return MotionSequence(frames, fps=fps)

    # ------------------------------------------------------------------
    # training
    # ------------------------------------------------------------------

    def loss_graph(self, x: np.ndarray, lengths: np.ndarray, eps: np.ndarray):
        """Batched total-loss graph; returns (total, parts dict of Tensors)."""
        cfg = self.config
        B, lmax = x.shape[0], x.shape[1]
        mu, log_var = self._encode_graph(x, lengths)
        sigma = ad.exp(ad.scale(log_var, 0.5))
        z = ad.add(mu, ad.mul(sigma, Tensor(eps, dtype=self.dtype)))
        recon = self._decode_graph(z, lmax)

        frame_mask = np.zeros((B, lmax, 1, 1), dtype=self.dtype)
        for b, L in enumerate(lengths):
            frame_mask[b, : int(L)] = 1.0
        n_valid = float(frame_mask.sum()) * N_KEYPOINTS * 3

        target = Tensor(x, dtype=self.dtype)
        sq = ad.square(ad.sub(recon, target))
        recon_loss = ad.scale(ad.tsum(ad.mul(sq, Tensor(frame_mask, dtype=self.dtype))), 1.0 / n_valid)

        kl_elem = ad.sub(ad.sub(ad.add(ad.square(mu), ad.exp(log_var)), Tensor(np.asarray(1.0), dtype=self.dtype)), log_var)
        kl = ad.scale(ad.tsum(kl_elem), 0.5 / (B * cfg.latent_tokens * cfg.latent_dim))

        coords = ad.narrow(recon, 3, 0, 2)
        v_rec = ad.sub(ad.narrow(coords, 1, 1, lmax - 1), ad.narrow(coords, 1, 0, lmax - 1))
        v_tgt = np.diff(x[..., :2], axis=1)
        v_mask = np.zeros((B, lmax - 1, 1, 1), dtype=self.dtype)
        for b, L in enumerate(lengths):
            v_mask[b, : max(0, int(L) - 1)] = 1.0
        v_count = max(1.0, float(v_mask.sum()) * N_KEYPOINTS * 2)
        v_sq = ad.square(ad.sub(v_rec, Tensor(v_tgt, dtype=self.dtype)))
        velocity = ad.scale(ad.tsum(ad.mul(v_sq, Tensor(v_mask, dtype=self.dtype))), 1.0 / v_count)

        total = ad.add(
            ad.add(ad.scale(recon_loss, cfg.lambda_recon), ad.scale(kl, cfg.lambda_kl)),
            ad.scale(velocity, cfg.lambda_vel),
        )
        return total, {"recon": recon_loss, "kl": kl, "velocity": velocity}


def pack_batch(frames_list: list[np.ndarray], dtype=np.float32) -> tuple[np.ndarray, np.ndarray]:
    """Zero-pad variable-length (L,133,3) arrays into one (B,Lmax,133,3)."""
    lengths = np.array([f.shape[0] for f in frames_list])
    lmax = int(lengths.max())
    x = np.zeros((len(frames_list), lmax, N_KEYPOINTS, 3), dtype=dtype)
    for i, f in enumerate(frames_list):
        x[i, : f.shape[0]] = f
    return x, lengths


def normalized_frames(corpus: Corpus, max_length: int) -> list[np.ndarray]:
    out = []
    for seq, _ in corpus:
        if seq.length > max_length:
            raise M2dError(
                f"{seq.source_id or 'sequence'}: length {seq.length} exceeds max_length {max_length}"
            )
        norm, _ = normalize_sequence(seq)
        out.append(norm.frames)
    return out


def train_vae(
    corpus: Corpus,
    config: PaVaeConfig,
    seed: int = 0,
    epochs: int = 30,
    batch_size: int = 8,
    lr: float = 2e-4,
    dtype=np.float32,
    log_fn=None,
) -> tuple[PaVae, list[VaeLossBreakdown]]:
    """AdamW over the total loss; deterministic per seed."""
    if len(corpus) == 0:
        raise M2dError("train_vae: empty corpus")
    model = PaVae(config, seed=seed, dtype=dtype)
    data = normalized_frames(corpus, config.max_length)
    rng = np.random.default_rng(seed + 1)
    opt = AdamWState(lr=lr)
    history: list[VaeLossBreakdown] = []
    n = len(data)
    for epoch in range(epochs):
        order = rng.permutation(n)
        sums = {"recon": 0.0, "kl": 0.0, "velocity": 0.0, "total": 0.0}
        seen = 0
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            x, lengths = pack_batch([data[i] for i in idx], dtype=dtype)
            eps = rng.standard_normal((len(idx), config.latent_tokens, config.latent_dim))
            with GradTape() as tape:
                total, parts = model.loss_graph(x, lengths, eps)
            grads = backward(total, tape, model.params.values())
            adamw_step(model.params, {k: grads[v] for k, v in model.params.items()}, opt)
            b = len(idx)
            seen += b
            sums["total"] += total.item() * b
            for key in ("recon", "kl", "velocity"):
                sums[key] += parts[key].item() * b
        entry = VaeLossBreakdown(
            recon=sums["recon"] / seen,
            kl=sums["kl"] / seen,
            velocity=sums["velocity"] / seen,
            total=sums["total"] / seen,
        )
        history.append(entry)
        if log_fn:
            log_fn(epoch, entry)
    return model, history
