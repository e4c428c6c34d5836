"""Latent diffusion: schedule, forward noising, denoiser, guidance, sampling.

The denoiser is a small transformer over [text token | n latent tokens]
with long skip connections and a timestep embedding added to every token;
it predicts the clean latent signal itself rather than the noise. The
unconditional branch runs on a learned null text embedding, and sampling
blends both branches: s * G(x, t, c) + (1 - s) * G(x, t, null).

Sampling walks a uniform-stride subsequence of the training steps with
the deterministic eta=0 update (noise is reintroduced only for eta > 0).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from . import blocks
from .autodiff import GradTape, Tensor, backward
from .blocks import Params, sinusoidal_embedding
from .checkpoint import load_sidecar, load_tensors, save_sidecar, save_tensors
from .errors import M2dError, ShapeError
from .motion import Corpus
from .optim import AdamWState, adamw_step
from .vae import MotionLatent, PaVae, normalized_frames, pack_batch


@dataclass(frozen=True)
class NoiseSchedule:
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    @property
    def T(self) -> int:
        return len(self.beta)

    def alpha_bar_at(self, t: int) -> float:
        """alpha_bar for 1-based timestep t; t=0 is the clean signal (1.0)."""
        if t == 0:
            return 1.0
        if not 1 <= t <= self.T:
            raise M2dError(f"timestep {t} outside [1, {self.T}]")
        return float(self.alpha_bar[t - 1])


def build_schedule(T: int, beta_start: float = 8.5e-4, beta_end: float = 0.012) -> NoiseSchedule:
    if T < 2:
        raise M2dError(f"schedule needs T >= 2, got {T}")
    if not 0.0 < beta_start < beta_end < 1.0:
        raise M2dError(f"need 0 < beta_start < beta_end < 1, got {beta_start}, {beta_end}")
    beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha = 1.0 - beta
    return NoiseSchedule(beta=beta, alpha=alpha, alpha_bar=np.cumprod(alpha))


def q_sample(x0: np.ndarray | MotionLatent, t: int, noise: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    """Closed-form marginal of the noising chain: sqrt(ab_t) x0 + sqrt(1-ab_t) eps."""
    x0 = x0.x_z if isinstance(x0, MotionLatent) else np.asarray(x0)
    if not 1 <= t <= schedule.T:
        raise M2dError(f"timestep {t} outside [1, {schedule.T}]")
    noise = np.asarray(noise)
    if noise.shape != x0.shape:
        raise ShapeError(f"noise shape {noise.shape} != x0 shape {x0.shape}")
    ab = schedule.alpha_bar_at(t)
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * noise


@dataclass(frozen=True)
class DenoiserConfig:
    layers: int = 9
    model_dim: int = 256
    heads: int = 4
    text_dim: int = 256
    latent_tokens: int = 8
    latent_dim: int = 256
    ffn_mult: int = 4
    cond_drop_prob: float = 0.1

    def __post_init__(self):
        for name in ("layers", "model_dim", "heads", "text_dim", "latent_tokens", "latent_dim", "ffn_mult"):
            if getattr(self, name) < 1:
                raise M2dError(f"DenoiserConfig.{name} must be positive")
        if not 0.0 <= self.cond_drop_prob < 1.0:
            raise M2dError("cond_drop_prob must be in [0, 1)")
        if self.model_dim % self.heads:
            raise M2dError("model_dim must be divisible by heads")


DENOISER_PRESETS: dict[str, DenoiserConfig] = {
    "desk": DenoiserConfig(layers=4, model_dim=64, heads=4, text_dim=64,
                           latent_tokens=2, latent_dim=64, ffn_mult=2),
    "paper": DenoiserConfig(),
}


@dataclass(frozen=True)
class SamplerConfig:
    inference_steps: int = 50
    guidance_scale: float = 7.5
    eta: float = 0.0

    def __post_init__(self):
        if self.inference_steps < 1:
            raise M2dError("inference_steps must be >= 1")
        if self.guidance_scale < 0:
            raise M2dError("guidance_scale must be >= 0")
        if self.eta < 0:
            raise M2dError("eta must be >= 0")


class Denoiser:
    def __init__(self, config: DenoiserConfig, seed: int = 0, dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype)
        self.params: Params = {}
        self._build(np.random.default_rng(seed))

    def _build(self, rng: np.random.Generator) -> None:
        cfg, dt, p = self.config, self.dtype, self.params
        C = cfg.model_dim
        p["null_text"] = Tensor(rng.normal(0, 0.02, size=(cfg.text_dim,)), requires_grad=True, dtype=dt)
        blocks.init_linear(p, rng, "text_proj", cfg.text_dim, C, dt)
        blocks.init_linear(p, rng, "latent_in", cfg.latent_dim, C, dt)
        blocks.init_ffn(p, rng, "time_mlp", C, 2, dt)
        for i in range(cfg.layers):
            blocks.init_encoder_layer(p, rng, f"l{i}", C, cfg.ffn_mult, dt)
        blocks.init_skip_merges(p, rng, "skip", cfg.layers, C, dt)
        blocks.init_layer_norm(p, "final_ln", C, dt)
        blocks.init_linear(p, rng, "out_head", C, cfg.latent_dim, dt)

    def save(self, path) -> None:
        payload_dtype = "<f8" if self.dtype == np.float64 else "<f4"
        save_tensors(path, {k: v.data for k, v in self.params.items()}, dtype=payload_dtype)
        save_sidecar(path, {"kind": "denoiser", "config": asdict(self.config)})

    @classmethod
    def load(cls, path) -> "Denoiser":
        side = load_sidecar(path)
        if side.get("kind") != "denoiser":
            raise M2dError(f"{path}: not a denoiser checkpoint (kind={side.get('kind')!r})")
        model = cls(DenoiserConfig(**side["config"]))
        tensors = load_tensors(path)
        if set(tensors) != set(model.params):
            raise M2dError(f"{path}: parameter names do not match the configuration")
        for name, arr in tensors.items():
            model.params[name].data = arr.astype(model.dtype)
        return model

    def forward_graph(self, x_t: np.ndarray, t: np.ndarray, cond: np.ndarray, cond_mask: np.ndarray):
        """Predict x0 for a batch.

        x_t (B,n,d); t (B,) 1-based steps; cond (B,text_dim); cond_mask (B,)
        with 1 = keep the text, 0 = use the learned null embedding.
        """
        cfg, p = self.config, self.params
        B = x_t.shape[0]
        if x_t.shape[1:] != (cfg.latent_tokens, cfg.latent_dim):
            raise ShapeError(
                f"latent shape {x_t.shape[1:]} != ({cfg.latent_tokens}, {cfg.latent_dim})"
            )
        mask = np.asarray(cond_mask, dtype=self.dtype).reshape(B, 1)
        kept = Tensor(np.asarray(cond, dtype=self.dtype) * mask, dtype=self.dtype)
        dropped = ad.mul(ad.reshape(p["null_text"], (1, cfg.text_dim)),
                         Tensor(1.0 - mask, dtype=self.dtype))
        text = ad.add(kept, dropped)
        text_tok = ad.reshape(blocks.apply_linear(text, p, "text_proj"), (B, 1, cfg.model_dim))
        lat_tok = blocks.apply_linear(Tensor(x_t, dtype=self.dtype), p, "latent_in")
        tokens = ad.concat([text_tok, lat_tok], axis=1)

        t_emb = sinusoidal_embedding(np.asarray(t, dtype=np.float64), cfg.model_dim, self.dtype)
        t_feat = blocks.apply_ffn(Tensor(t_emb, dtype=self.dtype), p, "time_mlp")
        tokens = ad.add(tokens, ad.reshape(t_feat, (B, 1, cfg.model_dim)))

        def layer(h, i):
            return blocks.encoder_layer(h, p, f"l{i}", cfg.heads)

        tokens = blocks.long_skip_stack(tokens, cfg.layers, layer, p, "skip")
        tokens = blocks.apply_layer_norm(tokens, p, "final_ln")
        out = blocks.apply_linear(ad.narrow(tokens, 1, 1, cfg.latent_tokens), p, "out_head")
        return out

    def predict(self, x_t: np.ndarray, t: int, cond: np.ndarray | None) -> np.ndarray:
        """Single-latent x0 prediction; cond=None selects the null branch."""
        cfg = self.config
        if cond is None:
            cond_arr = np.zeros((1, cfg.text_dim))
            mask = np.zeros(1)
        else:
            cond_arr = np.asarray(cond, dtype=np.float64).reshape(1, cfg.text_dim)
            mask = np.ones(1)
        out = self.forward_graph(x_t[None], np.array([t]), cond_arr, mask)
        return out.data[0].astype(np.float64)


def cfg_predict(model, x_t: np.ndarray, t: int, cond: np.ndarray | None, s: float) -> np.ndarray:
    """Classifier-free guidance blend: s * G(x,t,c) + (1-s) * G(x,t,null)."""
    if cond is None:
        return model.predict(x_t, t, None)
    cond_pred = model.predict(x_t, t, cond)
    if s == 1.0:
        return cond_pred
    uncond_pred = model.predict(x_t, t, None)
    return s * cond_pred + (1.0 - s) * uncond_pred


def diffusion_loss(model, x0: np.ndarray, cond: np.ndarray, schedule: NoiseSchedule,
                   rng: np.random.Generator, cond_drop_prob: float | None = None):
    """Signal-prediction objective on a batch, as a graph Tensor.

    Draws t ~ Uniform[1, T] and eps ~ N(0, I) per sample, noises x0, and
    penalizes ||x0 - G(x_t, t, cond')||^2 where cond' falls back to the
    null embedding with probability cond_drop_prob.
    """
    x0 = np.asarray(x0)
    B = x0.shape[0]
    if cond_drop_prob is None:
        config = getattr(model, "config", None)
        cond_drop_prob = getattr(config, "cond_drop_prob", 0.0)
    t = rng.integers(1, schedule.T + 1, size=B)
    eps = rng.standard_normal(x0.shape)
    ab = schedule.alpha_bar[t - 1][:, None, None]
    x_t = np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps
    cond_mask = (rng.random(B) >= cond_drop_prob).astype(np.float64)
    pred = model.forward_graph(x_t, t, cond, cond_mask)
    diff = ad.sub(pred, Tensor(np.asarray(x0, dtype=pred.dtype), dtype=pred.dtype))
    return ad.tmean(ad.square(diff))


def sampling_timesteps(T: int, inference_steps: int) -> np.ndarray:
    """Uniform-stride descending subsequence of [1, T], starting at T."""
    if inference_steps > T:
        raise M2dError(f"inference_steps {inference_steps} > T {T}")
    ts = np.unique(np.round(np.linspace(T, 1, inference_steps)).astype(int))[::-1]
    return ts


def sample_latent(model, cond: np.ndarray | None, sampler: SamplerConfig,
                  schedule: NoiseSchedule, rng: np.random.Generator) -> MotionLatent:
    """Deterministic-subsequence sampler; eta > 0 reintroduces noise."""
    cfg = model.config
    ts = sampling_timesteps(schedule.T, sampler.inference_steps)
    x = rng.standard_normal((cfg.latent_tokens, cfg.latent_dim))
    for i, t in enumerate(ts):
        t_prev = int(ts[i + 1]) if i + 1 < len(ts) else 0
        x0_hat = cfg_predict(model, x, int(t), cond, sampler.guidance_scale)
        ab_t = schedule.alpha_bar_at(int(t))
        ab_prev = schedule.alpha_bar_at(t_prev)
        eps_hat = (x - np.sqrt(ab_t) * x0_hat) / np.sqrt(1.0 - ab_t)
        sigma = sampler.eta * np.sqrt((1 - ab_prev) / (1 - ab_t)) * np.sqrt(1 - ab_t / ab_prev) if t_prev > 0 else 0.0
        x = np.sqrt(ab_prev) * x0_hat + np.sqrt(max(0.0, 1.0 - ab_prev - sigma**2)) * eps_hat
        if sigma > 0:
            x = x + sigma * rng.standard_normal(x.shape)
    return MotionLatent(x)


def encode_corpus_latents(vae: PaVae, corpus: Corpus, batch_size: int = 16) -> tuple[np.ndarray, np.ndarray]:
    """Frozen-VAE posterior parameters for every sequence: (mu, log_var)."""
    data = normalized_frames(corpus, vae.config.max_length)
    mus, lvs = [], []
    for start in range(0, len(data), batch_size):
        chunk = data[start : start + batch_size]
        x, lengths = pack_batch(chunk, dtype=vae.dtype)
        mu, lv = vae._encode_graph(x, lengths)
        mus.append(mu.data.astype(np.float64))
        lvs.append(lv.data.astype(np.float64))
    return np.concatenate(mus), np.concatenate(lvs)


def train_diffusion(
    corpus: Corpus,
    vae: PaVae,
    config: DenoiserConfig,
    text_embed_fn,
    schedule: NoiseSchedule | None = None,
    seed: int = 0,
    epochs: int = 40,
    batch_size: int = 32,
    lr: float = 2e-4,
    dtype=np.float32,
    log_fn=None,
) -> tuple[Denoiser, list[float]]:
    """Train the denoiser on frozen-VAE latents; deterministic per seed."""
    if len(corpus) == 0:
        raise M2dError("train_diffusion: empty corpus")
    if (vae.config.latent_tokens, vae.config.latent_dim) != (config.latent_tokens, config.latent_dim):
        raise M2dError(
            f"latent shape mismatch: VAE ({vae.config.latent_tokens}, {vae.config.latent_dim}) "
            f"vs denoiser ({config.latent_tokens}, {config.latent_dim})"
        )
    schedule = schedule or build_schedule(1000)
    model = Denoiser(config, seed=seed, dtype=dtype)

    mus, lvs = encode_corpus_latents(vae, corpus)
    captions = [caps for _, caps in corpus]
    embeds = {text: text_embed_fn(text) for caps in captions for text in caps}
    d_e = next(iter(embeds.values())).shape[0]
    if d_e != config.text_dim:
        raise M2dError(f"text embedding dim {d_e} != denoiser text_dim {config.text_dim}")

    rng = np.random.default_rng(seed + 1)
    opt = AdamWState(lr=lr)
    history: list[float] = []
    n = len(corpus)
    for epoch in range(epochs):
        order = rng.permutation(n)
        total, seen = 0.0, 0
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            eps = rng.standard_normal((len(idx), config.latent_tokens, config.latent_dim))
            x0 = mus[idx] + np.exp(0.5 * lvs[idx]) * eps
            cond = np.stack([
                embeds[captions[i][int(rng.integers(0, len(captions[i])))]] for i in idx
            ])
            with GradTape() as tape:
                loss = diffusion_loss(model, x0, cond, schedule, rng, config.cond_drop_prob)
            grads = backward(loss, tape, model.params.values())
            adamw_step(model.params, {k: grads[v] for k, v in model.params.items()}, opt)
            total += loss.item() * len(idx)
            seen += len(idx)
        history.append(total / seen)
        if log_fn:
            log_fn(epoch, history[-1])
    return model, history
