"""Acceptance criteria, one test per criterion.

Run with ``pytest tests/test_acceptance.py -v -s`` to see one pass/fail
line per criterion. Criterion 7 performs the full desk-scale pipeline
through the CLI (synthesize -> filter -> train VAE/diffusion/retrieval ->
generate -> evaluate) and dominates the runtime.
"""

import time
from pathlib import Path

import numpy as np
import pytest

from m2d import _kernels
from m2d.autodiff import Tensor
from m2d.blocks import init_part_attention, part_aware_attention
from m2d.cli import dispatch
from m2d.corpus_io import read_corpus, write_corpus
from m2d.diffusion import (
    DenoiserConfig,
    Denoiser,
    build_schedule,
    cfg_predict,
    diffusion_loss,
    q_sample,
)
from m2d.gradcheck import gradient_check
from m2d.metrics import (
    EmbeddingPair,
    FeatureSet,
    fid,
    fid_diagonal_reference,
    r_precision,
)
from m2d.molip import Molip, contrastive_loss
from m2d.motion import Corpus, MotionSequence, normalize_sequence
from m2d.parts import N_KEYPOINTS, PART_RANGES, PartTable, RIGHT_HAND_RANGE
from m2d.quality import quality_filter
from m2d.synth import DEFAULT_TEMPLATE_SET, mean_block_speed
from m2d.vae import MotionLatent, PaVae, PaVaeConfig, kl_unit_gaussian, pack_batch

_kernels.warmup()

TOY_VAE = PaVaeConfig(
    spatial_layers=1, n_parts=4, temporal_layers=2, model_dim=8,
    latent_tokens=2, latent_dim=4, heads=2, max_length=8, ffn_mult=2,
)
TOY_DEN = DenoiserConfig(layers=2, model_dim=8, heads=2, text_dim=8,
                         latent_tokens=2, latent_dim=4, ffn_mult=2)

# desk-scale end-to-end settings (seeded, CLI-driven)
E2E_SEED = 11
E2E_TEMPLATES = ",".join(list(DEFAULT_TEMPLATE_SET)[:8])
E2E_N = 512
E2E_TRAIN = 416  # remainder held out for retrieval evaluation
E2E_VAE_EPOCHS = 6
E2E_VAE_LR = 1e-3
E2E_DIFF_EPOCHS = 60
E2E_MOLIP_EPOCHS = 25
E2E_BUDGET_SECONDS = 45 * 60


def ok(line: str) -> None:
    print(f"\nPASS {line}")


def random_norm_frames(L, rng):
    frames = np.zeros((L, N_KEYPOINTS, 3))
    frames[:, :, :2] = rng.uniform(-0.9, 0.9, size=(L, N_KEYPOINTS, 2))
    frames[:, :, 2] = rng.uniform(0.3, 1.0, size=(L, N_KEYPOINTS))
    return frames


def test_criterion_1_gradient_suite():
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)

    vae = PaVae(TOY_VAE, seed=2, dtype=np.float64)
    x, lengths = pack_batch([random_norm_frames(4, rng), random_norm_frames(6, rng)], np.float64)
    eps = rng.standard_normal((2, 2, 4))
    worst_vae = gradient_check(lambda: vae.loss_graph(x, lengths, eps)[0], vae.params,
                               samples_per_param=2, rng=np.random.default_rng(1))
    assert worst_vae < 1e-4

    den = Denoiser(TOY_DEN, seed=3, dtype=np.float64)
    sched = build_schedule(20, 1e-3, 0.02)
    x0 = rng.standard_normal((3, 2, 4))
    cond = rng.standard_normal((3, 8))
    worst_diff = gradient_check(
        lambda: diffusion_loss(den, x0, cond, sched, np.random.default_rng(5), cond_drop_prob=0.5),
        den.params, samples_per_param=2, rng=np.random.default_rng(2))
    assert worst_diff < 1e-4

    feats = {
        "m": Tensor(rng.standard_normal((4, 6)), requires_grad=True, dtype=np.float64),
        "t": Tensor(rng.standard_normal((4, 6)), requires_grad=True, dtype=np.float64),
    }
    worst_con = gradient_check(lambda: contrastive_loss(feats["m"], feats["t"]), feats,
                               samples_per_param=6, rng=np.random.default_rng(3))
    assert worst_con < 1e-4

    elapsed = time.perf_counter() - t0
    assert elapsed < 120.0
    ok(f"criterion 1: gradient suite (vae {worst_vae:.2e}, diffusion {worst_diff:.2e}, "
       f"contrastive {worst_con:.2e}) in {elapsed:.1f}s")


def test_criterion_2_attention_structure():
    table = PartTable()
    params = {}
    init_part_attention(params, np.random.default_rng(0), "paa", table, 8, 2, np.float32)
    tokens = Tensor(np.random.default_rng(1).standard_normal((1000, N_KEYPOINTS, 8)), dtype=np.float32)
    _, weights = part_aware_attention(tokens, table, params, "paa", heads=2, return_weights=True)
    assert weights.shape == (1000, 2, N_KEYPOINTS, N_KEYPOINTS)
    cross = np.isneginf(table.mask)
    assert np.all(weights[:, :, cross] == 0.0)
    row_sums = weights.sum(axis=-1, dtype=np.float64)
    assert np.abs(row_sums - 1.0).max() < 1e-6
    ok(f"criterion 2: 1000 random inputs, cross-part weights exactly 0, "
       f"max row-sum error {np.abs(row_sums - 1.0).max():.2e}")


def test_criterion_3_schedule_and_forward_process():
    sched = build_schedule(1000, 8.5e-4, 0.012)
    assert sched.beta[0] == 8.5e-4
    assert sched.beta[-1] == 0.012
    assert np.all(np.diff(sched.alpha_bar) < 0)
    worst = 0.0
    for t in (1, 250, 500, 1000):
        rng = np.random.default_rng(400 + t)
        out = q_sample(np.zeros(10**5), t, rng.standard_normal(10**5), sched)
        expected = 1.0 - sched.alpha_bar[t - 1]
        worst = max(worst, abs(out.var() / expected - 1.0))
    assert worst < 0.02
    ok(f"criterion 3: schedule endpoints exact, q_sample MC variance within {worst:.3%}")


def test_criterion_4_cfg_algebra():
    model = Denoiser(TOY_DEN, seed=4)
    rng = np.random.default_rng(6)
    x_t = rng.standard_normal((2, 4))
    cond = rng.standard_normal(8)
    cond_pred = model.predict(x_t, 7, cond)
    uncond_pred = model.predict(x_t, 7, None)
    assert np.array_equal(cfg_predict(model, x_t, 7, cond, 1.0), cond_pred)
    worst = 0.0
    for s in (0.0, 0.25, 1.0, 2.5, 7.5):
        out = cfg_predict(model, x_t, 7, cond, s)
        worst = max(worst, np.abs((out - uncond_pred) - s * (cond_pred - uncond_pred)).max())
    assert worst < 1e-9
    ok(f"criterion 4: guidance affine in s (max deviation {worst:.1e}), s=1 equals conditional exactly")


def test_criterion_5_metric_oracles():
    rng = np.random.default_rng(7)
    a = FeatureSet(rng.standard_normal((40, 6)))
    assert fid(a, a) < 1e-6

    def diag_set(mu, diag, n, seed, source="real"):
        d = len(mu)
        g = np.random.default_rng(seed).standard_normal((n, d))
        g -= g.mean(axis=0)
        cov = np.atleast_2d(np.cov(g, rowvar=False))
        vals, vecs = np.linalg.eigh(cov)
        g = g @ (vecs @ np.diag(vals**-0.5) @ vecs.T)
        return FeatureSet(g * np.sqrt(np.asarray(diag)) + np.asarray(mu), source)

    one_d = fid(diag_set([0.0], [1.0], 50, 1), diag_set([1.0], [1.0], 60, 2, "generated"))
    assert abs(one_d - 1.0) < 1e-4

    mu1, mu2 = rng.normal(0, 1, 5), rng.normal(0, 1, 5)
    d1, d2 = rng.uniform(0.5, 2, 5), rng.uniform(0.5, 2, 5)
    got = fid(diag_set(mu1, d1, 40, 3), diag_set(mu2, d2, 44, 4, "generated"))
    want = fid_diagonal_reference(mu1, d1, mu2, d2)
    assert abs(got - want) / want < 1e-4

    n, pool = 600, 32
    pairs = []
    for _ in range(n):
        m = rng.standard_normal(32)
        t = rng.standard_normal(32)
        pairs.append(EmbeddingPair(m / np.linalg.norm(m), t / np.linalg.norm(t)))
    tops = r_precision(pairs, pool_size=pool, rng=np.random.default_rng(8))
    for k, val in enumerate(tops, start=1):
        p = k / pool
        assert abs(val - p) < 3 * np.sqrt(p * (1 - p) / n)
    ok(f"criterion 5: fid(A,A)={fid(a, a):.1e}, 1-D fixture {one_d:.5f}, diagonal form rel "
       f"{abs(got - want) / want:.1e}, chance R-Precision {tops} within 3 sigma of k/32")


def test_criterion_6_kl_oracle():
    rng = np.random.default_rng(9)
    mu = rng.uniform(-1.5, 1.5, size=(2, 4))
    log_var = rng.uniform(-1.0, 1.0, size=(2, 4))
    closed = kl_unit_gaussian(mu, log_var)
    sigma = np.exp(0.5 * log_var)
    sample_rng = np.random.default_rng(10)
    x = mu + sigma * sample_rng.standard_normal((10**5,) + mu.shape)
    log_q = -0.5 * ((x - mu) / sigma) ** 2 - 0.5 * log_var - 0.5 * np.log(2 * np.pi)
    log_p = -0.5 * x**2 - 0.5 * np.log(2 * np.pi)
    mc = float((log_q - log_p).sum(axis=(1, 2)).mean()) / mu.size
    assert abs(mc - closed) / closed < 0.01
    ok(f"criterion 6: KL closed form {closed:.5f} vs Monte Carlo {mc:.5f} "
       f"({abs(mc - closed) / closed:.3%} relative)")


# ---------------------------------------------------------------------------
# criterion 7: end-to-end desk run (shared pipeline fixture)
# ---------------------------------------------------------------------------


@pytest.fixture(scope="session")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("desk_run")
    t0 = time.perf_counter()

    def run(*argv):
        rc = dispatch([str(a) for a in argv])
        assert rc == 0, f"command failed: {argv}"

    run("synth", "--n", E2E_N, "--seed", E2E_SEED, "--out", root, "--name", "corpus.jsonl",
        "--templates", E2E_TEMPLATES)
    run("filter", "--corpus", root / "corpus.jsonl", "--out", root / "filtered")

    corpus = read_corpus(root / "filtered" / "filtered.jsonl")
    assert len(corpus) == E2E_N, "synthetic corpus should fully pass the quality filter"
    train = Corpus(corpus.entries[:E2E_TRAIN])
    heldout = Corpus(corpus.entries[E2E_TRAIN:])
    (root / "train.jsonl").write_bytes(write_corpus(train))
    (root / "heldout.jsonl").write_bytes(write_corpus(heldout))

    run("train-vae", "--corpus", root / "train.jsonl", "--out", root / "vae",
        "--seed", 7, "--epochs", E2E_VAE_EPOCHS, "--batch-size", 4, "--lr", E2E_VAE_LR)
    run("train-diffusion", "--corpus", root / "train.jsonl", "--vae", root / "vae" / "vae.ckpt",
        "--out", root / "diffusion", "--seed", 7, "--epochs", E2E_DIFF_EPOCHS, "--batch-size", 32)
    run("train-molip", "--corpus", root / "train.jsonl", "--out", root / "molip",
        "--seed", 7, "--epochs", E2E_MOLIP_EPOCHS, "--batch-size", 32)
    run("generate", "--vae", root / "vae" / "vae.ckpt",
        "--diffusion", root / "diffusion" / "diffusion.ckpt",
        "--text", "a person waves the right hand", "--samples", 10, "--seed", 5,
        "--length", 72, "--out", root / "gen")
    run("evaluate", "--corpus", root / "heldout.jsonl",
        "--generated", root / "gen" / "generated.jsonl",
        "--molip", root / "molip" / "molip.ckpt", "--out", root / "eval")
    elapsed = time.perf_counter() - t0
    return {"root": root, "heldout": heldout, "elapsed": elapsed}


def test_criterion_7_end_to_end_desk_run(pipeline):
    root = pipeline["root"]
    heldout = pipeline["heldout"]
    molip = Molip.load(root / "molip" / "molip.ckpt")

    # (a) held-out retrieval quality
    pairs = []
    for seq, captions in heldout:
        norm, _ = normalize_sequence(seq)
        pairs.append(EmbeddingPair(molip.embed_motion(norm), molip.embed_text(captions[0]),
                                   seq.source_id))
    top1, top2, top3 = r_precision(pairs, pool_size=32, rng=np.random.default_rng(0))
    assert top3 >= 0.5, f"held-out Top3 {top3:.3f} below 0.5"

    # (b) VAE reconstruction error on held-out sequences
    vae = PaVae.load(root / "vae" / "vae.ckpt")
    errs = []
    for seq, _ in list(heldout)[:32]:
        norm, _ = normalize_sequence(seq)
        dist = vae.encode(norm)
        recon = vae.decode(MotionLatent(dist.mu), norm.length)
        errs.append(np.linalg.norm(recon.frames[:, :, :2] - norm.frames[:, :, :2], axis=-1).mean())
    recon_err = float(np.mean(errs))
    assert recon_err < 0.05, f"reconstruction error {recon_err:.4f} >= 0.05"

    # (c) kinematic oracle on the generated samples
    gen = read_corpus(root / "gen" / "generated.jsonl")
    assert len(gen) == 10
    hits = 0
    for seq, _ in gen:
        hand = mean_block_speed(seq, slice(*RIGHT_HAND_RANGE))
        body = mean_block_speed(seq, slice(*PART_RANGES["Body"]))
        hits += hand > 3 * body
    assert hits >= 6, f"kinematic oracle hit {hits}/10 samples"

    # (d) FID sanity: generated beats structure-destroyed sequences
    def embed_all(entries):
        feats = []
        for seq, _ in entries:
            norm, _ = normalize_sequence(seq)
            feats.append(molip.embed_motion(norm))
        return np.stack(feats)

    real_feats = FeatureSet(embed_all(list(heldout)))
    gen_feats = FeatureSet(embed_all(list(gen)), "generated")
    rng = np.random.default_rng(3)
    noise_entries = []
    for seq, caps in list(heldout)[:32]:
        frames = seq.frames.reshape(-1, 3)[rng.permutation(seq.length * N_KEYPOINTS)]
        noise_entries.append((MotionSequence(frames.reshape(seq.frames.shape), fps=seq.fps), caps))
    noise_feats = FeatureSet(embed_all(noise_entries), "noise")
    fid_gen = fid(real_feats, gen_feats)
    fid_noise = fid(real_feats, noise_feats)
    assert fid_gen < fid_noise, f"FID(gen) {fid_gen:.3f} !< FID(noise) {fid_noise:.3f}"

    assert pipeline["elapsed"] < E2E_BUDGET_SECONDS
    ok(f"criterion 7: e2e desk run in {pipeline['elapsed']:.0f}s — held-out Top3 {top3:.3f} "
       f"(Top1 {top1:.3f}), recon err {recon_err:.4f}, kinematic {hits}/10, "
       f"FID gen {fid_gen:.2f} < noise {fid_noise:.2f}")


def test_criterion_8_reproducibility(tmp_path):
    def run_pipeline(root: Path):
        root.mkdir()

        def run(*argv):
            assert dispatch([str(a) for a in argv]) == 0

        run("synth", "--n", 12, "--seed", 3, "--out", root, "--name", "c.jsonl",
            "--min-length", 12, "--max-length", 16)
        run("filter", "--corpus", root / "c.jsonl", "--out", root / "f",
            "--min-length", 4)
        run("train-vae", "--corpus", root / "f" / "filtered.jsonl", "--out", root / "vae",
            "--seed", 1, "--epochs", 2, "--batch-size", 4)
        run("train-diffusion", "--corpus", root / "f" / "filtered.jsonl",
            "--vae", root / "vae" / "vae.ckpt", "--out", root / "diff",
            "--seed", 1, "--epochs", 2, "--batch-size", 6)
        run("train-molip", "--corpus", root / "f" / "filtered.jsonl", "--out", root / "molip",
            "--seed", 1, "--epochs", 2, "--batch-size", 6)
        run("generate", "--vae", root / "vae" / "vae.ckpt", "--diffusion",
            root / "diff" / "diffusion.ckpt", "--text", "a person jumps up and down",
            "--samples", 2, "--seed", 9, "--length", 12, "--steps", 10, "--out", root / "gen")
        run("evaluate", "--corpus", root / "f" / "filtered.jsonl",
            "--generated", root / "gen" / "generated.jsonl",
            "--molip", root / "molip" / "molip.ckpt", "--pool-size", 4,
            "--out", root / "eval")

    run_pipeline(tmp_path / "a")
    run_pipeline(tmp_path / "b")
    files_a = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    files_b = sorted(p.relative_to(tmp_path / "b") for p in (tmp_path / "b").rglob("*") if p.is_file())
    assert files_a == files_b
    for rel in files_a:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes(), (
            f"artifact differs between identical-seed runs: {rel}"
        )
    ok(f"criterion 8: two identical-seed pipeline runs byte-identical across {len(files_a)} artifacts")


def test_criterion_9_filter_fidelity():
    frames = np.zeros((64, N_KEYPOINTS, 3))
    frames[:, :, :2] = 100.0
    frames[:, :, 2] = 1.0
    assert not quality_filter(MotionSequence(frames)).accept  # length must exceed 64

    frames = np.zeros((65, N_KEYPOINTS, 3))
    frames[:, :, :2] = 100.0
    frames[:, :94, 2] = 0.9
    frames[:, 94:, 2] = 0.1
    accept_94 = quality_filter(MotionSequence(frames))
    assert accept_94.accept and accept_94.high_conf_fraction == pytest.approx(94 / 133)

    frames[:, 93:, 2] = 0.1
    reject_93 = quality_filter(MotionSequence(frames))
    assert not reject_93.accept and reject_93.high_conf_fraction == pytest.approx(93 / 133)
    ok("criterion 9: filter fidelity (L=64 reject; 94/133 accept at 0.7068; 93/133 reject at 0.6992)")
