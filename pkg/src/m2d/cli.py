"""Command-line interface.

Subcommands: filter, synth, train-vae, train-diffusion, train-molip,
generate, evaluate, render. Every command writes its artifacts atomically
plus a manifest JSON (config echo, seed, versions, sha256 of each output)
into the output location. Exit codes: 0 ok, 1 domain error, 2 usage.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

import matplotlib
import numpy as np

from . import __version__, report
from .corpus_io import read_corpus, write_corpus
from .diffusion import (
    DENOISER_PRESETS,
    Denoiser,
    SamplerConfig,
    build_schedule,
    sample_latent,
    train_diffusion,
)
from .errors import M2dError
from .metrics import (
    EmbeddingPair,
    FeatureSet,
    MetricReport,
    diversity,
    diversity_needs_replacement,
    fid,
    mm_dist,
    multimodality,
    r_precision,
)
from .molip import MOLIP_PRESETS, HashTextEncoder, Molip, train_molip
from .motion import Corpus, MotionSequence, NormTransform, normalize_sequence
from .quality import QualityPolicy, filter_corpus
from .render import SkeletonStyle, frame_filenames, render_sequence
from .synth import DEFAULT_TEMPLATE_SET, SynthSpec, generate_synthetic_corpus
from .vae import VAE_PRESETS, PaVae, train_vae

# generated motions land on a fixed canvas so they serialize in the same
# pixel-space corpus format as tracked data
CANVAS_TRANSFORM = NormTransform(center=(256.0, 256.0), scale=200.0)


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


_PATH_KEYS = frozenset({"corpus", "generated", "vae", "diffusion", "molip", "out"})


def _echo(value, key: str = ""):
    """Manifest-safe config echo: path arguments reduce to basenames."""
    if isinstance(value, Path):
        return value.name
    if key in _PATH_KEYS and isinstance(value, str):
        return Path(value).name
    if isinstance(value, (list, tuple)):
        return [_echo(v) for v in value]
    return value


def write_manifest(out_dir: Path, command: str, config: dict, seed, outputs: list[Path]) -> Path:
    # the manifest sits inside --out, so echoing that path adds nothing
    # and would break byte-identity between runs in different directories
    config = {k: v for k, v in config.items() if k not in ("fn", "command", "out")}
    manifest = {
        "command": command,
        "config": {k: _echo(v, k) for k, v in sorted(config.items())},
        "seed": seed,
        "versions": {
            "m2d": __version__,
            "python": ".".join(map(str, sys.version_info[:3])),
            "numpy": np.__version__,
            "matplotlib": matplotlib.__version__,
        },
        "outputs": {p.name: _sha256(p) for p in sorted(outputs)},
    }
    path = out_dir / "manifest.json"
    report.write_atomic(path, (json.dumps(manifest, sort_keys=True, indent=2) + "\n").encode("utf-8"))
    return path


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _require(args, *names) -> None:
    missing = [n for n in names if getattr(args, n.replace("-", "_"), None) is None]
    if missing:
        raise M2dError(f"missing required dependency: --{missing[0]} (checkpoint path)")


def _load_corpus(path) -> Corpus:
    return read_corpus(Path(path))


def _embed_fn_for(args, text_dim: int):
    if getattr(args, "molip", None):
        return Molip.load(Path(args.molip)).embed_text
    return HashTextEncoder(dim=text_dim).embed_text


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    out = _out_dir(args)
    templates = tuple(args.templates.split(",")) if args.templates else DEFAULT_TEMPLATE_SET
    spec = SynthSpec(
        n_sequences=args.n, min_length=args.min_length, max_length=args.max_length,
        seed=args.seed, templates=templates, fps=args.fps,
    )
    corpus = generate_synthetic_corpus(spec)
    corpus_path = out / args.name
    report.write_atomic(corpus_path, write_corpus(corpus))
    write_manifest(out, "synth", vars(args), args.seed, [corpus_path])
    print(f"wrote {len(corpus)} sequences to {corpus_path}")
    return 0


def cmd_filter(args) -> int:
    out = _out_dir(args)
    corpus = _load_corpus(args.corpus)
    policy = QualityPolicy(
        min_length_exclusive=args.min_length,
        conf_threshold=args.conf_threshold,
        min_fraction=args.min_fraction,
        per_frame=args.per_frame,
    )
    kept, reports = filter_corpus(corpus, policy)
    corpus_path = out / "filtered.jsonl"
    report.write_atomic(corpus_path, write_corpus(kept))
    rows = [
        {
            "id": seq.source_id,
            "accept": rep.accept,
            "length": rep.length,
            "high_conf_fraction": rep.high_conf_fraction,
        }
        for (seq, _), rep in zip(corpus, reports)
    ]
    report_path = out / "filter_report.json"
    report.write_atomic(report_path, (json.dumps(rows, indent=2) + "\n").encode("utf-8"))
    write_manifest(out, "filter", vars(args), None, [corpus_path, report_path])
    print(f"kept {len(kept)}/{len(corpus)} sequences")
    return 0


def cmd_train_vae(args) -> int:
    out = _out_dir(args)
    corpus = _load_corpus(args.corpus)
    config = VAE_PRESETS[args.preset]
    model, history = train_vae(
        corpus, config, seed=args.seed, epochs=args.epochs,
        batch_size=args.batch_size, lr=args.lr,
        log_fn=(lambda e, h: print(f"epoch {e}: total {h.total:.5f} recon {h.recon:.5f}")) if args.verbose else None,
    )
    ckpt = out / "vae.ckpt"
    model.save(ckpt)
    csv_path, png_path = out / "history.csv", out / "loss_curve.png"
    report.write_history_csv(history, csv_path)
    report.save_loss_curves(history, png_path, "motion VAE training")
    write_manifest(out, "train-vae", vars(args), args.seed,
                   [ckpt, ckpt.with_suffix(".json"), csv_path, png_path])
    print(f"final epoch: recon {history[-1].recon:.5f} total {history[-1].total:.5f}")
    return 0


def cmd_train_diffusion(args) -> int:
    out = _out_dir(args)
    corpus = _load_corpus(args.corpus)
    _require(args, "vae")
    vae = PaVae.load(Path(args.vae))
    config = DENOISER_PRESETS[args.preset]
    embed_fn = _embed_fn_for(args, config.text_dim)
    schedule = build_schedule(args.train_steps)
    model, history = train_diffusion(
        corpus, vae, config, embed_fn, schedule=schedule, seed=args.seed,
        epochs=args.epochs, batch_size=args.batch_size, lr=args.lr,
        log_fn=(lambda e, l: print(f"epoch {e}: loss {l:.5f}")) if args.verbose else None,
    )
    ckpt = out / "diffusion.ckpt"
    model.save(ckpt)
    csv_path, png_path = out / "history.csv", out / "loss_curve.png"
    report.write_history_csv(history, csv_path)
    report.save_loss_curves(history, png_path, "latent denoiser training")
    write_manifest(out, "train-diffusion", vars(args), args.seed,
                   [ckpt, ckpt.with_suffix(".json"), csv_path, png_path])
    print(f"final epoch loss {history[-1]:.5f}")
    return 0


def cmd_train_molip(args) -> int:
    out = _out_dir(args)
    corpus = _load_corpus(args.corpus)
    config = MOLIP_PRESETS[args.preset]
    model, history = train_molip(
        corpus, config, seed=args.seed, epochs=args.epochs,
        batch_size=args.batch_size, lr=args.lr,
        log_fn=(lambda e, l: print(f"epoch {e}: loss {l:.5f}")) if args.verbose else None,
    )
    ckpt = out / "molip.ckpt"
    model.save(ckpt)
    csv_path, png_path = out / "history.csv", out / "loss_curve.png"
    report.write_history_csv(history, csv_path)
    report.save_loss_curves(history, png_path, "retrieval model training")
    write_manifest(out, "train-molip", vars(args), args.seed,
                   [ckpt, ckpt.with_suffix(".json"), csv_path, png_path])
    print(f"final epoch loss {history[-1]:.5f}")
    return 0


def _generate_sequences(vae: PaVae, denoiser: Denoiser, embed_fn, text: str,
                        sampler: SamplerConfig, schedule, length: int, fps: float,
                        seeds: list[int]) -> Corpus:
    cond = embed_fn(text)
    entries = []
    for i, seed in enumerate(seeds):
        latent = sample_latent(denoiser, cond, sampler, schedule, np.random.default_rng(seed))
        seq = vae.decode(latent, length, fps=fps)
        frames = CANVAS_TRANSFORM.invert(seq.frames)
        seq = MotionSequence(frames, fps=fps, source_id=f"gen-{seed:08d}-{i:03d}")
        entries.append((seq, [text]))
    return Corpus(entries)


def cmd_generate(args) -> int:
    out = _out_dir(args)
    _require(args, "vae", "diffusion")
    vae = PaVae.load(Path(args.vae))
    denoiser = Denoiser.load(Path(args.diffusion))
    embed_fn = _embed_fn_for(args, denoiser.config.text_dim)
    sampler = SamplerConfig(inference_steps=args.steps, guidance_scale=args.guidance, eta=args.eta)
    schedule = build_schedule(args.train_steps)
    if args.length > vae.config.max_length:
        raise M2dError(f"--length {args.length} exceeds VAE max_length {vae.config.max_length}")
    seeds = [args.seed + i for i in range(args.samples)]
    corpus = _generate_sequences(vae, denoiser, embed_fn, args.text, sampler, schedule,
                                 args.length, args.fps, seeds)
    corpus_path = out / "generated.jsonl"
    report.write_atomic(corpus_path, write_corpus(corpus))
    write_manifest(out, "generate", vars(args), args.seed, [corpus_path])
    print(f"wrote {len(corpus)} generated sequences to {corpus_path}")
    return 0


def _embed_pairs(molip: Molip, corpus: Corpus) -> tuple[FeatureSet, list[EmbeddingPair]]:
    feats, pairs = [], []
    for seq, captions in corpus:
        norm, _ = normalize_sequence(seq)
        m = molip.embed_motion(norm)
        t = molip.embed_text(captions[0])
        feats.append(m)
        pairs.append(EmbeddingPair(m, t, seq.source_id))
    return FeatureSet(np.stack(feats)), pairs


def cmd_evaluate(args) -> int:
    out = _out_dir(args)
    _require(args, "molip")
    molip = Molip.load(Path(args.molip))
    real = _load_corpus(args.corpus)
    real_feats, real_pairs = _embed_pairs(molip, real)

    config_echo = dict(vars(args))
    rng = np.random.default_rng(args.seed)
    if args.generated:
        gen = _load_corpus(args.generated)
        gen_feats, gen_pairs = _embed_pairs(molip, gen)
        gen_feats = FeatureSet(gen_feats.features, "generated")
        eval_pairs, eval_feats = gen_pairs, gen_feats
        fid_value = fid(real_feats, gen_feats)
    else:
        eval_pairs, eval_feats = real_pairs, real_feats
        fid_value = None

    if len(eval_pairs) >= args.pool_size:
        top1, top2, top3 = r_precision(eval_pairs, pool_size=args.pool_size, rng=rng)
    else:
        top1 = top2 = top3 = None
        config_echo["r_precision_skipped"] = f"{len(eval_pairs)} pairs < pool_size {args.pool_size}"
    div = diversity(eval_feats, n_pairs=args.diversity_pairs, rng=rng) if eval_feats.n >= 2 else None
    config_echo["diversity_with_replacement"] = diversity_needs_replacement(
        eval_feats.n, args.diversity_pairs
    )

    mm_value = None
    if args.vae and args.diffusion:
        vae = PaVae.load(Path(args.vae))
        denoiser = Denoiser.load(Path(args.diffusion))
        sampler = SamplerConfig(inference_steps=args.steps, guidance_scale=args.guidance)
        schedule = build_schedule(args.train_steps)
        texts = sorted({caps[0] for _, caps in real})[: args.mm_texts]

        def gen_fn(text, seed):
            latent = sample_latent(denoiser, molip.embed_text(text), sampler, schedule,
                                   np.random.default_rng(seed))
            return vae.decode(latent, args.length)

        mm_value = multimodality(gen_fn, molip.embed_motion, texts,
                                 per_text=args.mm_per_text, n_pairs_per_text=args.mm_pairs,
                                 rng=rng)

    metric_report = MetricReport(
        fid=fid_value, r_top1=top1, r_top2=top2, r_top3=top3,
        mm_dist=mm_dist(eval_pairs), diversity=div, multimodality=mm_value,
        config={k: _echo(v, k) for k, v in sorted(config_echo.items())
                if v is not None and k != "fn"},
    )
    json_path, csv_path, png_path = out / "metrics.json", out / "metrics.csv", out / "metrics.png"
    report.write_atomic(json_path, metric_report.to_json().encode("utf-8"))
    report.write_metrics_csv(metric_report, csv_path)
    report.save_metric_chart(metric_report, png_path)
    write_manifest(out, "evaluate", vars(args), args.seed, [json_path, csv_path, png_path])
    print(metric_report.to_json(), end="")
    return 0


def cmd_render(args) -> int:
    out = _out_dir(args)
    corpus = _load_corpus(args.corpus)
    if not 0 <= args.index < len(corpus):
        raise M2dError(f"--index {args.index} out of range for corpus of {len(corpus)}")
    seq, _ = corpus.entries[args.index]
    style = SkeletonStyle(low_conf_threshold=args.conf_threshold)
    svgs, index_html = render_sequence(seq, style, stride=args.stride)
    outputs = []
    for name, svg in zip(frame_filenames(seq.length, args.stride), svgs):
        path = out / name
        report.write_atomic(path, svg.encode("utf-8"))
        outputs.append(path)
    index_path = out / "index.html"
    report.write_atomic(index_path, index_html.encode("utf-8"))
    outputs.append(index_path)
    write_manifest(out, "render", vars(args), None, outputs)
    print(f"rendered {len(svgs)} frames to {out}")
    return 0


# ---------------------------------------------------------------------------
# parser / dispatch
# ---------------------------------------------------------------------------


def _add_common_training(sp, default_epochs: int, default_batch: int) -> None:
    sp.add_argument("--preset", choices=("desk", "paper"), default="desk")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--epochs", type=int, default=default_epochs)
    sp.add_argument("--batch-size", type=int, default=default_batch)
    sp.add_argument("--lr", type=float, default=2e-4)
    sp.add_argument("--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="m2d",
        description="Text-driven 2D whole-body motion generation, desk scale.",
    )
    parser.add_argument("--version", action="version", version=f"m2d {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("synth", help="generate a synthetic motion corpus")
    sp.add_argument("--n", type=int, required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.add_argument("--name", default="corpus.jsonl")
    sp.add_argument("--min-length", type=int, default=65)
    sp.add_argument("--max-length", type=int, default=76)
    sp.add_argument("--templates", default=None, help="comma-separated template names")
    sp.add_argument("--fps", type=float, default=30.0)
    sp.set_defaults(fn=cmd_synth)

    sp = sub.add_parser("filter", help="apply the high-quality motion rules")
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--min-length", type=int, default=64)
    sp.add_argument("--conf-threshold", type=float, default=0.3)
    sp.add_argument("--min-fraction", type=float, default=0.7)
    sp.add_argument("--per-frame", action="store_true")
    sp.set_defaults(fn=cmd_filter)

    sp = sub.add_parser("train-vae", help="train the part-aware motion VAE")
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--out", required=True)
    _add_common_training(sp, default_epochs=30, default_batch=8)
    sp.set_defaults(fn=cmd_train_vae)

    sp = sub.add_parser("train-diffusion", help="train the latent denoiser on a frozen VAE")
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--vae", required=True)
    sp.add_argument("--molip", default=None, help="use a trained text tower for conditioning")
    sp.add_argument("--out", required=True)
    sp.add_argument("--train-steps", type=int, default=1000)
    _add_common_training(sp, default_epochs=40, default_batch=32)
    sp.set_defaults(fn=cmd_train_diffusion)

    sp = sub.add_parser("train-molip", help="train the text-motion retrieval model")
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--out", required=True)
    _add_common_training(sp, default_epochs=30, default_batch=32)
    sp.set_defaults(fn=cmd_train_molip)

    sp = sub.add_parser("generate", help="sample motions for a text prompt")
    sp.add_argument("--vae", default=None)
    sp.add_argument("--diffusion", default=None)
    sp.add_argument("--molip", default=None)
    sp.add_argument("--text", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--length", type=int, default=72)
    sp.add_argument("--steps", type=int, default=50)
    sp.add_argument("--guidance", type=float, default=7.5)
    sp.add_argument("--eta", type=float, default=0.0)
    sp.add_argument("--train-steps", type=int, default=1000)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--samples", type=int, default=1)
    sp.add_argument("--fps", type=float, default=30.0)
    sp.set_defaults(fn=cmd_generate)

    sp = sub.add_parser("evaluate", help="metric suite over retrieval embeddings")
    sp.add_argument("--corpus", required=True, help="real reference corpus")
    sp.add_argument("--generated", default=None, help="generated corpus to evaluate")
    sp.add_argument("--molip", default=None)
    sp.add_argument("--vae", default=None, help="with --diffusion: also compute multimodality")
    sp.add_argument("--diffusion", default=None)
    sp.add_argument("--out", required=True)
    sp.add_argument("--pool-size", type=int, default=32)
    sp.add_argument("--diversity-pairs", type=int, default=100)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--steps", type=int, default=50)
    sp.add_argument("--guidance", type=float, default=7.5)
    sp.add_argument("--train-steps", type=int, default=1000)
    sp.add_argument("--length", type=int, default=72)
    sp.add_argument("--mm-texts", type=int, default=4)
    sp.add_argument("--mm-per-text", type=int, default=5)
    sp.add_argument("--mm-pairs", type=int, default=6)
    sp.set_defaults(fn=cmd_evaluate)

    sp = sub.add_parser("render", help="render one sequence to SVG frames")
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--index", type=int, default=0)
    sp.add_argument("--stride", type=int, default=1)
    sp.add_argument("--conf-threshold", type=float, default=0.3)
    sp.set_defaults(fn=cmd_render)

    return parser


def dispatch(argv: list[str]) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.fn(args)
    except (M2dError, ValueError, IndexError, OSError) as err:
        print(f"m2d {args.command}: error: {err}", file=sys.stderr)
        return 1


def main() -> int:
    return dispatch(sys.argv[1:])
