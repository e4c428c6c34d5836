import numpy as np
import pytest

from m2d.autodiff import Tensor
from m2d.errors import M2dError, ShapeError
from m2d.gradcheck import gradient_check
from m2d.molip import (
    HashTextEncoder,
    Molip,
    MolipConfig,
    build_vocab,
    contrastive_loss,
    embed_motion,
    embed_text,
    tokenize,
    train_molip,
)
from m2d.motion import MotionSequence, normalize_sequence
from m2d.parts import N_KEYPOINTS
from m2d.synth import SynthSpec, generate_synthetic_corpus

TOY = MolipConfig(embed_dim=8, model_dim=8, text_layers=1, motion_layers=1,
                  heads=2, max_length=16, ffn_mult=2)


def norm_seq(L=6, seed=0):
    rng = np.random.default_rng(seed)
    frames = np.zeros((L, N_KEYPOINTS, 3))
    frames[:, :, :2] = rng.uniform(-1, 1, size=(L, N_KEYPOINTS, 2))
    frames[:, :, 2] = rng.uniform(0.5, 1.0, size=(L, N_KEYPOINTS))
    return MotionSequence(frames)


class TestTokenize:
    def test_splits_and_lowercases(self):
        assert tokenize("A Person WAVES, twice!") == ["a", "person", "waves", "twice"]

    def test_empty_text_errors(self):
        with pytest.raises(M2dError, match="empty"):
            tokenize("")

    def test_no_alphanumeric_errors(self):
        with pytest.raises(M2dError, match="tokens"):
            tokenize("!!! ???")


class TestHashEncoder:
    def test_unit_norm(self):
        enc = HashTextEncoder(dim=64)
        for text in ("a person waves", "kick", "jumps up and down"):
            assert abs(np.linalg.norm(enc.embed_text(text)) - 1.0) < 1e-6

    def test_deterministic_across_instances(self):
        a = HashTextEncoder(dim=32).embed_text("wave the right hand")
        b = HashTextEncoder(dim=32).embed_text("wave the right hand")
        assert np.array_equal(a, b)

    def test_distinct_actions_are_not_collinear(self):
        enc = HashTextEncoder(dim=64)
        sim = float(enc.embed_text("wave hand") @ enc.embed_text("kick leg"))
        assert sim < 0.9

    def test_template_caption_set_separates(self):
        enc = HashTextEncoder(dim=64)
        captions = ["a person waves the right hand", "a person kicks with the right leg",
                    "someone nods their head", "clapping hands together"]
        feats = np.stack([enc.embed_text(c) for c in captions])
        sims = feats @ feats.T
        off_diag = sims[~np.eye(len(captions), dtype=bool)]
        assert off_diag.max() < 0.9


class TestContrastiveLoss:
    def test_single_pair_is_zero(self):
        f = Tensor(np.array([[1.0, 0.0]]), dtype=np.float64)
        assert contrastive_loss(f, f).item() == pytest.approx(0.0, abs=1e-12)

    def test_two_orthonormal_matched_pairs(self):
        m = Tensor(np.eye(2), dtype=np.float64)
        t = Tensor(np.eye(2), dtype=np.float64)
        expected = np.log(1 + np.exp(-1.0))
        assert contrastive_loss(m, t).item() == pytest.approx(expected, rel=1e-9)

    def test_all_identical_features_is_log_b(self):
        for B in (2, 5, 13):
            f = Tensor(np.tile(np.array([[0.6, 0.8]]), (B, 1)), dtype=np.float64)
            assert contrastive_loss(f, f).item() == pytest.approx(np.log(B), rel=1e-9)

    def test_symmetric_under_swap(self):
        rng = np.random.default_rng(0)
        m = rng.standard_normal((4, 8))
        m /= np.linalg.norm(m, axis=1, keepdims=True)
        t = rng.standard_normal((4, 8))
        t /= np.linalg.norm(t, axis=1, keepdims=True)
        a = contrastive_loss(Tensor(m, dtype=np.float64), Tensor(t, dtype=np.float64)).item()
        b = contrastive_loss(Tensor(t, dtype=np.float64), Tensor(m, dtype=np.float64)).item()
        assert a == b

    def test_batch_mismatch(self):
        with pytest.raises(ShapeError):
            contrastive_loss(Tensor(np.ones((2, 4))), Tensor(np.ones((3, 4))))

    def test_temperature_sharpens(self):
        rng = np.random.default_rng(1)
        m = rng.standard_normal((6, 8))
        m /= np.linalg.norm(m, axis=1, keepdims=True)
        warm = contrastive_loss(Tensor(m, dtype=np.float64), Tensor(m, dtype=np.float64), 1.0).item()
        cold = contrastive_loss(Tensor(m, dtype=np.float64), Tensor(m, dtype=np.float64), 0.05).item()
        assert cold < warm  # matched pairs: sharper softmax concentrates on the diagonal

    def test_gradcheck(self):
        rng = np.random.default_rng(2)
        params = {
            "m": Tensor(rng.standard_normal((3, 5)), requires_grad=True, dtype=np.float64),
            "t": Tensor(rng.standard_normal((3, 5)), requires_grad=True, dtype=np.float64),
        }

        def loss_fn():
            return contrastive_loss(params["m"], params["t"], temperature=0.7)

        worst = gradient_check(loss_fn, params, samples_per_param=5, rng=np.random.default_rng(3))
        assert worst < 1e-4


@pytest.fixture(scope="module")
def model():
    vocab = build_vocab(generate_synthetic_corpus(SynthSpec(n_sequences=9, min_length=4, max_length=6, seed=0)))
    return Molip(TOY, vocab, seed=0, dtype=np.float64)


class TestTowers:

    def test_text_unit_norm_and_determinism(self, model):
        a = model.embed_text("a person waves the right hand")
        b = model.embed_text("a person waves the right hand")
        assert abs(np.linalg.norm(a) - 1.0) < 1e-6
        assert np.array_equal(a, b)

    def test_motion_unit_norm_and_determinism(self, model):
        seq = norm_seq(L=5)
        a = embed_motion(seq, model)
        b = embed_motion(seq, model)
        assert abs(np.linalg.norm(a) - 1.0) < 1e-6
        assert np.array_equal(a, b)

    def test_unknown_words_fall_back_to_unk(self, model):
        out = model.embed_text("zzz qqq unseen words")
        assert abs(np.linalg.norm(out) - 1.0) < 1e-6

    def test_overlong_motion_rejected(self, model):
        with pytest.raises(M2dError, match="max_length"):
            embed_motion(norm_seq(L=17), model)

    def test_unnormalized_motion_rejected(self, model):
        frames = np.zeros((4, N_KEYPOINTS, 3))
        frames[:, :, :2] = 250.0
        frames[:, :, 2] = 1.0
        with pytest.raises(M2dError, match="normalized"):
            embed_motion(MotionSequence(frames), model)

    def test_free_function_delegation(self, model):
        assert np.array_equal(embed_text("jump", model), model.embed_text("jump"))
        hash_enc = HashTextEncoder(dim=16)
        assert np.array_equal(embed_text("jump", hash_enc), hash_enc.embed_text("jump"))

    def test_checkpoint_round_trip(self, model, tmp_path):
        path = tmp_path / "molip.ckpt"
        model.save(path)
        again = Molip.load(path)
        assert again.vocab == model.vocab
        a = model.embed_text("a person jumps")
        b = again.embed_text("a person jumps")
        assert np.allclose(a, b, atol=1e-5)


class TestTraining:
    def small_corpus(self, n=12):
        spec = SynthSpec(n_sequences=n, min_length=6, max_length=10, seed=2,
                         templates=("wave_right_hand", "kick"))
        return generate_synthetic_corpus(spec)

    def test_needs_two_pairs(self):
        corpus = self.small_corpus(n=1)
        with pytest.raises(M2dError, match="2"):
            train_molip(corpus, TOY, epochs=1)

    def test_needs_batch_of_two(self):
        with pytest.raises(M2dError, match="batch_size"):
            train_molip(self.small_corpus(), TOY, epochs=1, batch_size=1)

    def test_deterministic(self):
        corpus = self.small_corpus()
        _, h1 = train_molip(corpus, TOY, seed=4, epochs=2, batch_size=6)
        _, h2 = train_molip(corpus, TOY, seed=4, epochs=2, batch_size=6)
        assert h1 == h2

    def test_loss_decreases_and_classes_separate(self):
        corpus = self.small_corpus()
        model, hist = train_molip(corpus, TOY, seed=4, epochs=25, batch_size=6)
        assert hist[-1] < hist[0]

        feats, labels = [], []
        for seq, _ in corpus:
            norm, _ = normalize_sequence(seq)
            feats.append(model.embed_motion(norm))
            labels.append(seq.source_id.split("-")[1])
        feats = np.stack(feats)
        sims = feats @ feats.T
        same = np.array([[a == b for b in labels] for a in labels])
        np.fill_diagonal(same, False)
        intra = sims[same].mean()
        inter = sims[~same & ~np.eye(len(labels), dtype=bool)].mean()
        assert intra > inter

    def test_learnable_scale_variant_trains(self):
        cfg = MolipConfig(embed_dim=8, model_dim=8, text_layers=1, motion_layers=1,
                          heads=2, max_length=16, ffn_mult=2, learnable_scale=True)
        _, hist = train_molip(self.small_corpus(), cfg, seed=0, epochs=2, batch_size=6)
        assert np.isfinite(hist).all()


def test_build_vocab_sorted_and_deterministic():
    corpus = generate_synthetic_corpus(SynthSpec(n_sequences=6, min_length=4, max_length=6, seed=1))
    v1 = build_vocab(corpus)
    v2 = build_vocab(corpus)
    assert v1 == v2 == sorted(v1)
