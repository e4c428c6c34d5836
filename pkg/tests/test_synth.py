import numpy as np
import pytest

from m2d.corpus_io import write_corpus
from m2d.errors import M2dError
from m2d.parts import PART_RANGES, RIGHT_HAND_RANGE
from m2d.quality import quality_filter
from m2d.synth import (
    DEFAULT_TEMPLATE_SET,
    SynthSpec,
    TEMPLATES,
    generate_synthetic_corpus,
    mean_block_speed,
)

EIGHT = tuple(list(DEFAULT_TEMPLATE_SET)[:8])


def test_eight_templates_eight_sequences_named_actions():
    corpus = generate_synthetic_corpus(SynthSpec(n_sequences=8, seed=1, templates=EIGHT))
    assert len(corpus) == 8
    for (seq, captions), name in zip(corpus, EIGHT):
        assert name in seq.source_id
        word = TEMPLATES[name].action_word
        for caption in captions:
            assert word in caption


def test_same_seed_identical_bytes():
    spec = SynthSpec(n_sequences=6, seed=42)
    a = write_corpus(generate_synthetic_corpus(spec))
    b = write_corpus(generate_synthetic_corpus(spec))
    assert a == b


def test_different_seed_differs():
    a = write_corpus(generate_synthetic_corpus(SynthSpec(n_sequences=4, seed=1)))
    b = write_corpus(generate_synthetic_corpus(SynthSpec(n_sequences=4, seed=2)))
    assert a != b


def test_wave_right_hand_kinematic_oracle():
    spec = SynthSpec(n_sequences=5, seed=3, templates=("wave_right_hand",))
    for seq, _ in generate_synthetic_corpus(spec):
        hand = mean_block_speed(seq, slice(*RIGHT_HAND_RANGE))
        body = mean_block_speed(seq, slice(*PART_RANGES["Body"]))
        assert hand > 5 * body


def test_lengths_within_range_and_pass_quality_filter():
    spec = SynthSpec(n_sequences=12, seed=7, min_length=65, max_length=80)
    for seq, _ in generate_synthetic_corpus(spec):
        assert 65 <= seq.length <= 80
        assert quality_filter(seq).accept


def test_confidence_profile():
    corpus = generate_synthetic_corpus(SynthSpec(n_sequences=4, seed=5))
    conf = np.concatenate([seq.frames[:, :, 2].ravel() for seq, _ in corpus])
    assert conf.min() >= 0.0 and conf.max() <= 1.0
    assert (conf > 0.9).mean() > 0.8  # mostly near 1.0
    assert (conf < 0.3).mean() > 0.001  # occasional dips exist


def test_empty_template_set_errors():
    with pytest.raises(M2dError, match="empty"):
        SynthSpec(n_sequences=1, templates=())


def test_unknown_template_errors():
    with pytest.raises(M2dError, match="unknown"):
        SynthSpec(n_sequences=1, templates=("moonwalk",))


def test_every_template_moves_its_part_most():
    # each animated block clearly outpaces an unrelated static block
    probes = {
        "wave_left_hand": (slice(91, 112), slice(*PART_RANGES["Face"])),
        "nod_head": (slice(*PART_RANGES["Face"]), slice(17, 23)),
        "kick": (slice(20, 23), slice(*PART_RANGES["Face"])),
    }
    for name, (moving, still) in probes.items():
        corpus = generate_synthetic_corpus(SynthSpec(n_sequences=3, seed=11, templates=(name,)))
        for seq, _ in corpus:
            assert mean_block_speed(seq, moving) > 3 * mean_block_speed(seq, still)
