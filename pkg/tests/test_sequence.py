import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flowtts.sequence import (
    SPEECH_TOK,
    DialogueScript,
    SequenceError,
    SpeakerProfile,
    build_sequence,
    loss_mask,
    parse,
    parse_script,
    render,
    render_script,
)


def make_profiles(n, d_spk=4, seed=0):
    rng = np.random.default_rng(seed)
    return [SpeakerProfile.make(k, rng.normal(size=d_spk)) for k in range(n)]


def test_single_speaker_element_count():
    profiles = make_profiles(1)
    script = DialogueScript.make([(0, (1, 2, 3))], 1)
    seq = build_sequence(profiles, script, [5, 6, 7, 8, 9], use_spk_embeddings=True)
    assert len(seq) == 2 + 4 + 5 == 11


def test_embeddings_off_prefix_has_tags_only():
    profiles = make_profiles(2)
    script = DialogueScript.make([(0, (1,)), (1, (2,))], 2)
    seq = build_sequence(profiles, script, [3], use_spk_embeddings=False)
    assert seq.p_span == (0, 2)
    assert all(e.kind == "SPK_TAG" for e in seq.elements[:2])


def test_speech_run_is_one_contiguous_interval():
    profiles = make_profiles(2)
    script = DialogueScript.make([(0, (1, 2)), (1, (3,))], 2)
    seq = build_sequence(profiles, script, [9, 8, 7])
    kinds = [e.kind for e in seq.elements]
    first = kinds.index(SPEECH_TOK)
    assert all(k == SPEECH_TOK for k in kinds[first:])
    assert all(k != SPEECH_TOK for k in kinds[:first])


def test_loss_mask_counts():
    profiles = make_profiles(1)
    script = DialogueScript.make([(0, (1, 2, 3))], 1)
    seq = build_sequence(profiles, script, [5, 6, 7, 8, 9])
    mask = loss_mask(seq)
    assert mask.sum() == 5
    # shifted: each true position predicts the next element
    for p in np.flatnonzero(mask):
        assert seq.elements[p + 1].kind == SPEECH_TOK

    seq1 = build_sequence(profiles, script, [5])
    assert loss_mask(seq1).sum() == 1


@settings(max_examples=100, deadline=None)
@given(st.data())
def test_loss_mask_equals_speech_count_property(data):
    n_spk = data.draw(st.integers(1, 4))
    n_turns = data.draw(st.integers(1, 5))
    turns = [
        (data.draw(st.integers(0, n_spk - 1)),
         tuple(data.draw(st.lists(st.integers(0, 9), min_size=1, max_size=4))))
        for _ in range(n_turns)
    ]
    speech = data.draw(st.lists(st.integers(0, 99), min_size=1, max_size=12))
    seq = build_sequence(make_profiles(n_spk), DialogueScript.make(turns, n_spk), speech)
    assert loss_mask(seq).sum() == len(speech)
    expected = 2 * n_spk + sum(1 + len(t) for _, t in turns) + len(speech)
    assert len(seq) == expected


def test_build_rejects_bad_input():
    profiles = make_profiles(1)
    script = DialogueScript.make([(0, (1,))], 1)
    with pytest.raises(SequenceError):
        build_sequence(profiles, script, [])
    with pytest.raises(SequenceError):
        DialogueScript.make([(1, (1,))], 1)
    with pytest.raises(SequenceError):
        DialogueScript.make([(0, ())], 1)


def test_render_parse_roundtrip():
    profiles = make_profiles(3, seed=5)
    script = DialogueScript.make([(0, (1, 2)), (2, (3,)), (1, (4, 5, 6))], 3)
    seq = build_sequence(profiles, script, [10, 11, 12, 13])
    assert parse(render(seq)) == seq


def test_script_text_roundtrip():
    script = DialogueScript.make([(0, (3, 17, 5)), (1, (2,))], 2)
    assert parse_script(render_script(script)) == script


def test_tag_referential_integrity():
    profiles = make_profiles(2)
    script = DialogueScript.make([(0, (1,)), (1, (2,))], 2)
    seq = build_sequence(profiles, script, [7])
    profile_tags = {p.tag for p in seq.profiles}
    t_tags = {e.value for e in seq.elements[slice(*seq.t_span)] if e.kind == "SPK_TAG"}
    assert t_tags <= profile_tags


def test_tag_renaming_isomorphism():
    profiles = make_profiles(2, seed=1)
    script = DialogueScript.make([(0, (1,)), (1, (2,))], 2)
    seq_a = build_sequence(profiles, script, [7, 8])

    swapped = [SpeakerProfile(0, profiles[1].embedding), SpeakerProfile(1, profiles[0].embedding)]
    script_b = DialogueScript.make([(1, (1,)), (0, (2,))], 2)
    seq_b = build_sequence(swapped, script_b, [7, 8])

    rename = {0: 1, 1: 0}
    # P is stored in tag order, so renaming permutes its pairs as a set
    pairs_a = {(rename[p.tag], p.embedding) for p in seq_a.profiles}
    pairs_b = {(p.tag, p.embedding) for p in seq_b.profiles}
    assert pairs_a == pairs_b
    # T and S are element-wise isomorphic under the renaming
    for ea, eb in zip(seq_a.elements[seq_a.p_span[1]:], seq_b.elements[seq_b.p_span[1]:]):
        assert ea.kind == eb.kind
        if ea.kind in ("SPK_TAG", "SPK_EMB"):
            assert rename[ea.value] == eb.value
        else:
            assert ea.value == eb.value
