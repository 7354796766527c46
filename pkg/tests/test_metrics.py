import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flowtts.metrics import (
    MetricError,
    MetricReport,
    SpeakerTranscript,
    cer,
    cpwer,
    edit_distance,
    parse_transcripts,
    token_error_rate,
    wer,
)


def oracle_distance(ref, hyp):
    """Plain Levenshtein DP with explicit backtrace recount (independent path)."""
    nr, nh = len(ref), len(hyp)
    dp = [[0] * (nh + 1) for _ in range(nr + 1)]
    for i in range(nr + 1):
        dp[i][0] = i
    for j in range(nh + 1):
        dp[0][j] = j
    for i in range(1, nr + 1):
        for j in range(1, nh + 1):
            sub = dp[i - 1][j - 1] + (ref[i - 1] != hyp[j - 1])
            dp[i][j] = min(sub, dp[i - 1][j] + 1, dp[i][j - 1] + 1)
    # backtrace preferring diagonal moves
    i, j = nr, nh
    s = d = ins = 0
    while i > 0 or j > 0:
        if i > 0 and j > 0 and dp[i][j] == dp[i - 1][j - 1] + (ref[i - 1] != hyp[j - 1]):
            s += ref[i - 1] != hyp[j - 1]
            i, j = i - 1, j - 1
        elif i > 0 and dp[i][j] == dp[i - 1][j] + 1:
            d += 1
            i -= 1
        else:
            ins += 1
            j -= 1
    return s, d, ins


def test_edit_distance_basics():
    assert edit_distance("abc", "abc") == (0, 0, 0)
    assert edit_distance(["a", "b"], ["a", "b", "c"]) == (0, 0, 1)
    assert edit_distance("abcd", "abxd") == (1, 0, 0)
    assert edit_distance("abc", "") == (0, 3, 0)
    assert edit_distance("", "xy") == (0, 0, 2)
    # tie-break prefers substitution over del+ins
    assert edit_distance("a", "b") == (1, 0, 0)


def test_edit_distance_matches_dp_oracle_on_random_pairs():
    rng = np.random.default_rng(0)
    for _ in range(200):
        ref = [int(x) for x in rng.integers(0, 4, size=rng.integers(0, 10))]
        hyp = [int(x) for x in rng.integers(0, 4, size=rng.integers(0, 10))]
        s, d, i = edit_distance(ref, hyp)
        os_, od, oi = oracle_distance(ref, hyp)
        assert s + d + i == os_ + od + oi
        # counts are individually consistent with a valid alignment
        assert d - i == len(ref) - len(hyp)


def test_cer_wer_values():
    assert cer("abcd", "abcd") == 0.0
    assert cer("abcd", "abxd") == 0.25
    assert cer("abcd", "") == 1.0
    assert wer("the cat sat", "the cat sat") == 0.0
    assert wer("a b c d", "a b x d") == 0.25
    with pytest.raises(MetricError):
        cer("", "abc")


def test_token_error_rate():
    assert token_error_rate([1, 2, 3], [1, 2, 3]) == 0.0
    assert token_error_rate([1, 2, 3, 4], [1, 9, 3, 4]) == 0.25


def ts(spk, *utts):
    return SpeakerTranscript.make(spk, [(c, toks.split()) for c, toks in utts])


def test_speaker_transcript_requires_increasing_chrono():
    with pytest.raises(MetricError):
        SpeakerTranscript.make("a", [(2, ("x",)), (1, ("y",))])


def test_cpwer_permuted_labels_score_zero():
    refs = [ts("A", (0, "a b"), (2, "c")), ts("B", (1, "d e"))]
    hyps = [ts("X", (0, "d e")), ts("Y", (0, "a b"), (1, "c"))]
    assert cpwer(refs, hyps).rate == 0.0


def test_cpwer_worked_example_with_padding():
    refs = [ts("A", (0, "a b")), ts("B", (1, "c"))]
    hyps = [ts("H", (0, "a b c"))]
    report = cpwer(refs, hyps)
    # best assignment: H vs A costs 1 insertion; empty vs B costs 1 deletion
    assert report.rate == pytest.approx(2 / 3)
    assert report.substitutions + report.deletions + report.insertions == 2


def test_cpwer_single_speaker_equals_plain_wer():
    refs = [ts("A", (0, "the cat sat"), (1, "on the mat"))]
    hyps = [ts("B", (0, "the cat sat"), (1, "on a mat"))]
    ref_cat = "the cat sat on the mat"
    hyp_cat = "the cat sat on a mat"
    assert cpwer(refs, hyps).rate == pytest.approx(wer(ref_cat, hyp_cat))


def test_cpwer_rejects_too_many_speakers():
    refs = [ts(str(k), (0, "x")) for k in range(9)]
    with pytest.raises(MetricError):
        cpwer(refs, refs)


def brute_force_assignment(refs, hyps):
    """Independent enumerator: grow assignments recursively over hyp slots."""
    ref_cat = [r.concatenated() for r in refs]
    hyp_cat = [h.concatenated() for h in hyps]
    n = max(len(ref_cat), len(hyp_cat))
    ref_cat += [[]] * (n - len(ref_cat))
    hyp_cat += [[]] * (n - len(hyp_cat))

    best = [None]

    def recurse(r_idx, used, total):
        if r_idx == n:
            if best[0] is None or total < best[0]:
                best[0] = total
            return
        for h_idx in range(n):
            if h_idx in used:
                continue
            s, d, i = oracle_distance(ref_cat[r_idx], hyp_cat[h_idx])
            recurse(r_idx + 1, used | {h_idx}, total + s + d + i)

    recurse(0, frozenset(), 0)
    total_ref = sum(len(r) for r in ref_cat)
    return best[0] / total_ref


def random_transcripts(rng, n_spk, vocab=6):
    out = []
    for k in range(n_spk):
        n_utt = int(rng.integers(1, 4))
        utts = []
        for c in range(n_utt):
            toks = [str(int(t)) for t in rng.integers(0, vocab, size=rng.integers(1, 5))]
            utts.append((c, toks))
        out.append(SpeakerTranscript.make(f"s{k}", utts))
    return out


def test_cpwer_equals_independent_brute_force_on_random_cases():
    rng = np.random.default_rng(42)
    for _ in range(100):
        refs = random_transcripts(rng, int(rng.integers(2, 5)))
        hyps = random_transcripts(rng, int(rng.integers(2, 5)))
        assert cpwer(refs, hyps).rate == pytest.approx(brute_force_assignment(refs, hyps))


def test_cpwer_label_permutation_invariance():
    rng = np.random.default_rng(7)
    refs = random_transcripts(rng, 3)
    hyps = random_transcripts(rng, 3)
    base = cpwer(refs, hyps).rate
    for perm in itertools.permutations(range(3)):
        assert cpwer([refs[i] for i in perm], hyps).rate == pytest.approx(base)
        assert cpwer(refs, [hyps[i] for i in perm]).rate == pytest.approx(base)


def test_cpwer_minimality_against_fixed_assignments():
    rng = np.random.default_rng(8)
    refs = random_transcripts(rng, 3)
    hyps = random_transcripts(rng, 3)
    best = cpwer(refs, hyps).rate
    total_ref = sum(len(r.concatenated()) for r in refs)
    for perm in itertools.permutations(range(3)):
        total = 0
        for r, h_idx in zip(refs, perm):
            s, d, i = edit_distance(r.concatenated(), hyps[h_idx].concatenated())
            total += s + d + i
        assert best <= total / total_ref + 1e-12


def test_parse_transcripts():
    text = "0\tA\ta b c\n1\tB\td e\n2\tA\tf\n"
    out = parse_transcripts(text)
    assert [t.speaker_id for t in out] == ["A", "B"]
    assert out[0].concatenated() == ["a", "b", "c", "f"]


def test_metric_report_rate_definition():
    r = MetricReport.from_counts(1, 2, 3, 4)
    assert r.rate == pytest.approx(6 / 4)


@settings(max_examples=60, deadline=None)
@given(
    st.lists(st.integers(0, 3), min_size=1, max_size=8),
    st.lists(st.integers(0, 3), min_size=0, max_size=8),
)
def test_edit_distance_total_matches_oracle_property(ref, hyp):
    s, d, i = edit_distance(ref, hyp)
    os_, od, oi = oracle_distance(ref, hyp)
    assert s + d + i == os_ + od + oi
