"""Edit-distance metrics: CER, WER, and speaker-permutation-minimized WER.

cpWER concatenates each speaker's transcripts chronologically, pads the
side with fewer speakers using empty pseudo-speakers, and minimizes the
total WER over all assignments of hypothesis speakers to reference
speakers (exhaustive search, at most 8 speakers).
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

MAX_SPEAKERS = 8


class MetricError(ValueError):
    pass


def edit_distance(ref, hyp) -> tuple[int, int, int]:
    """Minimal (substitutions, deletions, insertions) under unit costs.

    Ties prefer substitution over a deletion+insertion pair.
    """
    ref = list(ref)
    hyp = list(hyp)
    nr, nh = len(ref), len(hyp)
    # cell = (total ops, indel ops); lexicographic min prefers substitutions
    INF = (1 << 30, 1 << 30)
    prev = [(j, j) for j in range(nh + 1)]
    ops_prev = [(0, 0, j) for j in range(nh + 1)]  # (sub, del, ins)
    for i in range(1, nr + 1):
        cur = [INF] * (nh + 1)
        ops_cur = [(0, 0, 0)] * (nh + 1)
        cur[0] = (i, i)
        ops_cur[0] = (0, i, 0)
        for j in range(1, nh + 1):
            match = ref[i - 1] == hyp[j - 1]
            c_diag = (prev[j - 1][0] + (0 if match else 1),
                      prev[j - 1][1])
            c_del = (prev[j][0] + 1, prev[j][1] + 1)
            c_ins = (cur[j - 1][0] + 1, cur[j - 1][1] + 1)
            best = min(c_diag, c_del, c_ins)
            cur[j] = best
            if best == c_diag:
                s, d, ins = ops_prev[j - 1]
                ops_cur[j] = (s + (0 if match else 1), d, ins)
            elif best == c_del:
                s, d, ins = ops_prev[j]
                ops_cur[j] = (s, d + 1, ins)
            else:
                s, d, ins = ops_cur[j - 1]
                ops_cur[j] = (s, d, ins + 1)
        prev = cur
        ops_prev = ops_cur
    return ops_prev[nh]


def _rate(ref_tokens, hyp_tokens) -> float:
    if not ref_tokens:
        raise MetricError("empty reference: rate undefined")
    s, d, i = edit_distance(ref_tokens, hyp_tokens)
    return (s + d + i) / len(ref_tokens)


def cer(ref: str, hyp: str) -> float:
    """Character-level error rate."""
    return _rate(list(ref), list(hyp))


def wer(ref: str, hyp: str) -> float:
    """Whitespace-word-level error rate."""
    return _rate(ref.split(), hyp.split())


def token_error_rate(ref, hyp) -> float:
    """Error rate over arbitrary token sequences (toy-symbol CER)."""
    return _rate(list(ref), list(hyp))


@dataclass(frozen=True)
class SpeakerTranscript:
    speaker_id: str
    utterances: tuple[tuple[int, tuple[str, ...]], ...]  # (chrono index, tokens)

    def __post_init__(self):
        idxs = [c for c, _ in self.utterances]
        if any(b <= a for a, b in zip(idxs, idxs[1:])):
            raise MetricError("chronological indices must be strictly increasing")

    @classmethod
    def make(cls, speaker_id, utterances) -> "SpeakerTranscript":
        return cls(
            speaker_id=str(speaker_id),
            utterances=tuple(
                (int(c), tuple(str(t) for t in toks)) for c, toks in utterances
            ),
        )

    def concatenated(self) -> list[str]:
        out: list[str] = []
        for _, toks in sorted(self.utterances):
            out.extend(toks)
        return out


@dataclass(frozen=True)
class MetricReport:
    substitutions: int
    deletions: int
    insertions: int
    ref_len: int
    rate: float
    permutation: tuple[int, ...] = ()  # hyp index assigned to each ref slot

    @classmethod
    def from_counts(cls, s, d, i, ref_len, permutation=()) -> "MetricReport":
        if ref_len == 0:
            raise MetricError("empty reference: rate undefined")
        return cls(s, d, i, ref_len, (s + d + i) / ref_len, tuple(permutation))


def cpwer(refs: list[SpeakerTranscript], hyps: list[SpeakerTranscript]) -> MetricReport:
    """Minimum-over-speaker-assignments WER of per-speaker concatenations."""
    if len(refs) > MAX_SPEAKERS or len(hyps) > MAX_SPEAKERS:
        raise MetricError(f"more than {MAX_SPEAKERS} speakers is unsupported")
    ref_cat = [r.concatenated() for r in refs]
    hyp_cat = [h.concatenated() for h in hyps]
    n = max(len(ref_cat), len(hyp_cat))
    ref_cat += [[] for _ in range(n - len(ref_cat))]
    hyp_cat += [[] for _ in range(n - len(hyp_cat))]

    total_ref = sum(len(r) for r in ref_cat)
    if total_ref == 0:
        raise MetricError("empty reference: rate undefined")

    cost = [[edit_distance(r, h) for h in hyp_cat] for r in ref_cat]
    best = None
    best_perm = None
    for perm in itertools.permutations(range(n)):
        s = d = i = 0
        for r_idx, h_idx in enumerate(perm):
            cs, cd, ci = cost[r_idx][h_idx]
            s, d, i = s + cs, d + cd, i + ci
        total = s + d + i
        if best is None or total < best[0]:
            best = (total, s, d, i)
            best_perm = perm
    _, s, d, i = best
    return MetricReport.from_counts(s, d, i, total_ref, best_perm)


# -- transcript file ingestion ----------------------------------------------

def parse_transcripts(text: str) -> list[SpeakerTranscript]:
    """Line format: "<chrono_index>\\t<speaker_id>\\t<text>"."""
    by_spk: dict[str, list] = {}
    for ln in text.splitlines():
        if not ln.strip():
            continue
        parts = ln.split("\t")
        if len(parts) != 3:
            raise MetricError(f"bad transcript line {ln!r}")
        chrono, spk, body = parts
        by_spk.setdefault(spk, []).append((int(chrono), tuple(body.split())))
    return [SpeakerTranscript.make(spk, utts) for spk, utts in sorted(by_spk.items())]
