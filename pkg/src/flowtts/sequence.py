"""Unified multi-speaker multi-turn input sequences.

A sequence is the concatenation [P; T; S]: a speaker-profile prefix
(tag, embedding pairs), turn-tagged text, then one unsegmented speech
token run. Losses apply to speech positions only, shifted for
next-token prediction.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

SPK_TAG = "SPK_TAG"
SPK_EMB = "SPK_EMB"
TEXT_TOK = "TEXT_TOK"
SPEECH_TOK = "SPEECH_TOK"

_KINDS = (SPK_TAG, SPK_EMB, TEXT_TOK, SPEECH_TOK)


class SequenceError(ValueError):
    pass


@dataclass(frozen=True)
class SpeakerProfile:
    tag: int
    embedding: tuple[float, ...]

    @classmethod
    def make(cls, tag: int, embedding) -> "SpeakerProfile":
        return cls(tag=int(tag), embedding=tuple(float(x) for x in np.asarray(embedding, dtype=np.float32)))

    @property
    def embedding_array(self) -> np.ndarray:
        return np.asarray(self.embedding, dtype=np.float32)


@dataclass(frozen=True)
class DialogueScript:
    turns: tuple[tuple[int, tuple[int, ...]], ...]  # (speaker index, text tokens)
    num_speakers: int

    def __post_init__(self):
        if self.num_turns < 1:
            raise SequenceError("script needs at least one turn")
        for spk, toks in self.turns:
            if not 0 <= spk < self.num_speakers:
                raise SequenceError(f"speaker index {spk} out of range")
            if len(toks) == 0:
                raise SequenceError("empty turn text")

    @classmethod
    def make(cls, turns, num_speakers: int) -> "DialogueScript":
        return cls(
            turns=tuple((int(s), tuple(int(t) for t in toks)) for s, toks in turns),
            num_speakers=int(num_speakers),
        )

    @property
    def num_turns(self) -> int:
        return len(self.turns)


@dataclass(frozen=True)
class Element:
    kind: str
    value: int  # token id, speaker tag, or (for SPK_EMB) the speaker tag


@dataclass(frozen=True)
class UnifiedSequence:
    elements: tuple[Element, ...]
    profiles: tuple[SpeakerProfile, ...]
    p_span: tuple[int, int]
    t_span: tuple[int, int]
    s_span: tuple[int, int]
    use_spk_embeddings: bool

    def __len__(self) -> int:
        return len(self.elements)

    @property
    def speech_tokens(self) -> list[int]:
        lo, hi = self.s_span
        return [e.value for e in self.elements[lo:hi]]

    @property
    def num_speech(self) -> int:
        return self.s_span[1] - self.s_span[0]

    def embedding_for(self, tag: int) -> np.ndarray:
        return self.profiles[tag].embedding_array


def build_sequence(
    profiles: list[SpeakerProfile],
    script: DialogueScript,
    speech_tokens,
    use_spk_embeddings: bool = True,
) -> UnifiedSequence:
    """Assemble [P; T; S] from profiles, a script, and the speech-token run."""
    speech_tokens = [int(t) for t in speech_tokens]
    if not speech_tokens:
        raise SequenceError("speech token run is empty")
    tags = [p.tag for p in profiles]
    if tags != list(range(len(profiles))):
        raise SequenceError("profile tags must be contiguous from 0 in order")
    if script.num_speakers > len(profiles):
        raise SequenceError("script references speakers without profiles")
    dims = {len(p.embedding) for p in profiles}
    if len(dims) > 1:
        raise SequenceError("speaker embedding dimensions differ")

    elements: list[Element] = []
    for p in profiles:
        elements.append(Element(SPK_TAG, p.tag))
        if use_spk_embeddings:
            elements.append(Element(SPK_EMB, p.tag))
    p_end = len(elements)
    for spk, toks in script.turns:
        elements.append(Element(SPK_TAG, spk))
        elements.extend(Element(TEXT_TOK, t) for t in toks)
    t_end = len(elements)
    elements.extend(Element(SPEECH_TOK, t) for t in speech_tokens)

    return UnifiedSequence(
        elements=tuple(elements),
        profiles=tuple(profiles),
        p_span=(0, p_end),
        t_span=(p_end, t_end),
        s_span=(t_end, len(elements)),
        use_spk_embeddings=use_spk_embeddings,
    )


def loss_mask(seq: UnifiedSequence) -> np.ndarray:
    """True at positions whose next element is a speech token."""
    mask = np.zeros(len(seq.elements), dtype=bool)
    lo, hi = seq.s_span
    mask[lo - 1 : hi - 1] = True
    return mask


# -- serialization ----------------------------------------------------------

_FORMAT = "USEQ1"


def render(seq: UnifiedSequence) -> str:
    lines = [
        f"{_FORMAT} n_speakers={len(seq.profiles)} "
        f"spk_emb={int(seq.use_spk_embeddings)} "
        f"spans={seq.p_span[1]},{seq.t_span[1]},{seq.s_span[1]}"
    ]
    for p in seq.profiles:
        vals = " ".join(repr(float(x)) for x in p.embedding)
        lines.append(f"PROF {p.tag} {vals}")
    for e in seq.elements:
        lines.append(f"{e.kind} {e.value}")
    return "\n".join(lines) + "\n"


def parse(text: str) -> UnifiedSequence:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    head = lines[0].split()
    if head[0] != _FORMAT:
        raise SequenceError(f"bad sequence header {head[0]!r}")
    fields = dict(kv.split("=") for kv in head[1:])
    n_speakers = int(fields["n_speakers"])
    use_emb = bool(int(fields["spk_emb"]))
    p_end, t_end, s_end = (int(x) for x in fields["spans"].split(","))

    profiles = []
    elements = []
    for ln in lines[1:]:
        parts = ln.split()
        if parts[0] == "PROF":
            profiles.append(
                SpeakerProfile(tag=int(parts[1]), embedding=tuple(float(v) for v in parts[2:]))
            )
        elif parts[0] in _KINDS:
            elements.append(Element(parts[0], int(parts[1])))
        else:
            raise SequenceError(f"unknown record {parts[0]!r}")
    if len(profiles) != n_speakers:
        raise SequenceError("profile count mismatch")
    return UnifiedSequence(
        elements=tuple(elements),
        profiles=tuple(profiles),
        p_span=(0, p_end),
        t_span=(p_end, t_end),
        s_span=(t_end, s_end),
        use_spk_embeddings=use_emb,
    )


def parse_script(text: str, num_speakers: int | None = None) -> DialogueScript:
    """Line format: "SPK<k>: <space-separated integer text tokens>"."""
    turns = []
    max_spk = -1
    for ln in text.splitlines():
        ln = ln.strip()
        if not ln:
            continue
        head, _, rest = ln.partition(":")
        if not head.startswith("SPK"):
            raise SequenceError(f"bad script line {ln!r}")
        spk = int(head[3:])
        toks = tuple(int(t) for t in rest.split())
        turns.append((spk, toks))
        max_spk = max(max_spk, spk)
    n = num_speakers if num_speakers is not None else max_spk + 1
    return DialogueScript.make(turns, n)


def render_script(script: DialogueScript) -> str:
    return "\n".join(
        f"SPK{spk}: " + " ".join(str(t) for t in toks) for spk, toks in script.turns
    ) + "\n"
