"""Procedural toy speech world.

Each text symbol maps bijectively to a fixed run of speech tokens, so the
transcript of any token sequence is exactly recoverable and CER is an
exact oracle. Each speech token carries a fixed base frame pattern; the
frames of a turn additionally carry a constant per-speaker offset derived
from the speaker embedding, so generated frames reveal who spoke without
any boundary labels.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np

from .sequence import DialogueScript, SpeakerProfile

UNKNOWN_SYMBOL = -1


class ToyTaskError(ValueError):
    pass


@dataclass(frozen=True)
class ToyWorldConfig:
    text_vocab: int = 32
    codebook_size: int = 125
    tokens_per_symbol: int = 2
    frames_per_token: int = 4
    d_mel: int = 8
    d_spk: int = 8
    speaker_pool: int = 12
    max_speakers: int = 8
    max_turns: int = 6
    turn_len_min: int = 2
    turn_len_max: int = 4
    offset_scale: float = 1.0
    base_scale: float = 1.0
    token_noise: float = 0.0  # P(train token corrupted); frames stay clean
    seed: int = 0
    # stage-2 speaker-count weights for N = 1..8, echoing the skew toward
    # fewer speakers in long-form data
    speaker_count_weights: tuple[float, ...] = (0.30, 0.25, 0.15, 0.10, 0.08, 0.05, 0.04, 0.03)


@dataclass(frozen=True)
class ToySample:
    script: DialogueScript
    profiles: tuple[SpeakerProfile, ...]
    global_speakers: tuple[int, ...]  # pool id per dialogue-local tag
    tokens: tuple[int, ...]
    frames: np.ndarray  # [len(tokens) * frames_per_token, d_mel]
    turn_token_spans: tuple[tuple[int, int], ...]

    def __post_init__(self):
        if len(self.tokens) == 0 or self.frames.shape[0] % len(self.tokens):
            raise ToyTaskError("frame count must be token count x frames_per_token")

    @property
    def key(self):
        return (self.script.turns, self.global_speakers)


class ToyWorld:
    """Deterministic world: token map, frame patterns, speaker pool."""

    def __init__(self, cfg: ToyWorldConfig):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        # injective symbol -> token tuple map
        self.symbol_to_tokens: dict[int, tuple[int, ...]] = {}
        used: set[tuple[int, ...]] = set()
        for sym in range(cfg.text_vocab):
            while True:
                toks = tuple(int(t) for t in rng.integers(0, cfg.codebook_size,
                                                          size=cfg.tokens_per_symbol))
                if toks not in used:
                    break
            used.add(toks)
            self.symbol_to_tokens[sym] = toks
        self.tokens_to_symbol = {v: k for k, v in self.symbol_to_tokens.items()}
        self.base_patterns = rng.normal(
            scale=cfg.base_scale, size=(cfg.codebook_size, cfg.frames_per_token, cfg.d_mel)
        ).astype(np.float32)
        self.speaker_embeddings = rng.normal(
            size=(cfg.speaker_pool, cfg.d_spk)
        ).astype(np.float32)

    def speaker_offset(self, pool_id: int) -> np.ndarray:
        e = self.speaker_embeddings[pool_id]
        return (self.cfg.offset_scale * e[: self.cfg.d_mel]).astype(np.float32)

    # -- text <-> tokens ----------------------------------------------------
    def symbols_to_tokens(self, symbols) -> list[int]:
        out: list[int] = []
        for s in symbols:
            out.extend(self.symbol_to_tokens[int(s)])
        return out

    def tokens_to_symbols(self, tokens) -> list[int]:
        k = self.cfg.tokens_per_symbol
        tokens = [int(t) for t in tokens]
        out = []
        for i in range(0, len(tokens) - len(tokens) % k, k):
            out.append(self.tokens_to_symbol.get(tuple(tokens[i : i + k]), UNKNOWN_SYMBOL))
        if len(tokens) % k:
            out.append(UNKNOWN_SYMBOL)
        return out

    # -- sample construction -------------------------------------------------
    def frames_for(self, tokens, speaker_per_token) -> np.ndarray:
        rows = []
        for tok, spk in zip(tokens, speaker_per_token):
            rows.append(self.base_patterns[tok] + self.speaker_offset(spk)[None, :])
        return np.concatenate(rows, axis=0).astype(np.float32)

    def make_sample(self, rng: np.random.Generator, n_speakers: int, n_turns: int,
                    token_noise: float | None = None) -> ToySample:
        cfg = self.cfg
        noise = cfg.token_noise if token_noise is None else token_noise
        pool = rng.choice(cfg.speaker_pool, size=n_speakers, replace=False)
        profiles = tuple(
            SpeakerProfile.make(tag, self.speaker_embeddings[pool[tag]])
            for tag in range(n_speakers)
        )
        turns = []
        # cover every speaker once in a random order (when turns allow) so that
        # position never predicts the speaker; remaining turns are random
        coverage = rng.permutation(n_speakers) if n_turns >= n_speakers else None
        for j in range(n_turns):
            if coverage is not None and j < n_speakers:
                spk = int(coverage[j])
            else:
                spk = int(rng.integers(n_speakers))
            length = int(rng.integers(cfg.turn_len_min, cfg.turn_len_max + 1))
            text = tuple(int(s) for s in rng.integers(0, cfg.text_vocab, size=length))
            turns.append((spk, text))
        script = DialogueScript.make(turns, n_speakers)

        tokens: list[int] = []
        speaker_per_token: list[int] = []
        spans = []
        for spk, text in script.turns:
            start = len(tokens)
            turn_tokens = self.symbols_to_tokens(text)
            tokens.extend(turn_tokens)
            speaker_per_token.extend([int(pool[spk])] * len(turn_tokens))
            spans.append((start, len(tokens)))
        # frames always reflect the clean tokens; the token targets may carry
        # tokenizer-style corruption so acoustics are the more faithful signal
        frames = self.frames_for(tokens, speaker_per_token)
        if noise > 0:
            flip = rng.random(len(tokens)) < noise
            repl = rng.integers(0, cfg.codebook_size, size=len(tokens))
            tokens = [int(r) if f else t for t, f, r in zip(tokens, flip, repl)]
        return ToySample(
            script=script,
            profiles=profiles,
            global_speakers=tuple(int(p) for p in pool),
            tokens=tuple(tokens),
            frames=frames,
            turn_token_spans=tuple(spans),
        )

    def reference_symbols(self, script: DialogueScript) -> list[int]:
        out: list[int] = []
        for _, text in script.turns:
            out.extend(text)
        return out

    def transcribe_frames(self, frames: np.ndarray, candidates) -> list[int]:
        """Toy ASR: nearest (token, speaker-offset) per frame block, then invert.

        ``candidates`` are the pool ids that may speak; trailing partial
        blocks are dropped. The speaker is matched jointly with the token so
        transcription needs no boundary information.
        """
        r = self.cfg.frames_per_token
        offs = np.stack([self.speaker_offset(c) for c in candidates])  # [S, d]
        flat = self.base_patterns.reshape(self.cfg.codebook_size, r * self.cfg.d_mel)
        tokens = []
        for i in range(frames.shape[0] // r):
            block = frames[i * r : (i + 1) * r]
            # residual against every candidate offset; best (token, speaker)
            best = None
            for off in offs:
                resid = (block - off[None, :]).reshape(1, r * self.cfg.d_mel)
                d2 = ((flat - resid) ** 2).sum(axis=1)
                tok = int(np.argmin(d2))
                if best is None or d2[tok] < best[0]:
                    best = (float(d2[tok]), tok)
            tokens.append(best[1])
        return self.tokens_to_symbols(tokens)

    def identify_speaker(self, frames: np.ndarray, tokens, candidates) -> int:
        """Nearest-offset speaker for a frame span given its decoded tokens.

        ``candidates`` are pool ids; returns the best matching pool id.
        """
        r = self.cfg.frames_per_token
        resid = []
        for i, tok in enumerate(tokens):
            span = frames[i * r : (i + 1) * r]
            if span.shape[0] < r:
                break
            if 0 <= int(tok) < self.cfg.codebook_size:
                resid.append(span - self.base_patterns[int(tok)])
        if not resid:
            return int(candidates[0])
        mean_resid = np.concatenate(resid, axis=0).mean(axis=0)
        dists = [
            float(np.linalg.norm(mean_resid - self.speaker_offset(c))) for c in candidates
        ]
        return int(candidates[int(np.argmin(dists))])


@dataclass
class StageSpec:
    name: str
    max_speakers: int
    max_turns: int
    steps: int


def draw_speaker_count(rng: np.random.Generator, cfg: ToyWorldConfig, cap: int) -> int:
    w = np.asarray(cfg.speaker_count_weights[:cap], dtype=np.float64)
    return int(rng.choice(np.arange(1, cap + 1), p=w / w.sum()))


def gen_stream(world: ToyWorld, stage: StageSpec, seed: int, exclude: frozenset = frozenset()):
    """Endless deterministic sample stream for one curriculum stage."""
    # crc32, not hash(): str hashing is salted per process and would make
    # the stream (and thus training) irreproducible across runs
    rng = np.random.default_rng([seed, zlib.crc32(stage.name.encode())])
    while True:
        if stage.max_speakers == 1:
            n_spk, n_turns = 1, 1
        else:
            n_spk = draw_speaker_count(rng, world.cfg, stage.max_speakers)
            lo = min(max(1, n_spk), stage.max_turns)
            n_turns = int(rng.integers(lo, stage.max_turns + 1))
        sample = world.make_sample(rng, n_spk, n_turns)
        if sample.key in exclude:
            continue
        yield sample


def stage_specs(world_cfg: ToyWorldConfig, stage1_steps: int, stage2_steps: int):
    return (
        StageSpec("stage1", max_speakers=1, max_turns=1, steps=stage1_steps),
        StageSpec("stage2", max_speakers=world_cfg.max_speakers,
                  max_turns=world_cfg.max_turns, steps=stage2_steps),
    )


def make_eval_prompts(world: ToyWorld, n: int, seed: int, n_speakers=None, n_turns=None):
    """Held-out prompts; callers exclude their keys from training streams."""
    rng = np.random.default_rng([seed, 0xE7A1])
    prompts = []
    keys = set()
    while len(prompts) < n:
        spk = n_speakers if n_speakers is not None else draw_speaker_count(
            rng, world.cfg, world.cfg.max_speakers)
        turns = n_turns if n_turns is not None else int(
            rng.integers(max(1, spk), world.cfg.max_turns + 1))
        sample = world.make_sample(rng, spk, turns, token_noise=0.0)
        if sample.key in keys:
            continue
        keys.add(sample.key)
        prompts.append(sample)
    return prompts, frozenset(keys)
