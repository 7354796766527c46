"""Causal decoder-only transformer over unified sequences.

Emits next-token logits over the speech vocabulary at positions that
predict speech tokens, and exposes the matching hidden states (taken
right before the output head) for flow-matching conditioning.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as tt
from .sequence import (
    SPEECH_TOK,
    SPK_EMB,
    SPK_TAG,
    TEXT_TOK,
    DialogueScript,
    Element,
    SpeakerProfile,
    UnifiedSequence,
    build_sequence,
    loss_mask,
)
from .tensor import NEG_INF, ParameterStore, Tensor


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ArConfig:
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    text_vocab: int = 32
    speech_vocab: int = 126  # codebook + specials (EOS last)
    n_speaker_tags: int = 16
    d_spk: int = 8
    max_len: int = 512
    use_spk_embeddings: bool = True

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ModelError("d_model must be divisible by n_heads")

    @property
    def eos_token(self) -> int:
        return self.speech_vocab - 1

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads


@dataclass(frozen=True)
class DecodeConfig:
    temperature: float = 1.0
    top_k: int = 0  # 0 disables
    seed: int = 0
    max_tokens: int = 256


def causal_mask(n: int) -> np.ndarray:
    m = np.zeros((n, n), dtype=np.float32)
    m[np.triu_indices(n, k=1)] = NEG_INF
    return m


def embed_sequence(seq: UnifiedSequence, params: ParameterStore, cfg: ArConfig) -> Tensor:
    n = len(seq)
    if n > cfg.max_len:
        raise ModelError(f"sequence length {n} exceeds max_len {cfg.max_len}")

    by_kind: dict[str, list[int]] = {k: [] for k in (SPK_TAG, SPK_EMB, TEXT_TOK, SPEECH_TOK)}
    perm = np.empty(n, dtype=np.int64)
    for pos, e in enumerate(seq.elements):
        by_kind[e.kind].append(e.value)
        perm[pos] = len(by_kind[e.kind]) - 1
    # rows grouped per kind, then permuted back into sequence order
    offset = 0
    groups = []
    for kind in (SPK_TAG, SPK_EMB, TEXT_TOK, SPEECH_TOK):
        vals = by_kind[kind]
        if not vals:
            continue
        if kind == SPK_TAG:
            rows = tt.embedding_lookup(params.get("am.tag_emb", (cfg.n_speaker_tags, cfg.d_model)), vals)
            if seq.use_spk_embeddings:
                # tags carry their speaker's embedding too, so every turn
                # header exposes the voice vector where speech can reach it
                raw = np.stack([seq.embedding_for(t) for t in vals]).astype(np.float32)
                rows = tt.add(rows, tt.matmul(
                    Tensor(raw), params.get("am.spk_proj", (cfg.d_spk, cfg.d_model))))
        elif kind == TEXT_TOK:
            rows = tt.embedding_lookup(params.get("am.text_emb", (cfg.text_vocab, cfg.d_model)), vals)
        elif kind == SPEECH_TOK:
            rows = tt.embedding_lookup(params.get("am.speech_emb", (cfg.speech_vocab, cfg.d_model)), vals)
        else:
            raw = np.stack([seq.embedding_for(t) for t in vals]).astype(np.float32)
            rows = tt.matmul(Tensor(raw), params.get("am.spk_proj", (cfg.d_spk, cfg.d_model)))
        for i, e in enumerate(seq.elements):
            if e.kind == kind:
                perm[i] += offset
        groups.append(rows)
        offset += rows.shape[0]
    stacked = groups[0] if len(groups) == 1 else tt.concat(groups, axis=0)
    x = tt.gather_rows(stacked, perm)
    pos = tt.slice_rows(params.get("am.pos_emb", (cfg.max_len, cfg.d_model)), 0, n)
    return tt.add(x, pos)


def _attention(x: Tensor, params: ParameterStore, prefix: str, n_heads: int,
               d_model: int, mask: np.ndarray) -> Tensor:
    n = x.shape[0]
    dh = d_model // n_heads

    def proj(name):
        w = params.get(f"{prefix}.{name}.w", (d_model, d_model))
        h = tt.matmul(x, w)
        return tt.transpose(tt.reshape(h, (n, n_heads, dh)), (1, 0, 2))

    q, k, v = proj("q"), proj("k"), proj("v")
    scores = tt.mul_scalar(tt.matmul(q, tt.transpose(k, (0, 2, 1))), 1.0 / math.sqrt(dh))
    attn = tt.softmax_masked(scores, mask)
    out = tt.reshape(tt.transpose(tt.matmul(attn, v), (1, 0, 2)), (n, d_model))
    return tt.matmul(out, params.get(f"{prefix}.o.w", (d_model, d_model)))


def _layer_norm(x: Tensor, params: ParameterStore, name: str, d: int) -> Tensor:
    return tt.layer_norm(x, params.get(f"{name}.g", (d,), init="ones"),
                         params.get(f"{name}.b", (d,), init="zeros"))


def transformer_stack(x: Tensor, params: ParameterStore, prefix: str, n_layers: int,
                      n_heads: int, d_model: int, mask: np.ndarray) -> Tensor:
    """Pre-LN transformer; returns the final-layer-normed hidden states."""
    for i in range(n_layers):
        base = f"{prefix}.layer{i}"
        x = tt.add(x, _attention(_layer_norm(x, params, f"{base}.ln1", d_model),
                                 params, f"{base}.attn", n_heads, d_model, mask))
        h = _layer_norm(x, params, f"{base}.ln2", d_model)
        w1 = params.get(f"{base}.mlp.w1", (d_model, 4 * d_model))
        b1 = params.get(f"{base}.mlp.b1", (4 * d_model,), init="zeros")
        w2 = params.get(f"{base}.mlp.w2", (4 * d_model, d_model))
        b2 = params.get(f"{base}.mlp.b2", (d_model,), init="zeros")
        h = tt.add(tt.matmul(tt.gelu(tt.add(tt.matmul(h, w1), b1)), w2), b2)
        x = tt.add(x, h)
    return _layer_norm(x, params, f"{prefix}.ln_f", d_model)


def am_hidden(seq: UnifiedSequence, params: ParameterStore, cfg: ArConfig) -> Tensor:
    x = embed_sequence(seq, params, cfg)
    return transformer_stack(x, params, "am", cfg.n_layers, cfg.n_heads,
                             cfg.d_model, causal_mask(len(seq)))


def am_forward(seq: UnifiedSequence, params: ParameterStore, cfg: ArConfig):
    """Returns (logits [|S|, V_speech], hidden states [|S|, d_model]).

    Row t sits at the position that predicts speech token s_t, so the
    hidden states are the conditioning signal available before s_t is
    emitted (teacher-forced during training).
    """
    hidden = am_hidden(seq, params, cfg)
    idx = np.flatnonzero(loss_mask(seq))
    h_am = tt.gather_rows(hidden, idx)
    w = params.get("am.head.w", (cfg.d_model, cfg.speech_vocab))
    b = params.get("am.head.b", (cfg.speech_vocab,), init="zeros")
    logits = tt.add(tt.matmul(h_am, w), b)
    return logits, h_am


def am_loss(logits: Tensor, targets, mask: np.ndarray) -> Tensor:
    """Mean cross-entropy over masked positions."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ModelError("loss mask is all false")
    targets = [int(t) for t in targets]
    if logits.shape[0] != int(mask.sum()) or len(targets) != logits.shape[0]:
        raise ModelError("logits/targets/mask row counts disagree")
    return tt.cross_entropy(logits, targets)


def prefix_elements(profiles, script: DialogueScript, use_spk_embeddings: bool):
    """P and T elements only, for autoregressive decoding."""
    elements = []
    for p in profiles:
        elements.append(Element(SPK_TAG, p.tag))
        if use_spk_embeddings:
            elements.append(Element(SPK_EMB, p.tag))
    for spk, toks in script.turns:
        elements.append(Element(SPK_TAG, spk))
        elements.extend(Element(TEXT_TOK, t) for t in toks)
    return elements


def _prefix_sequence(profiles, script, elements, n_prefix, use_emb) -> UnifiedSequence:
    p_end = len(profiles) * (2 if use_emb else 1)
    return UnifiedSequence(
        elements=tuple(elements),
        profiles=tuple(profiles),
        p_span=(0, p_end),
        t_span=(p_end, n_prefix),
        s_span=(n_prefix, len(elements)),
        use_spk_embeddings=use_emb,
    )


def am_sample(profiles, script: DialogueScript, params: ParameterStore, cfg: ArConfig,
              decode: DecodeConfig):
    """Sample speech tokens until EOS or a hard cap.

    Returns (tokens without EOS, hit_cap flag). Deterministic given the seed.
    """
    rng = np.random.default_rng(decode.seed)
    use_emb = cfg.use_spk_embeddings
    prefix = prefix_elements(profiles, script, use_emb)
    n_prefix = len(prefix)
    elements = list(prefix)
    tokens: list[int] = []
    cap = decode.max_tokens
    while len(tokens) < cap:
        seq = _prefix_sequence(profiles, script, elements, n_prefix, use_emb)
        hidden = am_hidden(seq, params, cfg)
        last = tt.slice_rows(hidden, len(elements) - 1, len(elements))
        w = params.get("am.head.w", (cfg.d_model, cfg.speech_vocab))
        b = params.get("am.head.b", (cfg.speech_vocab,), init="zeros")
        logits = tt.add(tt.matmul(last, w), b).data[0].astype(np.float64)
        if decode.top_k and decode.top_k < logits.size:
            cutoff = np.sort(logits)[-decode.top_k]
            logits = np.where(logits < cutoff, -np.inf, logits)
        if decode.temperature <= 0.0:
            tok = int(np.argmax(logits))
        else:
            z = logits / decode.temperature
            z -= z.max()
            p = np.exp(z)
            p /= p.sum()
            tok = int(rng.choice(p.size, p=p))
        if tok == cfg.eos_token:
            return tokens, False
        tokens.append(tok)
        elements.append(Element(SPEECH_TOK, tok))
    return tokens, True


def hidden_for_tokens(profiles, script: DialogueScript, tokens, params: ParameterStore,
                      cfg: ArConfig) -> Tensor:
    """h_AM rows for a given speech-token run (EOS appended internally)."""
    seq = build_sequence(profiles, script, list(tokens) + [cfg.eos_token],
                         use_spk_embeddings=cfg.use_spk_embeddings)
    _, h_am = am_forward(seq, params, cfg)
    return h_am
