"""Preference optimization over speech-token sequences.

DPO loss on policy/reference log-ratios with a frozen reference model,
plus pair harvesting: sample N candidate token sequences per prompt,
score each with the exact token->text inverse map, and pair perfect
transcripts (CER = 0) against imperfect ones (CER > 0) as a full cross
product, deduplicated and optionally capped.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as tt
from .ar_model import ArConfig, DecodeConfig, am_forward, am_sample
from .metrics import token_error_rate
from .sequence import build_sequence
from .tensor import ParameterStore, Tensor


class PreferenceError(ValueError):
    pass


@dataclass(frozen=True)
class PreferencePair:
    prompt_index: int
    chosen: tuple[int, ...]  # speech tokens, no EOS
    rejected: tuple[int, ...]

    def __post_init__(self):
        if self.chosen == self.rejected:
            raise PreferenceError("chosen and rejected must differ")


@dataclass(frozen=True)
class DpoConfig:
    beta: float = 0.1
    pair_cap: int = 16  # per-prompt cap on the chosen x rejected product
    lr: float = 1e-4
    batch_size: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.beta <= 0:
            raise PreferenceError("beta must be positive")


def seq_logprob(profiles, script, tokens, params: ParameterStore,
                cfg: ArConfig) -> Tensor:
    """log pi(tokens | prompt): teacher-forced sum over speech positions.

    ``tokens`` must be EOS-terminated so the probability of stopping is
    part of the sequence likelihood.
    """
    tokens = [int(t) for t in tokens]
    if not tokens or tokens[-1] != cfg.eos_token:
        raise PreferenceError("token sequence must terminate with EOS")
    seq = build_sequence(list(profiles), script, tokens,
                         use_spk_embeddings=cfg.use_spk_embeddings)
    logits, _ = am_forward(seq, params, cfg)
    return tt.sum_all(tt.gather_logprobs(logits, tokens))


def dpo_term(lp_w: Tensor, lp_l: Tensor, ref_w: float, ref_l: float,
             beta: float) -> Tensor:
    """-log sigmoid(beta * [(lp_w - ref_w) - (lp_l - ref_l)]) for one pair.

    Any per-prompt constant added to both policy log-probs cancels in the
    margin, so the loss never depends on the partition function.
    """
    margin = (lp_w - lp_l) + (ref_l - ref_w)
    return -tt.log_sigmoid(tt.mul_scalar(margin, beta))


def dpo_loss(pairs, prompts, params: ParameterStore, ref: ParameterStore,
             cfg: ArConfig, beta: float) -> Tensor:
    """Mean over pairs of -log sigmoid(beta * calibrated log-ratio margin).

    ``prompts`` maps each pair's prompt_index to (profiles, script). The
    reference model is frozen: its log-probs enter as constants.
    """
    if not pairs:
        raise PreferenceError("pair set is empty")
    terms = []
    for pair in pairs:
        profiles, script = prompts[pair.prompt_index]
        chosen = list(pair.chosen) + [cfg.eos_token]
        rejected = list(pair.rejected) + [cfg.eos_token]
        lp_w = seq_logprob(profiles, script, chosen, params, cfg)
        lp_l = seq_logprob(profiles, script, rejected, params, cfg)
        ref_w = seq_logprob(profiles, script, chosen, ref, cfg).item()
        ref_l = seq_logprob(profiles, script, rejected, ref, cfg).item()
        terms.append(dpo_term(lp_w, lp_l, ref_w, ref_l, beta))
    total = terms[0]
    for t in terms[1:]:
        total = tt.add(total, t)
    return tt.mul_scalar(total, 1.0 / len(terms))


def split_by_cer(cers) -> tuple[list[int], list[int]]:
    """Indices with perfect transcripts vs. indices with any errors."""
    chosen = [i for i, c in enumerate(cers) if c == 0]
    rejected = [i for i, c in enumerate(cers) if c > 0]
    return chosen, rejected


def apo_build_pairs(prompt_index: int, candidates, cers, cap: int = 0,
                    rng: np.random.Generator | None = None):
    """Cross product of perfect and imperfect candidates for one prompt.

    Identical candidate sequences are deduplicated (keeping the first
    occurrence) before splitting. Returns (pairs, status) where status is
    "ok" or "no-pairs"; with cap > 0 a uniform subsample of at most
    ``cap`` pairs is kept.
    """
    if len(candidates) != len(cers):
        raise PreferenceError("candidates and scores must align")
    seen: dict[tuple[int, ...], float] = {}
    for cand, c in zip(candidates, cers):
        key = tuple(int(t) for t in cand)
        if key not in seen:
            seen[key] = float(c)
    uniq = list(seen.items())
    chosen, rejected = split_by_cer([c for _, c in uniq])
    pairs = [
        PreferencePair(prompt_index, uniq[i][0], uniq[j][0])
        for i in chosen
        for j in rejected
    ]
    if not pairs:
        return [], "no-pairs"
    if cap > 0 and len(pairs) > cap:
        rng = np.random.default_rng(0) if rng is None else rng
        keep = rng.choice(len(pairs), size=cap, replace=False)
        pairs = [pairs[int(k)] for k in sorted(keep)]
    return pairs, "ok"


@dataclass
class ApoStats:
    n_prompts: int = 0
    n_skipped: int = 0
    pairs_per_prompt: list[int] = field(default_factory=list)

    @property
    def yield_rate(self) -> float:
        return 1.0 - self.n_skipped / self.n_prompts if self.n_prompts else 0.0


def apo_round(params: ParameterStore, prompts, world, cfg: ArConfig, n: int,
              temperature: float, seed: int, cap: int = 16):
    """Sample N candidates per prompt, score by exact-inverse-map CER, pair.

    ``prompts`` are toy samples; candidate k of prompt i decodes with its
    own derived seed so sampling is reproducible and parallelizable.
    Returns (pairs, stats).
    """
    if n < 2:
        raise PreferenceError("need at least two candidates per prompt")
    pairs: list[PreferencePair] = []
    stats = ApoStats()
    for i, sample in enumerate(prompts):
        ref_syms = world.reference_symbols(sample.script)
        cap_tokens = 4 * (len(sample.tokens) + 1)
        cands, cers = [], []
        for k in range(n):
            dseed = int(np.random.SeedSequence([seed, i, k]).generate_state(1)[0])
            d = DecodeConfig(temperature=temperature, seed=dseed, max_tokens=cap_tokens)
            toks, _ = am_sample(list(sample.profiles), sample.script, params, cfg, d)
            cands.append(tuple(toks))
            cers.append(token_error_rate(ref_syms, world.tokens_to_symbols(toks)))
        prng = np.random.default_rng([seed, 0xA90, i])
        got, status = apo_build_pairs(i, cands, cers, cap=cap, rng=prng)
        stats.n_prompts += 1
        stats.pairs_per_prompt.append(len(got))
        if status == "no-pairs":
            stats.n_skipped += 1
        pairs.extend(got)
    return pairs, stats


def dpo_train_epoch(params: ParameterStore, ref: ParameterStore, pairs, prompts,
                    arc: ArConfig, dc: DpoConfig):
    """One pass over the pairs with AdamW; returns per-batch losses."""
    from .trainer import AdamW, clip_grads

    if not pairs:
        raise PreferenceError("pair set is empty")
    opt = AdamW(params, lr=dc.lr, weight_decay=0.0)
    rng = np.random.default_rng([dc.seed, 0xD90])
    order = rng.permutation(len(pairs))
    losses = []
    for start in range(0, len(order), dc.batch_size):
        batch = [pairs[int(i)] for i in order[start : start + dc.batch_size]]
        params.zero_grads()
        loss = dpo_loss(batch, prompts, params, ref, arc, dc.beta)
        tt.backward(loss)
        clip_grads(params, 1.0)
        opt.step()
        losses.append(loss.item())
    return losses


# -- record-per-line pair serialization ---------------------------------------

def pairs_to_lines(pairs) -> str:
    out = []
    for p in pairs:
        c = ",".join(str(t) for t in p.chosen)
        r = ",".join(str(t) for t in p.rejected)
        out.append(f"{p.prompt_index}\t{c}\t{r}")
    return "\n".join(out) + ("\n" if out else "")


def pairs_from_lines(text: str) -> list[PreferencePair]:
    pairs = []
    for line in text.splitlines():
        if not line.strip():
            continue
        idx, c, r = line.split("\t")
        chosen = tuple(int(t) for t in c.split(",") if t != "")
        rejected = tuple(int(t) for t in r.split(",") if t != "")
        pairs.append(PreferencePair(int(idx), chosen, rejected))
    return pairs
