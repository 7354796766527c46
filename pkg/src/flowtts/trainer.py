"""Joint optimization of the AR model and the flow-matching head.

L = L_AM + lambda * L_FM. In cascade mode a stop-gradient on the AM
hidden states severs the FM loss from the AM parameters; in e2e mode the
FM gradient flows back through the conditioning. Two-stage curriculum:
single-speaker short dialogues first, then the mixed multi-speaker stream
starting from the stage-1 checkpoint.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, replace

import numpy as np

from . import tensor as tt
from .ar_model import ArConfig, DecodeConfig, am_forward, am_loss, am_sample
from .flowmatch import FlowConfig, draw_chunk_size, fm_loss, make_chunk_mask
from .metrics import token_error_rate
from .sequence import build_sequence, loss_mask
from .tensor import ParameterStore, Tensor, backward
from .toytask import ToySample, ToyWorld, gen_stream, stage_specs


class TrainError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lambda_fm: float = 1.0
    mode: str = "e2e"  # or "cascade"
    warmup_steps: int = 100
    peak_lr: float = 2e-3
    stage1_steps: int = 2000
    stage2_steps: int = 1000
    batch_size: int = 4
    seed: int = 0
    weight_decay: float = 0.01
    grad_clip: float = 1.0  # global-norm clip; <= 0 disables
    train_pool_size: int = 0  # draw from a fixed pool of this many samples; 0 = fresh stream

    def __post_init__(self):
        if self.lambda_fm < 0:
            raise TrainError("lambda must be nonnegative")
        if self.mode not in ("e2e", "cascade"):
            raise TrainError(f"unknown mode {self.mode!r}")


def lr_at(step: int, warmup_steps: int, total_steps: int, peak_lr: float) -> float:
    """Linear warmup to peak, then cosine decay to zero."""
    if not 0 <= step <= total_steps:
        raise TrainError(f"step {step} outside [0, {total_steps}]")
    if step < warmup_steps:
        return peak_lr * step / warmup_steps
    if total_steps == warmup_steps:
        return peak_lr
    phase = (step - warmup_steps) / (total_steps - warmup_steps)
    return peak_lr * 0.5 * (1.0 + math.cos(math.pi * phase))


class AdamW:
    """Decoupled weight decay Adam over a ParameterStore."""

    def __init__(self, params: ParameterStore, lr: float = 1e-3, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.01):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, lr: float | None = None):
        lr = self.lr if lr is None else lr
        self.t += 1
        for name, p in sorted(self.params.items()):
            g = p.grad
            if g is None:
                continue
            g = g.astype(np.float32)
            m = self.m.get(name)
            v = self.v.get(name)
            m = (1 - self.b1) * g if m is None else self.b1 * m + (1 - self.b1) * g
            v = (1 - self.b2) * g * g if v is None else self.b2 * v + (1 - self.b2) * g * g
            self.m[name], self.v[name] = m, v
            mhat = m / (1 - self.b1**self.t)
            vhat = v / (1 - self.b2**self.t)
            p.data = (
                p.data - lr * mhat / (np.sqrt(vhat) + self.eps) - lr * self.weight_decay * p.data
            ).astype(np.float32)


def clip_grads(params: ParameterStore, max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most max_norm."""
    total = 0.0
    for _, p in params.items():
        if p.grad is not None:
            total += float((p.grad.astype(np.float64) ** 2).sum())
    norm = math.sqrt(total)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for _, p in params.items():
            if p.grad is not None:
                p.grad = (p.grad * scale).astype(p.grad.dtype)
    return norm


def sample_tensors(sample: ToySample, world: ToyWorld, arc: ArConfig):
    """Unified sequence (EOS-terminated) and the full frame matrix (EOS silence)."""
    tokens = list(sample.tokens) + [arc.eos_token]
    seq = build_sequence(list(sample.profiles), sample.script, tokens,
                         use_spk_embeddings=arc.use_spk_embeddings)
    r = world.cfg.frames_per_token
    frames = np.concatenate(
        [sample.frames, np.zeros((r, world.cfg.d_mel), dtype=np.float32)], axis=0
    )
    return seq, tokens, frames


def joint_loss(samples, params: ParameterStore, arc: ArConfig, fc: FlowConfig,
               tc: TrainConfig, world: ToyWorld, rng: np.random.Generator):
    """Returns (L, L_AM, L_FM) tensors for one batch."""
    am_terms = []
    fm_terms = []
    for sample in samples:
        seq, tokens, frames = sample_tensors(sample, world, arc)
        logits, h_am = am_forward(seq, params, arc)
        am_terms.append(am_loss(logits, tokens, loss_mask(seq)))
        t_frames = frames.shape[0]
        c = draw_chunk_size(rng, t_frames, fc)
        x0 = rng.standard_normal(frames.shape).astype(np.float32)
        t = float(rng.uniform(0.0, 1.0))
        h = tt.stop_gradient(h_am) if tc.mode == "cascade" else h_am
        fm_terms.append(fm_loss(x0, frames, t, h, make_chunk_mask(t_frames, c), params, fc))
    n = float(len(samples))
    l_am = tt.mul_scalar(sum(am_terms[1:], am_terms[0]), 1.0 / n)
    l_fm = tt.mul_scalar(sum(fm_terms[1:], fm_terms[0]), 1.0 / n)
    total = tt.add(l_am, tt.mul_scalar(l_fm, tc.lambda_fm))
    return total, l_am, l_fm


def materialize_params(params: ParameterStore, world: ToyWorld, arc: ArConfig,
                       fc: FlowConfig, tc: TrainConfig):
    """Touch every parameter once so checkpoints and optimizers see all of them."""
    rng = np.random.default_rng(0)
    sample = world.make_sample(np.random.default_rng(0), 1, 1)
    joint_loss([sample], params, arc, fc, tc, world, rng)
    params.zero_grads()


def train(params: ParameterStore, world: ToyWorld, arc: ArConfig, fc: FlowConfig,
          tc: TrainConfig, run_dir: str | None = None, exclude=frozenset(),
          log_every: int = 1):
    """Two-stage curriculum training; returns the metrics rows."""
    opt = AdamW(params, lr=tc.peak_lr, weight_decay=tc.weight_decay)
    metrics: list[tuple] = []
    global_step = 0
    for stage in stage_specs(world.cfg, tc.stage1_steps, tc.stage2_steps):
        stream = gen_stream(world, stage, tc.seed, exclude=exclude)
        if tc.train_pool_size > 0:
            pool = [next(stream) for _ in range(tc.train_pool_size)]
            pool_rng = np.random.default_rng([tc.seed, 0xB007])

            def cycle(pool=pool, rng=pool_rng):
                while True:
                    for i in rng.permutation(len(pool)):
                        yield pool[i]

            stream = cycle()
        for step in range(stage.steps):
            batch = [next(stream) for _ in range(tc.batch_size)]
            step_rng = np.random.default_rng([tc.seed, 0x5EED, global_step])
            params.zero_grads()
            total, l_am, l_fm = joint_loss(batch, params, arc, fc, tc, world, step_rng)
            if not np.isfinite(total.data):
                raise TrainError(
                    f"non-finite loss at {stage.name} step {step}: "
                    f"l_am={l_am.item()} l_fm={l_fm.item()}"
                )
            backward(total)
            if tc.grad_clip > 0:
                clip_grads(params, tc.grad_clip)
            lr = lr_at(step, tc.warmup_steps, stage.steps, tc.peak_lr)
            opt.step(lr=lr)
            if global_step % log_every == 0:
                metrics.append((global_step, total.item(), l_am.item(), l_fm.item(), lr))
            global_step += 1
        if run_dir is not None:
            params.save(os.path.join(run_dir, "checkpoints", stage.name))
    if run_dir is not None:
        write_metrics(os.path.join(run_dir, "metrics.tsv"), metrics)
    return metrics


def write_metrics(path: str, metrics) -> None:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w") as f:
        f.write("step\tloss\tl_am\tl_fm\tlr\n")
        for step, loss, l_am, l_fm, lr in metrics:
            f.write(f"{step}\t{loss:.8e}\t{l_am:.8e}\t{l_fm:.8e}\t{lr:.8e}\n")


# -- evaluation helpers ------------------------------------------------------

def eval_cer(prompts, params: ParameterStore, world: ToyWorld, arc: ArConfig,
             decode: DecodeConfig | None = None) -> list[float]:
    """Greedy-decode each prompt; CER via the exact token->text inverse map."""
    out = []
    for sample in prompts:
        cap = 4 * (len(sample.tokens) + 1)
        d = decode or DecodeConfig(temperature=0.0, seed=0, max_tokens=cap)
        d = replace(d, max_tokens=min(d.max_tokens, cap))
        tokens, _ = am_sample(list(sample.profiles), sample.script, params, arc, d)
        hyp = world.tokens_to_symbols(tokens)
        ref = world.reference_symbols(sample.script)
        out.append(token_error_rate(ref, hyp))
    return out


def eval_frame_cer(prompts, params: ParameterStore, world: ToyWorld, arc: ArConfig,
                   fc: FlowConfig, chunk_size: int = 8, steps: int = 16,
                   seed: int = 5) -> list[float]:
    """CER of the toy-ASR transcript of generated frames (intelligibility).

    Tokens are decoded greedily, frames are sampled from the flow conditioned
    on the matching hidden states, and the frames alone are transcribed.
    """
    from .ar_model import hidden_for_tokens
    from .flowmatch import fm_sample

    out = []
    for sample in prompts:
        cap = 4 * (len(sample.tokens) + 1)
        tokens, _ = am_sample(list(sample.profiles), sample.script, params, arc,
                              DecodeConfig(temperature=0.0, seed=0, max_tokens=cap))
        if not tokens:
            out.append(1.0)
            continue
        h = hidden_for_tokens(list(sample.profiles), sample.script, tokens, params, arc)
        frames = fm_sample(h.data, chunk_size=min(chunk_size, h.shape[0] * fc.upsample_ratio),
                           steps=steps, seed=seed, params=params, cfg=fc)
        # the EOS block renders silence; transcribe only the token span
        span = len(tokens) * world.cfg.frames_per_token
        hyp = world.transcribe_frames(frames[:span], list(sample.global_speakers))
        ref = world.reference_symbols(sample.script)
        out.append(token_error_rate(ref, hyp))
    return out


def eval_dialogue(sample: ToySample, params: ParameterStore, world: ToyWorld,
                  arc: ArConfig, fc: FlowConfig, chunk_size: int = 8,
                  steps: int = 16, seed: int = 5):
    """Decode one dialogue and score it as a multi-speaker transcript.

    Tokens are decoded greedily with no turn boundaries given, the hyp
    symbol stream is segmented by the reference turn lengths, and each
    turn's speaker is identified from the generated frames' offsets.
    Returns (cp_report, speaker_hits, n_turns).
    """
    from .ar_model import hidden_for_tokens
    from .flowmatch import fm_sample
    from .metrics import SpeakerTranscript, cpwer

    cap = 4 * (len(sample.tokens) + 1)
    tokens, _ = am_sample(list(sample.profiles), sample.script, params, arc,
                          DecodeConfig(temperature=0.0, seed=0, max_tokens=cap))
    syms = world.tokens_to_symbols(tokens)
    frames = np.zeros((0, world.cfg.d_mel), dtype=np.float32)
    if tokens:
        h = hidden_for_tokens(list(sample.profiles), sample.script, tokens, params, arc)
        frames = fm_sample(h.data, chunk_size=min(chunk_size, h.shape[0] * fc.upsample_ratio),
                           steps=steps, seed=seed, params=params, cfg=fc)
    r = world.cfg.frames_per_token
    k = world.cfg.tokens_per_symbol
    ref_utts: dict[int, list] = {}
    hyp_utts: dict[int, list] = {}
    hits = 0
    sym_pos = tok_pos = 0
    for j, (spk, text) in enumerate(sample.script.turns):
        true_pool = sample.global_speakers[spk]
        ref_utts.setdefault(true_pool, []).append((j, [str(s) for s in text]))
        hyp_seg = syms[sym_pos : sym_pos + len(text)]
        turn_tokens = tokens[tok_pos : tok_pos + k * len(text)]
        spk_hat = world.identify_speaker(
            frames[tok_pos * r : (tok_pos + len(turn_tokens)) * r],
            turn_tokens, list(sample.global_speakers),
        )
        hits += int(spk_hat == true_pool)
        if hyp_seg:
            hyp_utts.setdefault(spk_hat, []).append((j, [str(s) for s in hyp_seg]))
        sym_pos += len(text)
        tok_pos += k * len(text)
    refs = [SpeakerTranscript.make(s, u) for s, u in sorted(ref_utts.items())]
    hyps = [SpeakerTranscript.make(s, u) for s, u in sorted(hyp_utts.items())]
    return cpwer(refs, hyps), hits, len(sample.script.turns)


def eval_fm(prompts, params: ParameterStore, world: ToyWorld, arc: ArConfig,
            fc: FlowConfig, tc: TrainConfig, seed: int = 1234) -> float:
    """Mean FM loss on ground-truth pairs with frozen (x0, t) draws."""
    rng = np.random.default_rng(seed)
    losses = []
    for sample in prompts:
        seq, tokens, frames = sample_tensors(sample, world, arc)
        _, h_am = am_forward(seq, params, arc)
        x0 = rng.standard_normal(frames.shape).astype(np.float32)
        t = float(rng.uniform(0.05, 0.95))
        mask = make_chunk_mask(frames.shape[0], frames.shape[0])
        losses.append(
            fm_loss(x0, frames, t, tt.stop_gradient(h_am), mask, params, fc).item()
        )
    return float(np.mean(losses))
