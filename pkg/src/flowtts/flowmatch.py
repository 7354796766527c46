"""Conditional flow matching over acoustic frames with chunk-wise causal masks.

Training goes through the gradient tape (velocity regression toward
x1 - x0, conditioning on AM hidden states). Inference uses a numpy path
whose primitives reduce per output element, so chunk-incremental
computation with cached history is bitwise identical to the one-shot
masked computation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as tt
from .ar_model import transformer_stack
from .tensor import NEG_INF, ParameterStore, Tensor


class FlowError(ValueError):
    pass


@dataclass(frozen=True)
class FlowConfig:
    d_model: int = 32
    n_layers: int = 2
    n_heads: int = 2
    d_mel: int = 8
    d_cond: int = 64  # width of AM hidden states
    d_time: int = 32
    upsample_ratio: int = 4
    euler_steps: int = 10
    chunk_choices: tuple[int, ...] = (1, 2, 4, 8, 0)  # 0 means full (c = T)
    t_floor: float = 0.05  # softening for the anchor-point velocity gain

    def __post_init__(self):
        if self.euler_steps < 1:
            raise FlowError("euler_steps must be >= 1")
        if self.d_time % 2:
            raise FlowError("d_time must be even")
        if self.t_floor <= 0:
            raise FlowError("t_floor must be positive")


def interpolate(x0, x1, t: float):
    """Linear interpolant x_t = (1 - t) x0 + t x1."""
    if not 0.0 <= t <= 1.0:
        raise FlowError(f"t={t} outside [0, 1]")
    a0 = x0.data if isinstance(x0, Tensor) else np.asarray(x0)
    a1 = x1.data if isinstance(x1, Tensor) else np.asarray(x1)
    if a0.shape != a1.shape:
        raise FlowError("interpolate shape mismatch")
    return (1.0 - t) * a0 + t * a1


def make_chunk_mask(t_frames: int, chunk_size: int) -> np.ndarray:
    """mask[i, j] = frame i may attend frame j = chunk(j) <= chunk(i)."""
    if t_frames < 1 or chunk_size < 1:
        raise FlowError("t_frames and chunk_size must be >= 1")
    chunk = np.arange(t_frames) // chunk_size
    return chunk[None, :] <= chunk[:, None]


def additive_mask(visible: np.ndarray) -> np.ndarray:
    return np.where(visible, 0.0, NEG_INF).astype(np.float32)


def time_embedding(t: float, d_time: int, dtype=np.float32) -> np.ndarray:
    half = d_time // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    arg = 1000.0 * t * freqs
    return np.concatenate([np.sin(arg), np.cos(arg)]).astype(dtype)


def upsample_cond(h_am, r: int):
    return tt.repeat_rows(h_am, r) if isinstance(h_am, Tensor) else np.repeat(h_am, r, axis=0)


def _phase_of(start: int, n: int, ratio: int) -> np.ndarray:
    """Index within the upsampled block for rows [start, start + n)."""
    return (start + np.arange(n)) % ratio


def _fm_input(x_t: Tensor, t: float, h_up: Tensor, params: ParameterStore,
              cfg: FlowConfig) -> Tensor:
    w_x = params.get("fm.in_x.w", (cfg.d_mel, cfg.d_model))
    w_c = params.get("fm.in_c.w", (cfg.d_cond, cfg.d_model))
    w_t = params.get("fm.in_t.w", (cfg.d_time, cfg.d_model))
    b = params.get("fm.in.b", (cfg.d_model,), init="zeros")
    te = Tensor(time_embedding(t, cfg.d_time, x_t.data.dtype).reshape(1, cfg.d_time))
    x = tt.add(tt.matmul(x_t, w_x), tt.matmul(h_up, w_c))
    x = tt.add(tt.add(x, tt.matmul(te, w_t)), b)
    # frames sharing one conditioning row are otherwise exchangeable; the
    # phase embedding tells each frame which slot of its block it fills
    phase = params.get("fm.phase_emb", (cfg.upsample_ratio, cfg.d_model))
    return tt.add(x, tt.embedding_lookup(phase, _phase_of(0, x_t.shape[0], cfg.upsample_ratio)))


def _gain(t: float, cfg: FlowConfig) -> float:
    # velocity = (anchor - x_t) / (1 - t), softened so the gain stays bounded
    return float(np.float32(1.0) / np.float32(1.0 - t + cfg.t_floor))


def fm_forward(x_t, t: float, h_am, mask: np.ndarray, params: ParameterStore,
               cfg: FlowConfig) -> Tensor:
    """Velocity prediction [T_frames, d_mel]; attention obeys the chunk mask.

    The network output u is scaled as v = u / (1 - t + t_floor), so the
    stiff late-time gain of the target field lives in the head rather than
    in the learned map, while u itself stays O(1) across t.
    """
    x_t = x_t if isinstance(x_t, Tensor) else Tensor(x_t)
    h_am = h_am if isinstance(h_am, Tensor) else Tensor(h_am)
    h_up = upsample_cond(h_am, cfg.upsample_ratio)
    if h_up.shape[0] != x_t.shape[0]:
        raise FlowError(
            f"conditioning rows {h_up.shape[0]} != frame rows {x_t.shape[0]} after upsampling"
        )
    x = _fm_input(x_t, t, h_up, params, cfg)
    hidden = transformer_stack(x, params, "fm", cfg.n_layers, cfg.n_heads,
                               cfg.d_model, additive_mask(mask))
    w_out = params.get("fm.out.w", (cfg.d_model, cfg.d_mel))
    b_out = params.get("fm.out.b", (cfg.d_mel,), init="zeros")
    u = tt.add(tt.matmul(hidden, w_out), b_out)
    return tt.mul_scalar(u, _gain(t, cfg))


def fm_loss(x0, x1, t: float, h_am, mask: np.ndarray, params: ParameterStore,
            cfg: FlowConfig) -> Tensor:
    """Mean squared velocity error |v(x_t, t, h) - (x1 - x0)|^2."""
    a0 = x0.data if isinstance(x0, Tensor) else np.asarray(x0, dtype=np.float32)
    a1 = x1.data if isinstance(x1, Tensor) else np.asarray(x1, dtype=np.float32)
    v = fm_forward(Tensor(interpolate(a0, a1, t)), t, h_am, mask, params, cfg)
    return tt.mse(v, Tensor(a1 - a0))


def draw_chunk_size(rng: np.random.Generator, t_frames: int, cfg: FlowConfig) -> int:
    c = int(cfg.chunk_choices[rng.integers(len(cfg.chunk_choices))])
    return t_frames if c == 0 else min(c, t_frames)


# -- shape-stable numpy inference path --------------------------------------
#
# Every reduction runs per output element (broadcast multiply + sum over the
# last axis), so results do not depend on how many rows are in the batch.
# That is what makes chunked streaming bitwise-equal to the one-shot pass.

def _linear_rows(x: np.ndarray, w: np.ndarray, b: np.ndarray | None = None) -> np.ndarray:
    out = (x[:, None, :] * w.T[None, :, :]).sum(axis=-1)
    return out if b is None else out + b


def _ln_rows(x: np.ndarray, g: np.ndarray, b: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    return xc / np.sqrt(var + eps) * g + b


def _gelu_np(x: np.ndarray) -> np.ndarray:
    c = math.sqrt(2.0 / math.pi)
    return 0.5 * x * (1.0 + np.tanh(c * (x + 0.044715 * x**3)))


class StreamingFm:
    """Chunk-incremental FM forward with per-layer key/value caches.

    Feeding all frames as one chunk reproduces the full one-shot masked
    computation (bitwise, within-chunk attention is bidirectional).
    """

    def __init__(self, params: ParameterStore, cfg: FlowConfig):
        self.p = {name: t.data for name, t in params.items()}
        self.cfg = cfg
        self.caches: list[dict] = [{"k": None, "v": None} for _ in range(cfg.n_layers)]
        self.n_fed = 0

    def reset(self):
        for c in self.caches:
            c["k"] = c["v"] = None
        self.n_fed = 0

    def feed(self, x_chunk: np.ndarray, t: float, h_up_chunk: np.ndarray) -> np.ndarray:
        cfg = self.cfg
        p = self.p
        te = time_embedding(t, cfg.d_time).reshape(1, cfg.d_time)
        x = (
            _linear_rows(x_chunk, p["fm.in_x.w"])
            + _linear_rows(h_up_chunk, p["fm.in_c.w"])
            + _linear_rows(te, p["fm.in_t.w"])
            + p["fm.in.b"]
            + p["fm.phase_emb"][_phase_of(self.n_fed, x_chunk.shape[0], cfg.upsample_ratio)]
        )
        self.n_fed += x_chunk.shape[0]
        n_new = x.shape[0]
        dh = cfg.d_model // cfg.n_heads
        for i in range(cfg.n_layers):
            base = f"fm.layer{i}"
            h = _ln_rows(x, p[f"{base}.ln1.g"], p[f"{base}.ln1.b"])
            q = _linear_rows(h, p[f"{base}.attn.q.w"]).reshape(n_new, cfg.n_heads, dh)
            k = _linear_rows(h, p[f"{base}.attn.k.w"]).reshape(n_new, cfg.n_heads, dh)
            v = _linear_rows(h, p[f"{base}.attn.v.w"]).reshape(n_new, cfg.n_heads, dh)
            cache = self.caches[i]
            cache["k"] = k if cache["k"] is None else np.concatenate([cache["k"], k])
            cache["v"] = v if cache["v"] is None else np.concatenate([cache["v"], v])
            kk, vv = cache["k"], cache["v"]
            # scores[i, j, head] reduced per element over dh
            scores = (q[:, None, :, :] * kk[None, :, :, :]).sum(axis=-1) / math.sqrt(dh)
            scores = scores - scores.max(axis=1, keepdims=True)
            e = np.exp(scores)
            attn = e / e.sum(axis=1, keepdims=True)
            out = (attn[:, :, :, None] * vv[None, :, :, :]).sum(axis=1)
            out = _linear_rows(out.reshape(n_new, cfg.d_model), p[f"{base}.attn.o.w"])
            x = x + out
            h = _ln_rows(x, p[f"{base}.ln2.g"], p[f"{base}.ln2.b"])
            h = _linear_rows(h, p[f"{base}.mlp.w1"], p[f"{base}.mlp.b1"])
            h = _linear_rows(_gelu_np(h), p[f"{base}.mlp.w2"], p[f"{base}.mlp.b2"])
            x = x + h
        x = _ln_rows(x, p["fm.ln_f.g"], p["fm.ln_f.b"])
        u = _linear_rows(x, p["fm.out.w"], p["fm.out.b"])
        return u * _gain(t, cfg)


def fm_apply(x_t: np.ndarray, t: float, h_am: np.ndarray, chunk_size: int,
             params: ParameterStore, cfg: FlowConfig) -> np.ndarray:
    """One-shot masked inference forward (numpy, no tape)."""
    h_up = np.repeat(h_am, cfg.upsample_ratio, axis=0).astype(np.float32)
    t_frames = x_t.shape[0]
    if h_up.shape[0] != t_frames:
        raise FlowError("conditioning/frame row mismatch")
    sfm = StreamingFm(params, cfg)
    p = sfm.p
    cfg_ = cfg
    te = time_embedding(t, cfg.d_time).reshape(1, cfg.d_time)
    x = (
        _linear_rows(x_t.astype(np.float32), p["fm.in_x.w"])
        + _linear_rows(h_up, p["fm.in_c.w"])
        + _linear_rows(te, p["fm.in_t.w"])
        + p["fm.in.b"]
        + p["fm.phase_emb"][_phase_of(0, t_frames, cfg_.upsample_ratio)]
    )
    dh = cfg_.d_model // cfg_.n_heads
    visible = make_chunk_mask(t_frames, chunk_size)
    for i in range(cfg_.n_layers):
        base = f"fm.layer{i}"
        h = _ln_rows(x, p[f"{base}.ln1.g"], p[f"{base}.ln1.b"])
        q = _linear_rows(h, p[f"{base}.attn.q.w"]).reshape(t_frames, cfg_.n_heads, dh)
        k = _linear_rows(h, p[f"{base}.attn.k.w"]).reshape(t_frames, cfg_.n_heads, dh)
        v = _linear_rows(h, p[f"{base}.attn.v.w"]).reshape(t_frames, cfg_.n_heads, dh)
        scores = (q[:, None, :, :] * k[None, :, :, :]).sum(axis=-1) / math.sqrt(dh)
        scores = scores + additive_mask(visible)[:, :, None]
        scores = scores - scores.max(axis=1, keepdims=True)
        e = np.exp(scores)
        attn = e / e.sum(axis=1, keepdims=True)
        out = (attn[:, :, :, None] * v[None, :, :, :]).sum(axis=1)
        out = _linear_rows(out.reshape(t_frames, cfg_.d_model), p[f"{base}.attn.o.w"])
        x = x + out
        h = _ln_rows(x, p[f"{base}.ln2.g"], p[f"{base}.ln2.b"])
        h = _linear_rows(h, p[f"{base}.mlp.w1"], p[f"{base}.mlp.b1"])
        h = _linear_rows(_gelu_np(h), p[f"{base}.mlp.w2"], p[f"{base}.mlp.b2"])
        x = x + h
    x = _ln_rows(x, p["fm.ln_f.g"], p["fm.ln_f.b"])
    u = _linear_rows(x, p["fm.out.w"], p["fm.out.b"])
    return u * _gain(t, cfg_)


def fm_apply_streaming(x_t: np.ndarray, t: float, h_am: np.ndarray, chunk_size: int,
                       params: ParameterStore, cfg: FlowConfig) -> np.ndarray:
    """Chunk-by-chunk forward with cached history; matches fm_apply bitwise."""
    h_up = np.repeat(h_am, cfg.upsample_ratio, axis=0).astype(np.float32)
    t_frames = x_t.shape[0]
    if h_up.shape[0] != t_frames:
        raise FlowError("conditioning/frame row mismatch")
    sfm = StreamingFm(params, cfg)
    outs = []
    for start in range(0, t_frames, chunk_size):
        stop = min(start + chunk_size, t_frames)
        outs.append(sfm.feed(x_t[start:stop].astype(np.float32), t, h_up[start:stop]))
    return np.concatenate(outs, axis=0)


def fm_sample(h_am: np.ndarray, chunk_size: int, steps: int, seed: int,
              params: ParameterStore, cfg: FlowConfig) -> np.ndarray:
    """Euler integration from Gaussian noise; deterministic given the seed."""
    if steps < 1:
        raise FlowError("steps must be >= 1")
    rng = np.random.default_rng(seed)
    t_frames = h_am.shape[0] * cfg.upsample_ratio
    x = rng.standard_normal((t_frames, cfg.d_mel)).astype(np.float32)
    for k in range(steps):
        v = fm_apply(x, k / steps, h_am, chunk_size, params, cfg)
        x = x + v / steps
        if not np.isfinite(x).all():
            raise FlowError("non-finite state during ODE integration")
    return x
