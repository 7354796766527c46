"""Finite scalar quantization codec and the toy tokenizer objective.

The tokenizer is a small strided-convolution encoder with an FSQ
bottleneck, a semantic classification head, and a reconstruction decoder,
trained with L_total = L_semantic + beta * L_recon. Gradients pass the
quantizer via the straight-through tanh surrogate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tt
from .tensor import ParameterStore, Tensor


class FsqError(ValueError):
    pass


@dataclass(frozen=True)
class FsqConfig:
    levels: tuple[int, ...] = (5, 5, 5)
    downsample_factor: int = 4
    beta: float = 0.25
    feature_dim: int = 8
    hidden_dim: int = 16
    n_classes: int = 32

    def __post_init__(self):
        object.__setattr__(self, "levels", tuple(int(l) for l in self.levels))
        for l in self.levels:
            if l < 3 or l % 2 == 0:
                raise FsqError(f"FSQ levels must be odd and >= 3, got {l}")
        if self.downsample_factor not in (4, 8):
            raise FsqError("downsample_factor must be 4 or 8")
        if self.beta < 0:
            raise FsqError("beta must be nonnegative")

    @property
    def codebook_size(self) -> int:
        return math.prod(self.levels)

    @property
    def latent_dim(self) -> int:
        return len(self.levels)


@dataclass(frozen=True)
class FsqCode:
    digits: tuple[int, ...]
    index: int

    @classmethod
    def from_digits(cls, digits, levels) -> "FsqCode":
        digits = tuple(int(d) for d in digits)
        if len(digits) != len(levels):
            raise FsqError("digit/level arity mismatch")
        index = 0
        radix = 1
        for d, l in zip(digits, levels):
            if not 0 <= d < l:
                raise FsqError(f"digit {d} out of range [0, {l})")
            index += d * radix
            radix *= l
        return cls(digits=digits, index=index)

    @classmethod
    def from_index(cls, index: int, levels) -> "FsqCode":
        if not 0 <= index < math.prod(levels):
            raise FsqError(f"index {index} out of codebook")
        digits = []
        rem = index
        for l in levels:
            digits.append(rem % l)
            rem //= l
        return cls(digits=tuple(digits), index=index)


def _half_ranges(levels) -> np.ndarray:
    return (np.asarray(levels, dtype=np.float64) - 1.0) / 2.0


def quantize_np(z: np.ndarray, cfg: FsqConfig) -> tuple[np.ndarray, np.ndarray]:
    """Quantize latent rows; returns (quantized values, integer digits)."""
    z = np.asarray(z)
    if z.shape[-1] != cfg.latent_dim:
        raise FsqError(f"latent dim {z.shape[-1]} != len(levels) {cfg.latent_dim}")
    h = _half_ranges(cfg.levels).astype(z.dtype)
    scaled = np.round(h * np.tanh(z))
    return (scaled / h).astype(z.dtype), (scaled + h).astype(np.int64)


def quantize(z, cfg: FsqConfig):
    """FSQ with straight-through gradient: d(quantize)/dz == d(tanh)/dz.

    Accepts a Tensor (tape-aware) or a plain array; returns (quantized, digits).
    """
    if isinstance(z, Tensor):
        q_np, digits = quantize_np(z.data, cfg)
        y = tt.tanh(z)
        return tt.add(y, Tensor(q_np - y.data)), digits
    return quantize_np(z, cfg)


def codes_from_digits(digits: np.ndarray, cfg: FsqConfig) -> np.ndarray:
    radix = np.cumprod([1, *cfg.levels[:-1]])
    return (np.asarray(digits) * radix).sum(axis=-1)


def centroid(index: int, cfg: FsqConfig) -> np.ndarray:
    """Quantized latent vector for a flat code index."""
    code = FsqCode.from_index(index, cfg.levels)
    h = _half_ranges(cfg.levels)
    return ((np.asarray(code.digits) - h) / h).astype(np.float32)


# -- toy encoder / decoder -------------------------------------------------

def _conv_block(x: Tensor, params: ParameterStore, name: str, kernel: int,
                stride: int, d_in: int, d_out: int, activate: bool) -> Tensor:
    w = params.get(f"{name}.w", (kernel * d_in, d_out))
    b = params.get(f"{name}.b", (d_out,), init="zeros")
    out = tt.add(tt.matmul(tt.unfold_windows(x, kernel, stride), w), b)
    return tt.gelu(out) if activate else out


def _strides(factor: int) -> tuple[int, int]:
    return (2, 2) if factor == 4 else (2, 4)


def encode_latents(features, params: ParameterStore, cfg: FsqConfig) -> Tensor:
    """[T, feature_dim] -> [ceil(T / downsample_factor), latent_dim]."""
    x = features if isinstance(features, Tensor) else Tensor(features)
    if x.data.ndim != 2 or x.shape[0] < 1:
        raise FsqError("features must be a nonempty [T, d] matrix")
    s1, s2 = _strides(cfg.downsample_factor)
    h = _conv_block(x, params, "fsq.enc1", 4, s1, cfg.feature_dim, cfg.hidden_dim, True)
    return _conv_block(h, params, "fsq.enc2", 4, s2, cfg.hidden_dim, cfg.latent_dim, False)


def tokenize(features, params: ParameterStore, cfg: FsqConfig) -> list[int]:
    """Encode, quantize, and emit flat code indices."""
    z = encode_latents(features, params, cfg)
    _, digits = quantize_np(z.data, cfg)
    return [int(i) for i in codes_from_digits(digits, cfg)]


def decode_features(q: Tensor, params: ParameterStore, cfg: FsqConfig, t_out: int) -> Tensor:
    """Reconstruct [t_out, feature_dim] from quantized latents."""
    w1 = params.get("fsq.dec1.w", (cfg.latent_dim, cfg.hidden_dim))
    b1 = params.get("fsq.dec1.b", (cfg.hidden_dim,), init="zeros")
    h = tt.gelu(tt.add(tt.matmul(q, w1), b1))
    h = tt.repeat_rows(h, cfg.downsample_factor)
    w2 = params.get("fsq.dec2.w", (cfg.hidden_dim, cfg.feature_dim))
    b2 = params.get("fsq.dec2.b", (cfg.feature_dim,), init="zeros")
    return tt.slice_rows(tt.add(tt.matmul(h, w2), b2), 0, t_out)


def semantic_logits(q: Tensor, params: ParameterStore, cfg: FsqConfig) -> Tensor:
    w = params.get("fsq.sem.w", (cfg.latent_dim, cfg.n_classes))
    b = params.get("fsq.sem.b", (cfg.n_classes,), init="zeros")
    pooled = tt.mul_scalar(
        tt.matmul(Tensor(np.ones((1, q.shape[0]), dtype=np.float32)), q),
        1.0 / q.shape[0],
    )
    return tt.add(tt.matmul(pooled, w), b)


@dataclass
class TokenizerBatch:
    items: list = field(default_factory=list)  # (features [T, d], class label)

    def add(self, features: np.ndarray, label: int):
        self.items.append((np.asarray(features, dtype=np.float32), int(label)))


def tokenizer_loss(batch: TokenizerBatch, params: ParameterStore, cfg: FsqConfig,
                   surrogate: bool = False):
    """Combined objective; returns (total, semantic, reconstruction) tensors.

    ``surrogate=True`` replaces the quantizer with its smooth tanh surrogate
    (identical tape gradients), which is what finite differences can verify.
    """
    if cfg.beta < 0:
        raise FsqError("beta must be nonnegative")
    sem_terms = []
    rec_terms = []
    for features, label in batch.items:
        z = encode_latents(features, params, cfg)
        if surrogate:
            q = tt.tanh(z)
        else:
            q, _ = quantize(z, cfg)
        sem_terms.append(tt.cross_entropy(semantic_logits(q, params, cfg), [label]))
        rec = decode_features(q, params, cfg, features.shape[0])
        rec_terms.append(tt.mse(rec, Tensor(features)))
    n = float(len(batch.items))
    l_sem = tt.mul_scalar(sum(sem_terms[1:], sem_terms[0]), 1.0 / n)
    l_rec = tt.mul_scalar(sum(rec_terms[1:], rec_terms[0]), 1.0 / n)
    total = tt.add(l_sem, tt.mul_scalar(l_rec, cfg.beta))
    return total, l_sem, l_rec
