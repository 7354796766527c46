"""Dense float tensors with reverse-mode automatic differentiation.

Define-by-run: every forward op appends to an implicit tape (the parent
links stored on each Tensor), and ``backward`` walks the graph in reverse
topological order. Values are float32 by default; float64 arrays are
accepted and propagate, which is what ``grad_check`` relies on for a
trustworthy finite-difference oracle.
"""

from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass, field

import numpy as np

NEG_INF = -1e9  # additive-mask stand-in for -inf; exp() underflows to exactly 0


class TensorError(ValueError):
    pass


class NonFiniteError(TensorError):
    """A forward op produced NaN or Inf."""


def _as_array(data, dtype=None):
    a = np.asarray(data)
    if dtype is not None:
        return a.astype(dtype)
    if a.dtype in (np.float32, np.float64):
        return a
    return a.astype(np.float32)


class Tensor:
    """N-d float array, optionally recorded on the gradient tape."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        self.data = _as_array(data)
        if not np.isfinite(self.data).all():
            raise NonFiniteError("tensor holds non-finite values")
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return stop_gradient(self)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- operator sugar --------------------------------------------------
    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return add(self, mul_scalar(_wrap(other), -1.0))

    def __rsub__(self, other):
        return add(_wrap(other), mul_scalar(self, -1.0))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return mul_scalar(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return mul_scalar(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _wrap(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward):
    req = any(p.requires_grad for p in parents)
    if not req:
        return Tensor(data)
    return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward)


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (reverse of numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


# -- primitive ops -------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data + b.data

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out_data, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data * b.data

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(out_data, (a, b), bw)


def mul_scalar(a: Tensor, s: float) -> Tensor:
    def bw(g):
        return (g * s,)

    return _make(a.data * s, (a,), bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape[-1] != b.data.shape[0 if b.data.ndim == 1 else -2]:
        raise TensorError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out_data = a.data @ b.data

    def bw(g):
        ga = g @ b.data.swapaxes(-1, -2) if b.data.ndim > 1 else np.outer(g, b.data)
        gb = a.data.swapaxes(-1, -2) @ g if a.data.ndim > 1 else np.outer(a.data, g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(out_data, (a, b), bw)


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.data)

    def bw(g):
        return (g * (1.0 - t * t),)

    return _make(t, (a,), bw)


def gelu(a: Tensor) -> Tensor:
    """Tanh-approximation GELU."""
    c = math.sqrt(2.0 / math.pi)
    x = a.data
    inner = c * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    out_data = 0.5 * x * (1.0 + t)

    def bw(g):
        dinner = c * (1.0 + 3 * 0.044715 * x**2)
        d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
        return (g * d,)

    return _make(out_data, (a,), bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out_data = xhat * gain.data + bias.data

    def bw(g):
        n = x.data.shape[-1]
        gx_hat = g * gain.data
        gx = inv / n * (
            n * gx_hat
            - gx_hat.sum(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).sum(axis=-1, keepdims=True)
        )
        ggain = _unbroadcast(g * xhat, gain.shape)
        gbias = _unbroadcast(g, bias.shape)
        return gx, ggain, gbias

    return _make(out_data, (x, gain, bias), bw)


def softmax_masked(scores: Tensor, additive_mask=None) -> Tensor:
    """Softmax over the last axis; masked positions carry NEG_INF in the mask."""
    s = scores.data if additive_mask is None else scores.data + additive_mask
    s = s - s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        return ((g - dot) * y,)

    return _make(y, (scores,), bw)


def embedding_lookup(table: Tensor, indices) -> Tensor:
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise TensorError("embedding index out of range")
    out_data = table.data[idx]

    def bw(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx, g)
        return (gt,)

    return _make(out_data, (table,), bw)


def gather_rows(x: Tensor, indices) -> Tensor:
    """out[i] = x[indices[i]]; backward scatter-adds."""
    return embedding_lookup(x, indices)


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    out_data = x.data[start:stop]

    def bw(g):
        gx = np.zeros_like(x.data)
        gx[start:stop] = g
        return (gx,)

    return _make(out_data, (x,), bw)


def concat(tensors, axis: int = 0) -> Tensor:
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]

    def bw(g):
        return tuple(np.split(g, np.cumsum(sizes)[:-1], axis=axis))

    return _make(out_data, tuple(tensors), bw)


def repeat_rows(x: Tensor, r: int) -> Tensor:
    """Repeat each row ``r`` times along axis 0."""
    out_data = np.repeat(x.data, r, axis=0)

    def bw(g):
        return (g.reshape((x.data.shape[0], r) + x.data.shape[1:]).sum(axis=1),)

    return _make(out_data, (x,), bw)


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def bw(g):
        return (g.transpose(inv),)

    return _make(x.data.transpose(axes), (x,), bw)


def reshape(x: Tensor, shape) -> Tensor:
    out_data = x.data.reshape(shape)

    def bw(g):
        return (g.reshape(x.data.shape),)

    return _make(out_data, (x,), bw)


def stop_gradient(x: Tensor) -> Tensor:
    """Value-identical tensor detached from the tape."""
    return Tensor(x.data.copy())


def sum_all(x: Tensor) -> Tensor:
    def bw(g):
        return (np.full_like(x.data, float(g)),)

    return _make(x.data.sum(), (x,), bw)


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size

    def bw(g):
        return (np.full_like(x.data, float(g) / n),)

    return _make(x.data.mean(), (x,), bw)


def mse(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise TensorError(f"mse shape mismatch: {a.shape} vs {b.shape}")
    d = a.data - b.data
    n = d.size

    def bw(g):
        gd = (2.0 * float(g) / n) * d
        return gd, -gd

    return _make((d * d).mean(), (a, b), bw)


def log_softmax(logits: Tensor) -> Tensor:
    m = logits.data.max(axis=-1, keepdims=True)
    s = logits.data - m
    lse = np.log(np.exp(s).sum(axis=-1, keepdims=True))
    out_data = s - lse
    p = np.exp(out_data)

    def bw(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return _make(out_data, (logits,), bw)


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood over rows of [N, V] logits."""
    tgt = np.asarray(targets, dtype=np.int64)
    if logits.data.ndim != 2 or tgt.shape != (logits.data.shape[0],):
        raise TensorError("cross_entropy expects [N, V] logits and N targets")
    n, v = logits.data.shape
    if tgt.min() < 0 or tgt.max() >= v:
        raise TensorError("cross_entropy target out of vocabulary")
    m = logits.data.max(axis=-1, keepdims=True)
    s = logits.data - m
    lse = np.log(np.exp(s).sum(axis=-1))
    nll = lse - s[np.arange(n), tgt]

    def bw(g):
        p = np.exp(s - lse[:, None])
        p[np.arange(n), tgt] -= 1.0
        return (p * (float(g) / n),)

    return _make(nll.mean(), (logits,), bw)


def gather_logprobs(logits: Tensor, targets) -> Tensor:
    """Per-row log p(target) for [N, V] logits; returns an [N] tensor."""
    tgt = np.asarray(targets, dtype=np.int64)
    n, v = logits.data.shape
    if tgt.min() < 0 or tgt.max() >= v:
        raise TensorError("token out of vocabulary")
    lp = log_softmax(logits)
    onehot = np.zeros((n, v), dtype=logits.data.dtype)
    onehot[np.arange(n), tgt] = 1.0
    return matmul(mul(lp, Tensor(onehot)), Tensor(np.ones(v, dtype=logits.data.dtype)))


def log_sigmoid(x: Tensor) -> Tensor:
    out_data = -np.logaddexp(0.0, -x.data)

    def bw(g):
        return (g * (1.0 / (1.0 + np.exp(x.data))),)

    return _make(out_data, (x,), bw)


def unfold_windows(x: Tensor, size: int, stride: int) -> Tensor:
    """Slide a window over axis 0 of [T, d]; edge-repeat pad on the right.

    Output is [ceil(T / stride), size * d]; window w starts at w * stride.
    """
    t, d = x.data.shape
    n_out = -(-t // stride)
    idx = np.minimum(
        np.arange(n_out)[:, None] * stride + np.arange(size)[None, :], t - 1
    )
    out_data = x.data[idx].reshape(n_out, size * d)

    def bw(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx.reshape(-1), g.reshape(n_out * size, d))
        return (gx,)

    return _make(out_data, (x,), bw)


# -- backward ------------------------------------------------------------

def backward(loss: Tensor) -> None:
    """Populate .grad on every requires_grad leaf reachable from ``loss``.

    Repeated calls accumulate into leaf grads.
    """
    if loss.data.ndim != 0:
        raise TensorError("backward expects a scalar loss")
    if not loss.requires_grad:
        raise TensorError("loss is detached from the tape")

    topo: list[Tensor] = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.asarray(1.0, dtype=loss.data.dtype)}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad = node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


# -- parameter store and checkpoints --------------------------------------

def truncated_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    """Normal(0, std) resampled until within 2 std."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out.astype(np.float32)


def _param_rng(name: str, seed: int) -> np.random.Generator:
    return np.random.default_rng([seed & 0xFFFFFFFFFFFFFFFF, *name.encode()])


class ParameterStore:
    """Named trainable tensors; init is a pure function of (name, shape, seed)."""

    def __init__(self, rng_seed: int):
        self.rng_seed = rng_seed
        self._params: dict[str, Tensor] = {}

    def get(self, name: str, shape, init: str = "trunc_normal", std: float = 0.02) -> Tensor:
        if name in self._params:
            p = self._params[name]
            if p.shape != tuple(shape):
                raise TensorError(f"parameter {name} shape conflict")
            return p
        if init == "zeros":
            data = np.zeros(shape, dtype=np.float32)
        elif init == "ones":
            data = np.ones(shape, dtype=np.float32)
        elif init == "trunc_normal":
            data = truncated_normal(_param_rng(name, self.rng_seed), shape, std)
        else:
            raise TensorError(f"unknown init {init!r}")
        t = Tensor(data, requires_grad=True)
        self._params[name] = t
        return t

    def names(self):
        return list(self._params.keys())

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def items(self):
        return self._params.items()

    def zero_grads(self):
        for p in self._params.values():
            p.grad = None

    def n_params(self) -> int:
        return sum(p.size for p in self._params.values())

    def copy(self) -> "ParameterStore":
        out = ParameterStore(self.rng_seed)
        for name, p in self._params.items():
            out._params[name] = Tensor(p.data.copy(), requires_grad=True)
        return out

    def cast(self, dtype) -> "ParameterStore":
        out = ParameterStore(self.rng_seed)
        for name, p in self._params.items():
            out._params[name] = Tensor(p.data.astype(dtype), requires_grad=True)
        return out

    # checkpoint: <path>.manifest (text) + <path>.bin (little-endian f32)
    FORMAT_TAG = "JVK1"

    def save(self, path: str) -> None:
        os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
        offset = 0
        lines = [f"{self.FORMAT_TAG} seed={self.rng_seed}"]
        blobs = []
        for name, p in sorted(self._params.items()):
            flat = p.data.astype("<f4").tobytes()
            shape_s = ",".join(str(s) for s in p.shape) or "scalar"
            lines.append(f"{name}\t{shape_s}\t{offset}")
            blobs.append(flat)
            offset += len(flat)
        with open(path + ".manifest", "w") as f:
            f.write("\n".join(lines) + "\n")
        with open(path + ".bin", "wb") as f:
            f.write(b"".join(blobs))

    @classmethod
    def load(cls, path: str) -> "ParameterStore":
        with open(path + ".manifest") as f:
            lines = f.read().splitlines()
        head = lines[0].split()
        if head[0] != cls.FORMAT_TAG:
            raise TensorError(f"bad checkpoint tag {head[0]!r}")
        seed = int(head[1].split("=")[1])
        store = cls(seed)
        with open(path + ".bin", "rb") as f:
            blob = f.read()
        for line in lines[1:]:
            name, shape_s, off_s = line.split("\t")
            shape = () if shape_s == "scalar" else tuple(int(s) for s in shape_s.split(","))
            n = int(np.prod(shape)) if shape else 1
            off = int(off_s)
            data = np.frombuffer(blob, dtype="<f4", count=n, offset=off).reshape(shape)
            store._params[name] = Tensor(data.copy(), requires_grad=True)
        return store


# -- gradient checking -----------------------------------------------------

@dataclass
class GradCheckReport:
    tolerance: float
    per_param: dict[str, float] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(e <= self.tolerance for e in self.per_param.values())

    @property
    def worst(self) -> float:
        return max(self.per_param.values(), default=0.0)

    def summary(self) -> str:
        lines = [
            f"{name}\t{err:.3e}\t{'ok' if err <= self.tolerance else 'FAIL'}"
            for name, err in sorted(self.per_param.items())
        ]
        lines.append(f"overall\t{self.worst:.3e}\t{'PASS' if self.passed else 'FAIL'}")
        return "\n".join(lines)


def grad_check(
    model_fn,
    params: ParameterStore,
    tolerance: float = 1e-3,
    h: float = 1e-3,
    max_elems_per_param: int | None = None,
) -> GradCheckReport:
    """Compare tape gradients against central finite differences.

    Runs the model in float64 so the oracle is limited by truncation error
    (~h^2), not float32 roundoff. ``model_fn(params) -> scalar Tensor`` must
    be deterministic.
    """
    p64 = params.cast(np.float64)

    l1 = model_fn(p64).item()
    l2 = model_fn(p64).item()
    if l1 != l2:
        raise TensorError("model_fn is not deterministic")

    p64.zero_grads()
    backward(model_fn(p64))

    report = GradCheckReport(tolerance=tolerance)
    for name, p in p64.items():
        flat = p.data.reshape(-1)
        g = (p.grad if p.grad is not None else np.zeros_like(p.data)).reshape(-1)
        n = flat.size
        idxs = range(n)
        if max_elems_per_param is not None and n > max_elems_per_param:
            idxs = np.linspace(0, n - 1, max_elems_per_param).astype(int)
        worst = 0.0
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + h
            fp = model_fn(p64).item()
            flat[i] = orig - h
            fm = model_fn(p64).item()
            flat[i] = orig
            fd = (fp - fm) / (2.0 * h)
            denom = max(abs(g[i]), abs(fd), 1e-8)
            worst = max(worst, abs(g[i] - fd) / denom)
        report.per_param[name] = worst
    return report
