"""Layers built on :mod:`medformer.tensor`.

Parameters are plain :class:`Tensor` attributes with ``requires_grad=True``;
:class:`Module` discovers them (and nested modules, including lists of
modules) in attribute definition order, which fixes the parameter naming used
by checkpoints.
"""

from __future__ import annotations

import math
import threading
from contextlib import contextmanager
from typing import Iterator

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .tensor import Tensor


class Module:
    """Minimal parameter container."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


def _uniform(rng: np.random.Generator, shape, bound: float, dtype) -> Tensor:
    data = rng.uniform(-bound, bound, size=shape).astype(dtype)
    return Tensor(data, requires_grad=True)


class Linear(Module):
    """``y = x @ weight + bias`` with ``weight`` of shape ``(in, out)``.

    Weights and bias are drawn from ``U(-1/sqrt(in), 1/sqrt(in))``.
    """

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator,
                 bias: bool = True, dtype=np.float32):
        bound = 1.0 / math.sqrt(d_in)
        self.weight = _uniform(rng, (d_in, d_out), bound, dtype)
        self.bias = _uniform(rng, (d_out,), bound, dtype) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = T.matmul(x, self.weight)
        if self.bias is not None:
            y = y + self.bias
        return y


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-6, dtype=np.float32):
        self.gamma = Tensor(np.ones(d, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(d, dtype=dtype), requires_grad=True)
        self._eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta, self._eps)


def dropout(x: Tensor, rate: float, training: bool,
            rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: zero with probability ``rate``, rescale survivors.

    The identity whenever ``training`` is false or ``rate`` is zero.
    """
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an explicit rng")
    keep = (rng.random(x.shape, dtype=np.float32) >= rate).astype(x.dtype)
    keep *= x.dtype.type(1.0 / (1.0 - rate))
    return T.mul(x, Tensor(keep))


class FeedForward(Module):
    """Position-wise ``D -> F -> D`` block."""

    def __init__(self, d_model: int, d_ff: int, rng: np.random.Generator,
                 activation: str = "gelu", dropout: float = 0.1, dtype=np.float32):
        if activation not in ("gelu", "relu"):
            raise ConfigError(f"unknown activation {activation!r}")
        self.fc1 = Linear(d_model, d_ff, rng, dtype=dtype)
        self.fc2 = Linear(d_ff, d_model, rng, dtype=dtype)
        self._act = T.gelu if activation == "gelu" else T.relu
        self._dropout = dropout

    def __call__(self, x: Tensor, training: bool = False,
                 rng: np.random.Generator | None = None) -> Tensor:
        h = self._act(self.fc1(x))
        h = dropout(h, self._dropout, training, rng)
        return self.fc2(h)


# -- score-matrix instrumentation ------------------------------------------------

_counters = threading.local()


class ScoreCounter:
    """Tally of attention score-matrix entries, per sample and per head."""

    def __init__(self):
        self.entries = 0
        self.calls = 0
        self.peak = 0

    def record(self, n_query: int, n_key: int) -> None:
        size = n_query * n_key
        self.entries += size
        self.calls += 1
        self.peak = max(self.peak, size)


@contextmanager
def count_scores() -> Iterator[ScoreCounter]:
    """Count score entries of every :class:`MultiHeadAttention` call in the block."""
    counter = ScoreCounter()
    stack = getattr(_counters, "stack", None)
    if stack is None:
        stack = _counters.stack = []
    stack.append(counter)
    try:
        yield counter
    finally:
        stack.pop()


def _record(n_query: int, n_key: int) -> None:
    for counter in getattr(_counters, "stack", ()):
        counter.record(n_query, n_key)


class MultiHeadAttention(Module):
    """Multi-head scaled dot-product attention.

    Each head computes ``softmax(Q K^T / sqrt(D/H)) V``; heads are
    concatenated and passed through an output projection.

    Args:
        d_model: Token width ``D``.
        n_heads: Head count ``H``; must divide ``D``.
        rng: Initialisation stream.
    """

    def __init__(self, d_model: int, n_heads: int, rng: np.random.Generator,
                 dtype=np.float32):
        if d_model % n_heads:
            raise ConfigError(f"n_heads={n_heads} does not divide d_model={d_model}")
        self.q_proj = Linear(d_model, d_model, rng, dtype=dtype)
        self.k_proj = Linear(d_model, d_model, rng, dtype=dtype)
        self.v_proj = Linear(d_model, d_model, rng, dtype=dtype)
        self.out_proj = Linear(d_model, d_model, rng, dtype=dtype)
        self._d_model = d_model
        self._n_heads = n_heads

    @property
    def n_heads(self) -> int:
        return self._n_heads

    def _split(self, x: Tensor) -> Tensor:
        b, n, _ = x.shape
        h = self._n_heads
        return T.transpose(T.reshape(x, (b, n, h, self._d_model // h)), (0, 2, 1, 3))

    def __call__(self, q: Tensor, k: Tensor, v: Tensor,
                 return_weights: bool = False):
        """Attend queries ``(B, Nq, D)`` over keys/values ``(B, Nk, D)``.

        2-D inputs ``(N, D)`` are treated as a batch of one.
        """
        unbatched = q.ndim == 2
        if unbatched:
            q, k, v = (T.reshape(t, (1,) + t.shape) for t in (q, k, v))
        if k.shape[1] == 0:
            raise ShapeError("attention needs at least one key")
        if k.shape != v.shape or q.shape[-1] != self._d_model or k.shape[-1] != self._d_model:
            raise ShapeError(
                f"attention shapes q={q.shape} k={k.shape} v={v.shape} for D={self._d_model}"
            )
        b, nq, _ = q.shape
        nk = k.shape[1]
        _record(nq, nk)

        qh = self._split(self.q_proj(q))
        kh = self._split(self.k_proj(k))
        vh = self._split(self.v_proj(v))
        scores = T.scale(T.matmul(qh, T.swapaxes(kh, -1, -2)),
                         1.0 / math.sqrt(self._d_model // self._n_heads))
        weights = T.softmax(scores, axis=-1)
        ctx = T.matmul(weights, vh)
        ctx = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (b, nq, self._d_model))
        out = self.out_proj(ctx)
        if unbatched:
            out = T.reshape(out, out.shape[1:])
            weights = T.reshape(weights, weights.shape[1:])
        return (out, weights) if return_weights else out


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over the batch of ``-log softmax(logits)[label]``."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    k = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k}), got range "
                         f"[{labels.min()}, {labels.max()}]")
    picked = T.take_last(T.log_softmax(logits, axis=-1), labels)
    return T.scale(T.tsum(picked), -1.0 / labels.size)
