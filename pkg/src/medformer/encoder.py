"""Two-stage multi-granularity self-attention encoder.

One layer runs, in order:

1. intra-granularity attention: for every branch, patch tokens and the router
   attend over ``z = [x ; u]`` with a single attention block shared by all
   branches, followed by residual + layer norm;
2. inter-granularity attention: the ``n`` routers attend over each other,
   followed by residual + layer norm;
3. a shared position-wise feed-forward block with residual + layer norm over
   every token, routers included.

Updates within a stage are synchronous: all queries see the pre-update
tokens. Routers are created once by the embedding and carried through all
layers.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from . import tensor as T
from .embed import GranularitySpec, TokenState
from .errors import ConfigError
from .nn import FeedForward, LayerNorm, Module, MultiHeadAttention, dropout
from .tensor import Tensor

__all__ = [
    "TokenState",
    "MedformerLayer",
    "EncoderStack",
    "intra_attention",
    "inter_attention",
    "encoder_layer",
    "attention_pair_count",
]


class MedformerLayer(Module):
    """Parameters of one encoder layer.

    ``inter=False`` builds the variant without inter-granularity attention:
    the router add & norm is kept but nothing is added to the routers, which
    is exactly what a zeroed inter block would produce.
    """

    def __init__(self, d_model: int, n_heads: int, d_ff: int, rng: np.random.Generator,
                 dropout: float = 0.1, activation: str = "gelu", inter: bool = True,
                 dtype=np.float32):
        self.intra_attn = MultiHeadAttention(d_model, n_heads, rng, dtype=dtype)
        self.intra_norm = LayerNorm(d_model, dtype=dtype)
        self.inter_attn = MultiHeadAttention(d_model, n_heads, rng, dtype=dtype) if inter else None
        self.inter_norm = LayerNorm(d_model, dtype=dtype)
        self.ffn = FeedForward(d_model, d_ff, rng, activation=activation, dropout=dropout,
                               dtype=dtype)
        self.ffn_norm = LayerNorm(d_model, dtype=dtype)
        self._dropout = dropout

    @property
    def has_inter(self) -> bool:
        return self.inter_attn is not None

    @property
    def dropout_rate(self) -> float:
        return self._dropout


def intra_attention(branch: TokenState, layer: MedformerLayer) -> TokenState:
    """Raw intra-stage outputs (no residual) for one branch.

    Returns ``Attn(x, z, z)`` and ``Attn(u, z, z)`` with ``z = [x ; u]``. Both
    query sets are evaluated in one call against the same ``z``.
    """
    n = branch.x.shape[-2]
    z = T.concat([branch.x, branch.u], axis=-2)
    out = layer.intra_attn(z, z, z)
    return TokenState(T.slice_axis(out, -2, 0, n), T.slice_axis(out, -2, n, n + 1))


def inter_attention(routers: Sequence[Tensor], layer: MedformerLayer) -> list[Tensor]:
    """Raw inter-stage outputs: each router attends over all routers."""
    if not routers:
        raise ConfigError("inter_attention needs at least one router")
    if layer.inter_attn is None:
        raise ConfigError("this layer was built without inter-granularity attention")
    stacked = T.concat(list(routers), axis=-2)
    out = layer.inter_attn(stacked, stacked, stacked)
    return [T.slice_axis(out, -2, i, i + 1) for i in range(len(routers))]


def encoder_layer(state: Sequence[TokenState], layer: MedformerLayer, training: bool = False,
                  rng: np.random.Generator | None = None) -> list[TokenState]:
    rate = layer.dropout_rate
    counts = [br.x.shape[-2] for br in state]

    # intra stage: residual + norm applied to z = [x ; u] row-wise
    mixed = []
    for br in state:
        z = T.concat([br.x, br.u], axis=-2)
        a = layer.intra_attn(z, z, z)
        mixed.append(layer.intra_norm(z + dropout(a, rate, training, rng)))

    routers = [T.slice_axis(z, -2, n, n + 1) for z, n in zip(mixed, counts)]
    stacked = T.concat(routers, axis=-2)
    if layer.inter_attn is not None:
        a = layer.inter_attn(stacked, stacked, stacked)
        stacked = stacked + dropout(a, rate, training, rng)
    stacked = layer.inter_norm(stacked)

    # FFN over every token of every branch in one pass
    pieces = []
    for i, (z, n) in enumerate(zip(mixed, counts)):
        pieces.append(T.slice_axis(z, -2, 0, n))
        pieces.append(T.slice_axis(stacked, -2, i, i + 1))
    tokens = T.concat(pieces, axis=-2)
    ffn_out = layer.ffn(tokens, training, rng)
    tokens = layer.ffn_norm(tokens + dropout(ffn_out, rate, training, rng))

    out, start = [], 0
    for n in counts:
        out.append(TokenState(T.slice_axis(tokens, -2, start, start + n),
                              T.slice_axis(tokens, -2, start + n, start + n + 1)))
        start += n + 1
    return out


class EncoderStack(Module):
    def __init__(self, n_layers: int, d_model: int, n_heads: int, d_ff: int,
                 rng: np.random.Generator, dropout: float = 0.1, activation: str = "gelu",
                 inter: bool = True, dtype=np.float32):
        if n_layers < 1:
            raise ConfigError(f"n_layers must be >= 1, got {n_layers}")
        self.layers = [
            MedformerLayer(d_model, n_heads, d_ff, rng, dropout, activation, inter, dtype)
            for _ in range(n_layers)
        ]

    def __call__(self, state: Sequence[TokenState], training: bool = False,
                 rng: np.random.Generator | None = None) -> list[TokenState]:
        state = list(state)
        for layer in self.layers:
            state = encoder_layer(state, layer, training, rng)
        return state


def attention_pair_count(spec: GranularitySpec, mode: str = "two_stage",
                         include_routers: bool = False) -> int:
    """Score-matrix entries of one attention pass, per sample and head.

    ``naive`` is ``(sum N_i)^2`` for attention over all patches concatenated.
    ``two_stage`` is ``sum N_i^2 + n^2``; with ``include_routers`` each
    branch attends over ``N_i + 1`` tokens, giving ``sum (N_i+1)^2 + n^2``.
    """
    counts = spec.patch_counts
    if mode == "naive":
        return sum(counts) ** 2
    if mode != "two_stage":
        raise ConfigError(f"unknown counting mode {mode!r}")
    extra = 1 if include_routers else 0
    return sum((n + extra) ** 2 for n in counts) + spec.n ** 2
