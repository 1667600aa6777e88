"""Cross-channel multi-granularity patch embedding.

For each patch length ``L_i`` the input ``(T, C)`` series is end-padded with
zeros to ``N_i * L_i`` rows (``N_i = ceil(T / L_i)``) and cut into ``N_i``
non-overlapping patches. A patch spans all channels and is flattened
timestamp-major, so row ``j`` of the patch matrix is
``x[j*L : (j+1)*L, :].reshape(-1)``. A bias-free linear map takes each patch
to ``D`` dimensions; this is the same map as a convolution with kernel
``(L_i, C)`` and stride ``L_i``.

Each branch then receives the first ``N_i`` rows of a fixed sinusoidal table
plus its own learnable granularity row. The router token of a branch is table
row ``N_i`` (0-based, i.e. the ``(N_i + 1)``-th row) plus the same
granularity row.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .nn import Linear, Module, _uniform
from .tensor import Tensor

AUG_KINDS = ("none", "mask", "jitter", "scale")
_AUG_RE = re.compile(r"^(none|mask|jitter|scale)([0-9]*\.?[0-9]+(?:[eE][-+]?[0-9]+)?)?$")


@dataclass(frozen=True)
class AugOption:
    kind: str
    magnitude: float = 0.0

    def __post_init__(self):
        if self.kind not in AUG_KINDS:
            raise ConfigError(f"unknown augmentation {self.kind!r}")
        if self.kind == "mask" and not 0.0 <= self.magnitude <= 1.0:
            raise ConfigError(f"mask probability must lie in [0, 1], got {self.magnitude}")
        if self.magnitude < 0:
            raise ConfigError(f"{self.kind} magnitude must be >= 0, got {self.magnitude}")

    def __str__(self) -> str:
        return "none" if self.kind == "none" else f"{self.kind}{self.magnitude:g}"


def parse_augmentation(text: str) -> AugOption:
    """Parse ``none``, ``mask0.25``, ``jitter0.2`` or ``scale0.2``."""
    m = _AUG_RE.match(text.strip())
    if not m:
        raise ConfigError(f"cannot parse augmentation {text!r}")
    kind, number = m.groups()
    if kind == "none":
        if number:
            raise ConfigError(f"'none' takes no magnitude: {text!r}")
        return AugOption("none")
    if not number:
        raise ConfigError(f"augmentation {kind!r} needs a magnitude, e.g. {kind}0.2")
    return AugOption(kind, float(number))


@dataclass(frozen=True)
class AugmentationConfig:
    """The augmentation bank and how often a transform is drawn.

    ``per`` is ``"branch"`` (one draw per sample and granularity branch) or
    ``"patch"`` (one draw per patch token).
    """

    options: tuple[AugOption, ...] = (AugOption("none"),)
    per: str = "branch"

    def __post_init__(self):
        if not self.options:
            raise ConfigError("augmentation options must be non-empty")
        if self.per not in ("branch", "patch"):
            raise ConfigError(f"augmentation granularity must be 'branch' or 'patch', got {self.per!r}")

    @classmethod
    def parse(cls, items: Sequence[str] | str, per: str = "branch") -> AugmentationConfig:
        if isinstance(items, str):
            items = [s for s in items.split(",") if s.strip()]
        return cls(tuple(parse_augmentation(s) for s in items), per)

    @property
    def is_identity(self) -> bool:
        return all(o.kind == "none" for o in self.options)


@dataclass(frozen=True)
class GranularitySpec:
    """Patch lengths and the patch counts they induce for a sequence length."""

    patch_lengths: tuple[int, ...]
    seq_len: int
    patch_counts: tuple[int, ...] = field(init=False)

    def __post_init__(self):
        lengths = tuple(int(x) for x in self.patch_lengths)
        if not lengths:
            raise ConfigError("patch_lengths must contain at least one entry")
        if any(x < 1 for x in lengths):
            raise ConfigError(f"patch lengths must be >= 1, got {lengths}")
        if self.seq_len < 1:
            raise ConfigError(f"seq_len must be >= 1, got {self.seq_len}")
        object.__setattr__(self, "patch_lengths", lengths)
        object.__setattr__(self, "patch_counts",
                           tuple(math.ceil(self.seq_len / x) for x in lengths))

    @property
    def n(self) -> int:
        return len(self.patch_lengths)

    @property
    def padded_lengths(self) -> tuple[int, ...]:
        return tuple(n * l for n, l in zip(self.patch_counts, self.patch_lengths))


def sinusoidal_table(rows: int, d_model: int, dtype=np.float32) -> np.ndarray:
    """Vanilla-transformer sinusoidal encodings, shape ``(rows, d_model)``."""
    pos = np.arange(rows, dtype=np.float64)[:, None]
    div = np.exp(np.arange(0, d_model, 2, dtype=np.float64) * (-math.log(10000.0) / d_model))
    table = np.zeros((rows, d_model), dtype=np.float64)
    table[:, 0::2] = np.sin(pos * div)
    table[:, 1::2] = np.cos(pos * div[: d_model // 2])
    return table.astype(dtype)


def _batched(x) -> tuple[Tensor, bool]:
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.ndim == 2:
        return T.reshape(x, (1,) + x.shape), True
    if x.ndim != 3:
        raise ShapeError(f"expected (T, C) or (B, T, C) input, got {x.shape}")
    return x, False


def _pad_time(x: Tensor, padded: int) -> Tensor:
    b, t, c = x.shape
    if padded == t:
        return x
    zeros = Tensor(np.zeros((b, padded - t, c), dtype=x.dtype))
    return T.concat([x, zeros], axis=1)


def segment(x_in, patch_len: int) -> Tensor:
    """Cut ``(T, C)`` (or ``(B, T, C)``) into cross-channel patches.

    Returns ``(N, L*C)`` (or ``(B, N, L*C)``) with ``N = ceil(T / L)``.
    """
    x, unbatched = _batched(x_in)
    if patch_len < 1:
        raise ConfigError(f"patch length must be >= 1, got {patch_len}")
    b, t, c = x.shape
    n = math.ceil(t / patch_len)
    out = T.reshape(_pad_time(x, n * patch_len), (b, n, patch_len * c))
    return T.reshape(out, out.shape[1:]) if unbatched else out


def unsegment(patches: np.ndarray, patch_len: int, n_channels: int, seq_len: int) -> np.ndarray:
    """Inverse of :func:`segment` on raw arrays: un-flatten and strip padding."""
    patches = np.asarray(patches)
    lead = patches.shape[:-2]
    n = patches.shape[-2]
    series = patches.reshape(lead + (n * patch_len, n_channels))
    return series[..., :seq_len, :]


def segment_per_channel(x_in, patch_len: int) -> Tensor:
    """Single-channel patching: ``(B, T, C) -> (B, C*N, L)``, channel-major."""
    x, unbatched = _batched(x_in)
    b, t, c = x.shape
    n = math.ceil(t / patch_len)
    xt = T.transpose(_pad_time(x, n * patch_len), (0, 2, 1))
    out = T.reshape(xt, (b, c * n, patch_len))
    return T.reshape(out, out.shape[1:]) if unbatched else out


def augment(x_e: Tensor, cfg: AugmentationConfig, training: bool,
            rng: np.random.Generator | None = None) -> Tensor:
    """Apply one transform from the bank to a ``(B, N, D)`` embedding.

    A transform is drawn uniformly per sample (``cfg.per == "branch"``) or per
    patch (``"patch"``). ``mask`` zeroes each element with probability
    ``p``; ``jitter`` adds ``N(0, sigma^2)`` noise; ``scale`` multiplies each
    element by a ``N(1, sigma^2)`` factor. Outside training this is the
    identity.
    """
    if not training or cfg.is_identity:
        return x_e
    if rng is None:
        raise ValueError("augmentation in training mode needs an explicit rng")
    squeeze = x_e.ndim == 2
    shape = ((1,) + x_e.shape) if squeeze else x_e.shape
    b, n, d = shape
    draw_shape = (b,) if cfg.per == "branch" else (b, n)
    choice = rng.integers(len(cfg.options), size=draw_shape)
    choice = np.broadcast_to(choice.reshape(draw_shape + (1,) * (3 - len(draw_shape))), shape)

    dtype = x_e.dtype
    mult = np.ones(shape, dtype=dtype)
    shift = None
    for j, opt in enumerate(cfg.options):
        if opt.kind == "none":
            continue
        sel = choice == j
        count = int(sel.sum())
        if count == 0:
            continue
        if opt.kind == "mask":
            mult[sel] = rng.random(count) >= opt.magnitude
        elif opt.kind == "scale":
            mult[sel] = rng.normal(1.0, opt.magnitude, count)
        else:
            if shift is None:
                shift = np.zeros(shape, dtype=dtype)
            shift[sel] = rng.normal(0.0, opt.magnitude, count)

    if squeeze:
        mult = mult[0]
        shift = None if shift is None else shift[0]
    out = T.mul(x_e, Tensor(mult))
    if shift is not None:
        out = T.add(out, Tensor(shift))
    return out


@dataclass
class TokenState:
    """Tokens of one granularity branch: patches ``(B, N, D)`` and router ``(B, 1, D)``."""

    x: Tensor
    u: Tensor


class PatchEmbedding(Module):
    """Projection, augmentation, positional/granularity embedding and routers.

    Args:
        spec: Patch lengths and the sequence length ``T``.
        n_channels: ``C``.
        d_model: ``D``.
        rng: Initialisation stream.
        augmentation: Bank used in training mode.
        channel_independent: Patch each channel separately (the single-channel
            patching ablation). Token count per branch becomes ``C * N_i`` and
            positions repeat per channel.
        pos_capacity: Rows of the positional table, defaults to ``T + 2``.
    """

    def __init__(self, spec: GranularitySpec, n_channels: int, d_model: int,
                 rng: np.random.Generator,
                 augmentation: AugmentationConfig = AugmentationConfig(),
                 channel_independent: bool = False,
                 pos_capacity: int | None = None, dtype=np.float32):
        self._spec = spec
        self._n_channels = n_channels
        self._d_model = d_model
        self._aug = augmentation
        self._channel_independent = channel_independent
        self.projections = []
        for length in spec.patch_lengths:
            fan_in = length if channel_independent else length * n_channels
            self.projections.append(Linear(fan_in, d_model, rng, bias=False, dtype=dtype))
        self.granularity = _uniform(rng, (spec.n, d_model), 1.0 / math.sqrt(d_model), dtype)
        capacity = pos_capacity if pos_capacity is not None else spec.seq_len + 2
        self._pos = Tensor(sinusoidal_table(capacity, d_model, dtype))

    @property
    def spec(self) -> GranularitySpec:
        return self._spec

    @property
    def positional_table(self) -> Tensor:
        return self._pos

    def token_counts(self) -> list[int]:
        mult = self._n_channels if self._channel_independent else 1
        return [mult * n for n in self._spec.patch_counts]

    def project(self, x_in, i: int) -> Tensor:
        """Patch and project branch ``i``: ``(B, T, C) -> (B, N_i, D)``."""
        length = self._spec.patch_lengths[i]
        if self._channel_independent:
            patches = segment_per_channel(x_in, length)
        else:
            patches = segment(x_in, length)
        return self.projections[i](patches)

    def embed_granularity(self, x_in, i: int, training: bool = False,
                          rng: np.random.Generator | None = None) -> TokenState:
        x_in, _ = _batched(x_in)
        b, t, c = x_in.shape
        if t != self._spec.seq_len or c != self._n_channels:
            raise ShapeError(
                f"input (T={t}, C={c}) does not match embedding "
                f"(T={self._spec.seq_len}, C={self._n_channels})"
            )
        n = self._spec.patch_counts[i]
        if n + 1 > self._pos.shape[0]:
            raise ConfigError(
                f"positional capacity {self._pos.shape[0]} exceeded: branch {i} needs {n + 1} rows"
            )
        x_e = augment(self.project(x_in, i), self._aug, training, rng)
        pos = self._pos.data[:n]
        if self._channel_independent:
            pos = np.tile(pos, (self._n_channels, 1))
        gran = self.granularity[i]
        x = x_e + Tensor(pos) + gran
        router = Tensor(self._pos.data[n]) + gran
        u = T.add(Tensor(np.zeros((b, 1, self._d_model), dtype=x.dtype)), router)
        return TokenState(x, u)

    def embed_all(self, x_in, training: bool = False,
                  rng: np.random.Generator | None = None) -> list[TokenState]:
        return [self.embed_granularity(x_in, i, training, rng) for i in range(self._spec.n)]
