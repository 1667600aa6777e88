"""End-to-end Medformer classifier, ablation variants and checkpoints."""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import tensor as T
from .embed import AugmentationConfig, GranularitySpec, PatchEmbedding
from .encoder import EncoderStack, TokenState
from .errors import ConfigError, FormatError, ShapeError
from .nn import Linear, Module
from .tensor import Tensor

VARIANTS = ("full", "no_inter_attention", "no_augmentation", "single_channel_patching")
PRECISIONS = {"f32": np.float32, "f64": np.float64}


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters.

    ``seq_len``/``n_channels``/``n_classes`` come from the data. The rest
    default to 6 layers, ``D = 128``, FFN width 256, 8 heads, dropout 0.1
    and GELU, the same for every dataset preset.
    """

    seq_len: int
    n_channels: int
    n_classes: int
    d_model: int = 128
    n_layers: int = 6
    d_ff: int = 256
    n_heads: int = 8
    dropout: float = 0.1
    patch_lengths: tuple[int, ...] = (2, 4, 8, 16, 32)
    augmentations: tuple[str, ...] = ("none",)
    aug_per: str = "branch"
    activation: str = "gelu"
    precision: str = "f32"
    variant: str = "full"
    pooling: str = "flatten"

    def __post_init__(self):
        object.__setattr__(self, "patch_lengths", tuple(int(x) for x in self.patch_lengths))
        object.__setattr__(self, "augmentations", tuple(str(x) for x in self.augmentations))
        for name in ("seq_len", "n_channels", "d_model", "n_layers", "d_ff", "n_heads"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.n_classes < 2:
            raise ConfigError(f"n_classes must be >= 2, got {self.n_classes}")
        if self.d_model % self.n_heads:
            raise ConfigError(f"n_heads={self.n_heads} does not divide d_model={self.d_model}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.precision not in PRECISIONS:
            raise ConfigError(f"precision must be 'f32' or 'f64', got {self.precision!r}")
        if self.pooling not in ("flatten", "mean"):
            raise ConfigError(f"pooling must be 'flatten' or 'mean', got {self.pooling!r}")
        if self.activation not in ("gelu", "relu"):
            raise ConfigError(f"activation must be 'gelu' or 'relu', got {self.activation!r}")
        # validate eagerly so bad configs fail before any allocation
        self.granularity
        self.augmentation

    @property
    def dtype(self):
        return PRECISIONS[self.precision]

    @property
    def granularity(self) -> GranularitySpec:
        return GranularitySpec(self.patch_lengths, self.seq_len)

    @property
    def augmentation(self) -> AugmentationConfig:
        if self.variant == "no_augmentation":
            return AugmentationConfig()
        return AugmentationConfig.parse(self.augmentations, self.aug_per)

    def token_counts(self) -> list[int]:
        mult = self.n_channels if self.variant == "single_channel_patching" else 1
        return [mult * n for n in self.granularity.patch_counts]

    def replace(self, **changes) -> ModelConfig:
        return ModelConfig(**{**asdict(self), **changes})

    def to_json(self) -> str:
        data = asdict(self)
        data["patch_lengths"] = list(self.patch_lengths)
        data["augmentations"] = list(self.augmentations)
        return json.dumps(data, sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> ModelConfig:
        data = json.loads(text)
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown model config keys {sorted(unknown)}")
        return cls(**data)

    def digest(self) -> bytes:
        return hashlib.sha256(self.to_json().encode()).digest()


def count_parameters(cfg: ModelConfig) -> int:
    """Closed-form number of trainable scalars.

    embedding:  sum_i fan_in_i * D  +  n * D       (fan_in_i = L_i*C, or L_i
                                                    for single-channel patching)
    per layer:  a * 4 * (D^2 + D)                   (a = 2 attention blocks, 1 without inter)
              + (D*F + F) + (F*D + D)               (feed-forward)
              + 3 * 2 * D                           (three layer norms)
    head:       H_in * K + K                        (H_in = sum(tokens) * D, or D when mean-pooled)
    """
    d, f, k, c = cfg.d_model, cfg.d_ff, cfg.n_classes, cfg.n_channels
    single = cfg.variant == "single_channel_patching"
    embed = sum((l if single else l * c) * d for l in cfg.patch_lengths) + len(cfg.patch_lengths) * d
    blocks = 1 if cfg.variant == "no_inter_attention" else 2
    layer = blocks * 4 * (d * d + d) + (d * f + f) + (f * d + d) + 6 * d
    head_in = d if cfg.pooling == "mean" else sum(cfg.token_counts()) * d
    return embed + cfg.n_layers * layer + head_in * k + k


class Medformer(Module):
    """Patch embedding, ``M`` two-stage encoder layers and a linear head.

    The representation fed to the head is the flattened concatenation of
    the final patch tokens of all branches; routers are not part of it.
    """

    def __init__(self, config: ModelConfig, seed: int | np.random.Generator = 0):
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        self._config = config
        dtype = config.dtype
        self.embedding = PatchEmbedding(
            config.granularity, config.n_channels, config.d_model, rng,
            augmentation=config.augmentation,
            channel_independent=config.variant == "single_channel_patching",
            dtype=dtype,
        )
        self.encoder = EncoderStack(
            config.n_layers, config.d_model, config.n_heads, config.d_ff, rng,
            dropout=config.dropout, activation=config.activation,
            inter=config.variant != "no_inter_attention", dtype=dtype,
        )
        head_in = config.d_model if config.pooling == "mean" else sum(config.token_counts()) * config.d_model
        self.head = Linear(head_in, config.n_classes, rng, dtype=dtype)

    @property
    def config(self) -> ModelConfig:
        return self._config

    def _check_batch(self, batch) -> Tensor:
        arr = batch.data if isinstance(batch, Tensor) else np.asarray(batch)
        cfg = self._config
        if arr.ndim != 3 or arr.shape[1:] != (cfg.seq_len, cfg.n_channels):
            raise ShapeError(
                f"batch shape {arr.shape} does not match (B, {cfg.seq_len}, {cfg.n_channels})"
            )
        if isinstance(batch, Tensor) and batch.dtype == cfg.dtype:
            return batch
        return Tensor(arr, dtype=cfg.dtype)

    def encode(self, batch, training: bool = False,
               rng: np.random.Generator | None = None) -> list[TokenState]:
        x = self._check_batch(batch)
        state = self.embedding.embed_all(x, training, rng)
        return self.encoder(state, training, rng)

    def representation(self, state: list[TokenState]) -> Tensor:
        tokens = T.concat([br.x for br in state], axis=1)
        if self._config.pooling == "mean":
            return T.mean(tokens, axis=1)
        b, n, d = tokens.shape
        return T.reshape(tokens, (b, n * d))

    def __call__(self, batch, training: bool = False,
                 rng: np.random.Generator | None = None) -> Tensor:
        """Class logits ``(B, K)`` for a ``(B, T, C)`` batch."""
        return self.head(self.representation(self.encode(batch, training, rng)))

    forward = __call__

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise ShapeError(f"parameter names differ: missing={sorted(missing)} "
                             f"unexpected={sorted(extra)}")
        for name, p in params.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ShapeError(f"parameter {name}: checkpoint shape {arr.shape} "
                                 f"!= model shape {p.shape}")
            p.data = np.array(arr, dtype=p.dtype, copy=True)


def build_variant(config: ModelConfig, seed: int | np.random.Generator = 0) -> Medformer:
    """Build the model for ``config.variant`` (validated by :class:`ModelConfig`)."""
    if config.variant not in VARIANTS:
        raise ConfigError(f"unknown variant {config.variant!r}")
    return Medformer(config, seed)


# -- checkpoints -----------------------------------------------------------------
#
# little-endian layout:
#   magic        8 bytes  b"MDFRCKPT"
#   version      u32
#   config_len   u32, then config JSON (utf-8)
#   digest       32 bytes sha256 of the config JSON
#   n_arrays     u32
#   per array:   name_len u16, name utf-8, dtype u8 (0=f32, 1=f64), ndim u8,
#                dims u32 * ndim, raw data
#   trailer      32 bytes sha256 over everything above

CKPT_MAGIC = b"MDFRCKPT"
CKPT_VERSION = 1
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {v: k.newbyteorder("<") for k, v in _DTYPE_CODES.items()}


def save_params(model: Medformer, path: str | Path) -> None:
    cfg_json = model.config.to_json().encode()
    parts = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(cfg_json)), cfg_json,
             hashlib.sha256(cfg_json).digest()]
    named = list(model.named_parameters())
    parts.append(struct.pack("<I", len(named)))
    for name, p in named:
        raw_name = name.encode()
        arr = p.data
        parts.append(struct.pack("<HBB", len(raw_name), _DTYPE_CODES[arr.dtype], arr.ndim))
        parts.append(raw_name)
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes())
    body = b"".join(parts)
    Path(path).write_bytes(body + hashlib.sha256(body).digest())


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"file truncated: needed {n} bytes at offset {self.pos}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_params(path: str | Path,
                expected: ModelConfig | None = None) -> tuple[ModelConfig, dict[str, np.ndarray]]:
    """Read a checkpoint fully and validate it before returning anything.

    With ``expected`` given, every array must match the shape that config
    would produce (so a 2-class checkpoint cannot be loaded as 3-class).
    """
    buf = Path(path).read_bytes()
    if buf[:len(CKPT_MAGIC)] != CKPT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic)")
    if len(buf) < len(CKPT_MAGIC) + 32:
        raise FormatError(f"{path}: file truncated")
    body, trailer = buf[:-32], buf[-32:]
    r = _Reader(body)
    r.take(len(CKPT_MAGIC))
    version, cfg_len = r.unpack("<II")
    if version != CKPT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    if hashlib.sha256(body).digest() != trailer:
        raise FormatError(f"{path}: checksum mismatch (corrupted or truncated file)")
    cfg_json = r.take(cfg_len)
    if hashlib.sha256(cfg_json).digest() != r.take(32):
        raise FormatError(f"{path}: config digest mismatch")
    try:
        config = ModelConfig.from_json(cfg_json.decode())
    except (ValueError, TypeError) as exc:
        raise FormatError(f"{path}: invalid embedded config: {exc}") from exc

    (count,) = r.unpack("<I")
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        name_len, code, ndim = r.unpack("<HBB")
        name = r.take(name_len).decode()
        if code not in _CODE_DTYPES:
            raise FormatError(f"{path}: unknown dtype code {code} for {name}")
        shape = r.unpack(f"<{ndim}I")
        dtype = _CODE_DTYPES[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        arrays[name] = np.frombuffer(r.take(nbytes), dtype=dtype).reshape(shape).astype(
            dtype.newbyteorder("="))
    if r.pos != len(body):
        raise FormatError(f"{path}: {len(body) - r.pos} trailing bytes")

    if expected is not None:
        reference = {name: p.shape for name, p in Medformer(expected).named_parameters()}
        for name, shape in reference.items():
            if name not in arrays:
                raise ShapeError(f"checkpoint lacks parameter {name}")
            if arrays[name].shape != shape:
                raise ShapeError(f"parameter {name}: checkpoint shape {arrays[name].shape} "
                                 f"!= expected {shape}")
        extra = set(arrays) - set(reference)
        if extra:
            raise ShapeError(f"checkpoint has unexpected parameters {sorted(extra)}")
    return config, arrays


def load_model(path: str | Path, expected: ModelConfig | None = None) -> Medformer:
    config, arrays = load_params(path, expected)
    model = Medformer(expected or config)
    model.load_state_dict(arrays)
    return model
