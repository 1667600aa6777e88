"""Run configuration: ``key=value`` files, flag overrides and validation.

File syntax: one ``key = value`` per line, ``#`` starts a comment, lists are
comma separated (``patch_len = 8,8,8,16,16,16``). Keys may use ``-`` or
``_``. Empty values mean "unset" for optional lists.
"""

from __future__ import annotations

import typing
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional

from .data import SplitPlan
from .errors import ConfigError
from .model import VARIANTS, ModelConfig
from .training import TrainConfig


@dataclass(frozen=True)
class RunConfig:
    """Everything a train / eval / ablate run needs besides the data itself."""

    dataset: str = ""
    outdir: str = "runs"
    run_id: str = ""
    seeds: tuple[int, ...] = (41,)
    jobs: int = 1
    # data handling
    scale: bool = True
    split_mode: str = "subject_independent"
    split_ratios: tuple[float, ...] = (0.6, 0.2, 0.2)
    split_seed: int = 0
    train_subjects: Optional[tuple[int, ...]] = None
    val_subjects: Optional[tuple[int, ...]] = None
    test_subjects: Optional[tuple[int, ...]] = None
    # model
    d_model: int = 128
    n_layers: int = 6
    d_ff: int = 256
    n_heads: int = 8
    dropout: float = 0.1
    patch_len: tuple[int, ...] = (2, 4, 8, 16, 32)
    aug: tuple[str, ...] = ("none",)
    aug_per: str = "branch"
    activation: str = "gelu"
    precision: str = "f32"
    pooling: str = "flatten"
    variant: str = "full"
    variants: tuple[str, ...] = VARIANTS
    # optimisation
    lr: float = 1e-4
    batch_size: int = 32
    max_epochs: int = 100
    patience: int = 10

    def __post_init__(self):
        if not self.seeds:
            raise ConfigError("seeds must list at least one seed")
        if self.jobs < 1:
            raise ConfigError(f"jobs must be >= 1, got {self.jobs}")
        unknown = set(self.variants) - set(VARIANTS)
        if unknown or not self.variants:
            raise ConfigError(f"unknown variants {sorted(unknown)}; expected a subset of {VARIANTS}")
        if "/" in self.run_id or self.run_id in (".", ".."):
            raise ConfigError(f"run_id must be a plain name, got {self.run_id!r}")
        # validate the pieces that do not depend on the data
        self.train_config(self.seeds[0])
        self.split_plan()
        self.model_config(seq_len=max(self.patch_len), n_channels=1, n_classes=2)

    def model_config(self, seq_len: int, n_channels: int, n_classes: int,
                     variant: str | None = None) -> ModelConfig:
        return ModelConfig(
            seq_len=seq_len, n_channels=n_channels, n_classes=n_classes,
            d_model=self.d_model, n_layers=self.n_layers, d_ff=self.d_ff, n_heads=self.n_heads,
            dropout=self.dropout, patch_lengths=self.patch_len, augmentations=self.aug,
            aug_per=self.aug_per, activation=self.activation, precision=self.precision,
            variant=variant or self.variant, pooling=self.pooling,
        )

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(lr=self.lr, batch_size=self.batch_size, max_epochs=self.max_epochs,
                           patience=self.patience, seed=seed)

    def split_plan(self) -> SplitPlan:
        return SplitPlan(mode=self.split_mode, ratios=tuple(self.split_ratios), seed=self.split_seed,
                         train_subjects=self.train_subjects, val_subjects=self.val_subjects,
                         test_subjects=self.test_subjects)

    def replace(self, **changes) -> RunConfig:
        values = {f.name: getattr(self, f.name) for f in fields(self)}
        values.update(changes)
        return RunConfig(**values)

    def dumps(self) -> str:
        """Fully resolved ``key=value`` text; :func:`loads` inverts it."""
        lines = []
        for f in fields(self):
            lines.append(f"{f.name}={format_value(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"


def format_value(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ",".join(format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _parse_scalar(kind, text: str, key: str):
    try:
        if kind is bool:
            low = text.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError
        return kind(text)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {kind.__name__}") from None


def parse_value(key: str, text: str):
    """Convert ``text`` to the type of :class:`RunConfig` field ``key``."""
    hints = typing.get_type_hints(RunConfig)
    if key not in hints:
        raise ConfigError(f"unknown config key {key!r}")
    kind = hints[key]
    text = text.strip()
    optional = False
    if typing.get_origin(kind) is typing.Union:
        args = [a for a in typing.get_args(kind) if a is not type(None)]
        kind, optional = args[0], True
    if typing.get_origin(kind) is tuple:
        if text == "":
            if optional:
                return None
            return ()
        item = typing.get_args(kind)[0]
        return tuple(_parse_scalar(item, part.strip(), key) for part in text.split(",") if part.strip())
    if text == "" and optional:
        return None
    return _parse_scalar(kind, text, key)


def normalise_key(key: str) -> str:
    return key.strip().replace("-", "_")


def read_config_file(path: str | Path) -> dict[str, str]:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    out: dict[str, str] = {}
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {raw.strip()!r}")
        key, value = line.split("=", 1)
        out[normalise_key(key)] = value.strip()
    return out


def resolve(file_values: dict[str, str] | None = None,
            overrides: dict[str, str] | None = None) -> RunConfig:
    """Merge file values with flag overrides (flags win), parse, then validate."""
    merged = dict(file_values or {})
    merged.update({normalise_key(k): v for k, v in (overrides or {}).items() if v is not None})
    parsed = {key: parse_value(key, value) for key, value in merged.items()}
    return RunConfig(**parsed)


def field_names() -> list[str]:
    return [f.name for f in fields(RunConfig)]
