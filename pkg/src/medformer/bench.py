"""Attention cost of two-stage multi-granularity attention vs naive concatenation.

Two workloads are compared on identical random token states:

* ``two_stage``: per-branch attention over ``[x_i ; u_i]`` followed by
  attention over the routers, with ``sum (N_i+1)^2 + n^2`` score entries;
* ``naive``: one dense attention over all patch tokens concatenated, with
  ``(sum N_i)^2`` entries.

Counts come from the score-matrix instrumentation in :mod:`medformer.nn` and
are checked against the closed forms; timings are medians over repeats.
"""

from __future__ import annotations

import csv
import io
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .embed import GranularitySpec, TokenState
from .encoder import MedformerLayer, attention_pair_count, inter_attention, intra_attention
from .errors import ConfigError, ResourceLimitError
from .nn import count_scores

MODES = ("two_stage", "naive")
DEFAULT_T = (64, 128, 256, 512, 1024)
CSV_COLUMNS = ("T", "mode", "pair_count_formula", "pair_count_measured", "wall_time_ns_median",
               "pair_count_patches", "n_tokens", "peak_scores", "patch_lengths")


def power_series(seq_len: int) -> tuple[int, ...]:
    """Patch lengths ``2, 4, 8, ...`` strictly below ``seq_len``."""
    out, length = [], 2
    while length < seq_len:
        out.append(length)
        length *= 2
    if not out:
        raise ConfigError(f"no power-of-two patch length below T={seq_len}")
    return tuple(out)


def power_series_bound(seq_len: int) -> float:
    """``T^2/3 + 2T + log2(T)``, an upper bound on ``sum N_i^2`` for :func:`power_series`."""
    return seq_len ** 2 / 3.0 + 2.0 * seq_len + math.log2(seq_len)


def naive_concat_attention(state: Sequence[TokenState], layer: MedformerLayer,
                           max_tokens: int = 4096) -> list[TokenState]:
    """Dense self-attention over every patch token of every branch.

    Routers are not attended and are passed through unchanged. Raises
    :class:`ResourceLimitError` when the concatenation exceeds ``max_tokens``.
    """
    counts = [br.x.shape[-2] for br in state]
    total = sum(counts)
    if total > max_tokens:
        raise ResourceLimitError(f"naive attention over {total} tokens exceeds the cap of {max_tokens}")
    tokens = T.concat([br.x for br in state], axis=-2)
    out = layer.intra_attn(tokens, tokens, tokens)
    result, start = [], 0
    for br, n in zip(state, counts):
        result.append(TokenState(T.slice_axis(out, -2, start, start + n), br.u))
        start += n
    return result


def two_stage_attention(state: Sequence[TokenState], layer: MedformerLayer) -> list[TokenState]:
    """Raw intra then inter attention outputs (no residuals, norms or FFN)."""
    mixed = [intra_attention(br, layer) for br in state]
    routers = inter_attention([m.u for m in mixed], layer)
    return [TokenState(m.x, u) for m, u in zip(mixed, routers)]


@dataclass(frozen=True)
class BenchPoint:
    seq_len: int
    mode: str
    patch_lengths: tuple[int, ...]
    n_channels: int
    d_model: int
    pair_count_formula: int
    pair_count_measured: int
    pair_count_patches: int
    peak_scores: int
    wall_time_ns: int
    n_tokens: int

    def row(self) -> list:
        return [self.seq_len, self.mode, self.pair_count_formula, self.pair_count_measured,
                self.wall_time_ns, self.pair_count_patches, self.n_tokens, self.peak_scores,
                " ".join(map(str, self.patch_lengths))]


def random_state(spec: GranularitySpec, d_model: int, rng: np.random.Generator,
                 batch: int = 1) -> list[TokenState]:
    return [TokenState(T.tensor(rng.standard_normal((batch, n, d_model)).astype(np.float32)),
                       T.tensor(rng.standard_normal((batch, 1, d_model)).astype(np.float32)))
            for n in spec.patch_counts]


def _median_ns(fn: Callable[[], object], repeats: int, warmup: int) -> int:
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter_ns()
        fn()
        times.append(time.perf_counter_ns() - t0)
    return int(np.median(times))


def bench_point(seq_len: int, patch_lengths: Sequence[int], mode: str, d_model: int = 64,
                n_heads: int = 1, batch: int = 4, n_channels: int = 1, repeats: int = 9,
                warmup: int = 2, seed: int = 0, max_tokens: int = 4096) -> BenchPoint:
    if mode not in MODES:
        raise ConfigError(f"unknown bench mode {mode!r}; expected one of {MODES}")
    if repeats < 1 or warmup < 0:
        raise ConfigError("repeats must be >= 1 and warmup >= 0")
    spec = GranularitySpec(tuple(patch_lengths), seq_len)
    rng = np.random.default_rng(seed)
    layer = MedformerLayer(d_model, n_heads, 2 * d_model, rng, dropout=0.0)
    state = random_state(spec, d_model, rng, batch)

    if mode == "naive":
        run = lambda: naive_concat_attention(state, layer, max_tokens)  # noqa: E731
        formula = patches = attention_pair_count(spec, "naive")
    else:
        run = lambda: two_stage_attention(state, layer)  # noqa: E731
        formula = attention_pair_count(spec, "two_stage", include_routers=True)
        patches = attention_pair_count(spec, "two_stage")

    with T.no_grad():
        with count_scores() as counter:
            run()
        wall = _median_ns(run, repeats, warmup)
    return BenchPoint(seq_len, mode, spec.patch_lengths, n_channels, d_model, formula,
                      counter.entries, patches, counter.peak, wall, sum(spec.patch_counts))


def run_complexity_sweep(seq_lens: Sequence[int] = DEFAULT_T,
                         patch_list_builder: Callable[[int], Sequence[int]] = power_series,
                         modes: Sequence[str] = MODES, csv_path: str | Path | None = None,
                         **kwargs) -> list[BenchPoint]:
    """One :class:`BenchPoint` per ``(T, mode)``, optionally written as CSV.

    Raises:
        ConfigError: ``seq_lens`` is not ascending, or a mode is unknown.
        AssertionError: An instrumented count disagrees with its formula.
    """
    seq_lens = list(seq_lens)
    if seq_lens != sorted(seq_lens):
        raise ConfigError("sequence lengths must be sorted ascending")
    points = []
    for t in seq_lens:
        lengths = tuple(patch_list_builder(t))
        for mode in modes:
            p = bench_point(t, lengths, mode, **kwargs)
            if p.pair_count_measured != p.pair_count_formula:
                raise AssertionError(f"T={t} {mode}: measured {p.pair_count_measured} "
                                     f"!= formula {p.pair_count_formula}")
            points.append(p)
    if csv_path is not None:
        Path(csv_path).write_text(points_to_csv(points), encoding="utf-8")
    return points


def points_to_csv(points: Sequence[BenchPoint]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for p in points:
        writer.writerow(p.row())
    return buf.getvalue()
