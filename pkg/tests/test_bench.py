import csv
import io

import numpy as np
import pytest

from medformer import tensor as T
from medformer.bench import (CSV_COLUMNS, bench_point, naive_concat_attention, points_to_csv,
                             power_series, power_series_bound, random_state, run_complexity_sweep,
                             two_stage_attention)
from medformer.embed import GranularitySpec, TokenState
from medformer.encoder import MedformerLayer
from medformer.errors import ConfigError, ResourceLimitError


def test_power_series():
    assert power_series(256) == (2, 4, 8, 16, 32, 64, 128)
    assert power_series(100) == (2, 4, 8, 16, 32, 64)
    with pytest.raises(ConfigError):
        power_series(2)


@pytest.mark.parametrize("t", [64, 128, 256, 512, 1024, 2048, 4096])
def test_power_series_inequality(t):
    counts = GranularitySpec(power_series(t), t).patch_counts
    total = sum(n * n for n in counts)
    assert total <= power_series_bound(t)
    assert total / t ** 2 <= 0.34 + 3 / t


def test_naive_equals_intra_for_single_branch():
    rng = np.random.default_rng(0)
    layer = MedformerLayer(8, 2, 16, rng, dropout=0.0, dtype=np.float64)
    x = T.tensor(rng.standard_normal((1, 6, 8)))
    state = [TokenState(x, T.tensor(rng.standard_normal((1, 1, 8))))]
    naive = naive_concat_attention(state, layer)[0].x.data
    direct = layer.intra_attn(x, x, x).data  # intra with the router stripped
    np.testing.assert_allclose(naive, direct, atol=1e-6)


def test_naive_token_cap_and_count():
    spec = GranularitySpec((2, 4, 8, 16, 32), 256)
    rng = np.random.default_rng(0)
    layer = MedformerLayer(8, 1, 16, rng, dropout=0.0)
    state = random_state(spec, 8, rng)
    assert sum(b.x.shape[1] for b in state) == 248
    with pytest.raises(ResourceLimitError):
        naive_concat_attention(state, layer, max_tokens=200)
    out = naive_concat_attention(state, layer)
    assert [b.x.shape for b in out] == [b.x.shape for b in state]
    assert len(two_stage_attention(state, layer)) == 5


def test_bench_point_counts():
    lengths = (2, 4, 8, 16, 32)
    naive = bench_point(256, lengths, "naive", d_model=8, repeats=1, warmup=0)
    two = bench_point(256, lengths, "two_stage", d_model=8, repeats=1, warmup=0)
    assert naive.pair_count_measured == naive.pair_count_formula == 61504
    assert two.pair_count_patches == 21849
    assert two.pair_count_measured == two.pair_count_formula == 22350
    assert naive.pair_count_patches / two.pair_count_patches == pytest.approx(2.815, abs=1e-3)
    with pytest.raises(ConfigError):
        bench_point(64, lengths, "flash")


def test_sweep_csv(tmp_path):
    path = tmp_path / "bench.csv"
    points = run_complexity_sweep([32, 64], modes=("two_stage", "naive"), csv_path=path,
                                  d_model=8, repeats=1, warmup=0)
    rows = list(csv.DictReader(io.StringIO(path.read_text())))
    assert len(rows) == 4 and tuple(rows[0]) == CSV_COLUMNS
    for row in rows:
        assert row["pair_count_formula"] == row["pair_count_measured"]
        assert int(row["wall_time_ns_median"]) > 0
    assert path.read_text() == points_to_csv(points)
    with pytest.raises(ConfigError):
        run_complexity_sweep([64, 32])


def test_quadratic_growth():
    pts = {p.seq_len: p for p in run_complexity_sweep([128, 256], modes=("naive", "two_stage"),
                                                      d_model=8, repeats=1, warmup=0)
           if p.mode == "two_stage"}
    ratio = pts[256].pair_count_patches / pts[128].pair_count_patches
    assert 3.8 < ratio < 4.1
