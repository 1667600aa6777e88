import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from medformer import tensor as T
from medformer.embed import (AugmentationConfig, AugOption, GranularitySpec, PatchEmbedding,
                             augment, parse_augmentation, segment, segment_per_channel,
                             sinusoidal_table, unsegment)
from medformer.errors import ConfigError, ShapeError


def make_embedding(lengths, t=16, c=3, d=8, seed=0, **kw):
    return PatchEmbedding(GranularitySpec(tuple(lengths), t), c, d, np.random.default_rng(seed),
                          dtype=np.float64, **kw)


def test_patch_counts():
    assert GranularitySpec((32,), 256).patch_counts == (8,)
    spec = GranularitySpec((32,), 300)
    assert spec.patch_counts == (10,) and spec.padded_lengths == (320,)
    assert GranularitySpec((2, 4, 8, 16, 32), 256).patch_counts == (128, 64, 32, 16, 8)
    assert GranularitySpec((8, 8, 8, 16, 16, 16), 256).patch_counts == (32, 32, 32, 16, 16, 16)


def test_granularity_spec_validation():
    with pytest.raises(ConfigError):
        GranularitySpec((), 16)
    with pytest.raises(ConfigError):
        GranularitySpec((0, 2), 16)


def test_segment_end_padding():
    x = np.arange(1.0, 6.0).reshape(5, 1)
    np.testing.assert_array_equal(segment(x, 2).data, [[1, 2], [3, 4], [5, 0]])


def test_segment_is_timestamp_major():
    x = np.arange(12.0).reshape(4, 3)  # T=4, C=3
    np.testing.assert_array_equal(segment(x, 2).data, [x[0:2].reshape(-1), x[2:4].reshape(-1)])


@settings(max_examples=40, deadline=None)
@given(t=st.integers(1, 40), length=st.integers(1, 12), c=st.integers(1, 4), seed=st.integers(0, 99))
def test_segment_reconstruction(t, length, c, seed):
    x = np.random.default_rng(seed).standard_normal((t, c))
    patches = segment(x, length).data
    n = patches.shape[0]
    assert n == -(-t // length)
    assert 0 <= n * length - t < length
    np.testing.assert_array_equal(unsegment(patches, length, c, t), x)


def test_segment_per_channel_layout():
    x = np.arange(8.0).reshape(4, 2)  # channel 0 = evens, channel 1 = odds
    out = segment_per_channel(x, 2).data
    np.testing.assert_array_equal(out, [[0, 2], [4, 6], [1, 3], [5, 7]])


def test_projection_equals_strided_convolution():
    rng = np.random.default_rng(0)
    t, c, length, d = 11, 3, 4, 5
    emb = make_embedding([length], t=t, c=c, d=d)
    x = rng.standard_normal((t, c))
    kernel = emb.projections[0].weight.data.reshape(length, c, d)
    padded = np.vstack([x, np.zeros((3 * length - t, c))])
    direct = np.array([[np.sum(padded[j * length:(j + 1) * length] * kernel[:, :, o])
                        for o in range(d)] for j in range(3)])
    np.testing.assert_allclose(emb.project(x[None], 0).data[0], direct, atol=1e-12)


def test_sinusoidal_table_values():
    table = sinusoidal_table(4, 6, np.float64)
    pos = np.arange(4)[:, None]
    freq = 1.0 / 10000 ** (np.arange(0, 6, 2) / 6)
    np.testing.assert_allclose(table[:, 0::2], np.sin(pos * freq))
    np.testing.assert_allclose(table[:, 1::2], np.cos(pos * freq))


def test_zero_projection_gives_position_plus_granularity():
    emb = make_embedding([4, 8], t=16)
    for lin in emb.projections:
        lin.weight.data[:] = 0
    state = emb.embed_all(np.random.default_rng(1).standard_normal((2, 16, 3)))
    pos = emb.positional_table.data
    for i, (br, n) in enumerate(zip(state, (4, 2))):
        expected = pos[:n] + emb.granularity.data[i]
        np.testing.assert_array_equal(br.x.data, np.broadcast_to(expected, (2, n, 8)))
        np.testing.assert_array_equal(br.u.data[:, 0], np.broadcast_to(pos[n] + emb.granularity.data[i], (2, 8)))


def test_router_row_for_t256_l32():
    emb = make_embedding([32], t=256, c=1)
    state = emb.embed_granularity(np.zeros((1, 256, 1)), 0)
    np.testing.assert_array_equal(state.u.data[0, 0],
                                  emb.positional_table.data[8] + emb.granularity.data[0])


def test_duplicate_lengths_differ_by_granularity_rows():
    emb = make_embedding([4, 4], t=16)
    emb.projections[1].weight.data[:] = emb.projections[0].weight.data
    a, b = emb.embed_all(np.random.default_rng(2).standard_normal((1, 16, 3)))
    diff = emb.granularity.data[0] - emb.granularity.data[1]
    np.testing.assert_allclose(a.x.data - b.x.data, np.broadcast_to(diff, a.x.shape), atol=1e-12)


def test_duplicate_lengths_have_independent_weights():
    emb = make_embedding([4, 4], t=16)
    assert not np.array_equal(emb.projections[0].weight.data, emb.projections[1].weight.data)
    assert emb.granularity.shape == (2, 8)


def test_branches_are_independent():
    x = np.random.default_rng(3).standard_normal((1, 16, 3))
    emb = make_embedding([2, 4, 8])
    before = [br.x.data.copy() for br in emb.embed_all(x)]
    emb.projections[1].weight.data += 1.0
    after = [br.x.data for br in emb.embed_all(x)]
    np.testing.assert_array_equal(before[0], after[0])
    np.testing.assert_array_equal(before[2], after[2])
    assert not np.array_equal(before[1], after[1])


def test_positional_table_gets_no_gradient():
    emb = make_embedding([4, 8])
    state = emb.embed_all(np.random.default_rng(4).standard_normal((2, 16, 3)))
    T.tsum(T.concat([br.x for br in state] + [br.u for br in state], axis=1)).backward()
    assert emb.positional_table.grad is None
    assert not emb.positional_table.requires_grad
    assert emb.granularity.grad is not None and emb.projections[0].weight.grad is not None
    assert "_pos" not in dict(emb.named_parameters())


def test_capacity_and_shape_errors():
    emb = make_embedding([1], t=16, pos_capacity=10)
    with pytest.raises(ConfigError):
        emb.embed_granularity(np.zeros((1, 16, 3)), 0)
    with pytest.raises(ShapeError):
        make_embedding([4]).embed_all(np.zeros((1, 15, 3)))


def test_single_channel_patching_counts():
    emb = make_embedding([4, 8], channel_independent=True)
    state = emb.embed_all(np.zeros((1, 16, 3)))
    assert [br.x.shape[1] for br in state] == [12, 6]
    assert emb.projections[0].weight.shape == (4, 8)


# -- augmentation ------------------------------------------------------------------


def test_parse_augmentation_grammar():
    assert parse_augmentation("none") == AugOption("none")
    assert parse_augmentation("mask0.25") == AugOption("mask", 0.25)
    assert parse_augmentation("jitter0.2") == AugOption("jitter", 0.2)
    assert str(parse_augmentation("scale1e-1")) == "scale0.1"
    for bad in ("mask", "mask1.5", "blur0.1", "none0.2", "jitter-1"):
        with pytest.raises(ConfigError):
            parse_augmentation(bad)
    with pytest.raises(ConfigError):
        AugmentationConfig(())


def _apply(spec, x, per="branch", seed=0, training=True):
    return augment(T.tensor(x), AugmentationConfig.parse(spec, per), training,
                   np.random.default_rng(seed)).data


def test_mask_all_and_zero_jitter():
    x = np.random.default_rng(0).standard_normal((2, 5, 4))
    np.testing.assert_array_equal(_apply("mask1.0", x), 0.0)
    np.testing.assert_array_equal(_apply("jitter0", x), x)


def test_mask_fraction_monte_carlo():
    x = np.ones((10, 100, 100))
    assert abs(np.mean(_apply("mask0.35", x) == 0) - 0.35) < 0.01


def test_eval_mode_identity():
    x = np.random.default_rng(0).standard_normal((2, 5, 4))
    out = augment(T.tensor(x), AugmentationConfig.parse("mask0.5,jitter1,scale1"), False)
    np.testing.assert_array_equal(out.data, x)


def test_one_option_per_branch_sample():
    x = np.ones((400, 6, 4))
    out = _apply("none,mask1.0", x)
    per_sample = out.reshape(400, -1)
    # each sample is either untouched or fully masked
    assert np.all(np.all(per_sample == 1, axis=1) | np.all(per_sample == 0, axis=1))
    assert 0.4 < np.mean(per_sample[:, 0] == 0) < 0.6


def test_per_patch_draws_mix_within_a_sample():
    x = np.ones((50, 40, 4))
    out = _apply("none,mask1.0", x, per="patch")
    rows = out.reshape(50, 40, 4)
    assert np.all(np.all(rows == 1, axis=2) | np.all(rows == 0, axis=2))
    mixed = [(r[:, 0] == 0).any() and (r[:, 0] == 1).any() for r in rows]
    assert all(mixed)


def test_augmentation_seeded():
    x = np.random.default_rng(0).standard_normal((3, 5, 4))
    np.testing.assert_array_equal(_apply("jitter0.3,scale0.2", x, seed=7),
                                  _apply("jitter0.3,scale0.2", x, seed=7))
