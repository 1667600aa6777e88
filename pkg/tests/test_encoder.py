import numpy as np
import pytest

from medformer import tensor as T
from medformer.embed import GranularitySpec, TokenState
from medformer.encoder import (EncoderStack, MedformerLayer, attention_pair_count, encoder_layer,
                               inter_attention, intra_attention)
from medformer.errors import ConfigError
from medformer.nn import count_scores
from oracles import dense_attention


def make_layer(d=8, heads=2, seed=0, inter=True):
    return MedformerLayer(d, heads, 2 * d, np.random.default_rng(seed), dropout=0.0,
                          inter=inter, dtype=np.float64)


def random_state(counts, d=8, seed=0, batch=1):
    rng = np.random.default_rng(seed)
    return [TokenState(T.tensor(rng.standard_normal((batch, n, d))),
                       T.tensor(rng.standard_normal((batch, 1, d)))) for n in counts]


@pytest.mark.parametrize("n_tokens", [1, 3, 9])
def test_intra_matches_dense_oracle(n_tokens):
    layer = make_layer(seed=n_tokens)
    (branch,) = random_state([n_tokens], seed=n_tokens)
    out = intra_attention(branch, layer)
    z = np.concatenate([branch.x.data[0], branch.u.data[0]])
    ref = dense_attention(layer.intra_attn, z)
    np.testing.assert_allclose(out.x.data[0], ref[:n_tokens], atol=1e-6)
    np.testing.assert_allclose(out.u.data[0], ref[n_tokens:], atol=1e-6)
    assert out.x.shape == branch.x.shape and out.u.shape == branch.u.shape


def test_inter_matches_dense_oracle_and_per_router_form():
    layer = make_layer(seed=5)
    state = random_state([2, 2, 2, 2, 2], seed=5)
    routers = [br.u for br in state]
    out = inter_attention(routers, layer)
    u = np.concatenate([r.data[0] for r in routers])
    np.testing.assert_allclose(np.concatenate([o.data[0] for o in out]),
                               dense_attention(layer.inter_attn, u), atol=1e-6)
    stacked = T.concat(routers, axis=1)
    for r, o in zip(routers, out):
        single = layer.inter_attn(r, stacked, stacked)
        np.testing.assert_allclose(single.data, o.data, atol=1e-12)


def test_inter_single_router_is_value_path():
    layer = make_layer(seed=1)
    (branch,) = random_state([3], seed=1)
    (out,) = inter_attention([branch.u], layer)
    expected = layer.inter_attn.out_proj(layer.inter_attn.v_proj(branch.u))
    np.testing.assert_allclose(out.data, expected.data, atol=1e-12)


def test_intra_branch_isolation():
    layer = make_layer(seed=2)
    state = random_state([4, 2], seed=2)
    before = intra_attention(state[0], layer).x.data
    zeroed = [state[0], TokenState(T.tensor(np.zeros_like(state[1].x.data)), state[1].u)]
    out = encoder_layer(zeroed, layer)
    after = intra_attention(zeroed[0], layer).x.data
    np.testing.assert_array_equal(before, after)
    assert out[0].x.shape == state[0].x.shape


def test_single_shared_intra_block():
    layer = make_layer()
    names = [n for n, _ in layer.named_parameters()]
    assert sum(n.startswith("intra_attn.q_proj.weight") for n in names) == 1
    assert sum(n.startswith("inter_attn.q_proj.weight") for n in names) == 1


def test_stack_preserves_shapes_and_order():
    spec = GranularitySpec((2, 4, 8, 16, 32), 256)
    stack = EncoderStack(6, 128, 8, 256, np.random.default_rng(0), dropout=0.0)
    state = random_state(spec.patch_counts, d=128, seed=0)
    state = [TokenState(T.tensor(b.x.data.astype(np.float32)), T.tensor(b.u.data.astype(np.float32)))
             for b in state]
    out = stack(state)
    assert [b.x.shape for b in out] == [(1, n, 128) for n in spec.patch_counts]
    assert all(b.u.shape == (1, 1, 128) for b in out)


def test_branch_order_equivariance():
    layer = make_layer(seed=3)
    state = random_state([3, 5, 2], seed=3)
    fwd = encoder_layer(state, layer)
    rev = encoder_layer(state[::-1], layer)[::-1]
    for a, b in zip(fwd, rev):
        np.testing.assert_allclose(a.x.data, b.x.data, atol=1e-12)
        np.testing.assert_allclose(a.u.data, b.u.data, atol=1e-12)


def test_zeroed_inter_block_equals_no_inter_layer():
    full = make_layer(seed=4)
    ablated = make_layer(seed=4, inter=False)
    for name, p in ablated.named_parameters():
        p.data = dict(full.named_parameters())[name].data.copy()
    for lin in (full.inter_attn.v_proj, full.inter_attn.out_proj):
        lin.weight.data[:] = 0
        lin.bias.data[:] = 0
    state = random_state([4, 2, 1], seed=4)
    for a, b in zip(encoder_layer(state, full), encoder_layer(state, ablated)):
        np.testing.assert_array_equal(a.x.data, b.x.data)
        np.testing.assert_array_equal(a.u.data, b.u.data)


def test_routers_carry_across_layers():
    stack = EncoderStack(3, 8, 2, 16, np.random.default_rng(0), dropout=0.0, dtype=np.float64)
    state = random_state([4, 2], seed=6)
    moved = [state[0], TokenState(state[1].x, T.tensor(state[1].u.data + 1.0))]
    a, b = stack(state), stack(moved)
    assert not np.allclose(a[0].x.data, b[0].x.data)


def test_measured_pairs_per_layer():
    spec = GranularitySpec((2, 4, 8), 16)
    layer = make_layer()
    state = random_state(spec.patch_counts)
    with count_scores() as counter:
        encoder_layer(state, layer)
    assert counter.entries == attention_pair_count(spec, "two_stage", include_routers=True)
    assert counter.entries == sum((n + 1) ** 2 for n in spec.patch_counts) + 9


def test_pair_count_examples():
    spec = GranularitySpec((2, 4, 8, 16, 32), 256)
    assert attention_pair_count(spec, "naive") == 61504
    assert attention_pair_count(spec, "two_stage") == 21849
    assert attention_pair_count(spec, "two_stage", include_routers=True) == 22350
    power = GranularitySpec(tuple(2 ** i for i in range(1, 8)), 256)
    assert attention_pair_count(power, "two_stage") - 49 == 21844 <= 256 ** 2 / 3 + 2 * 256 + 7
    one = GranularitySpec((1,), 64)
    assert attention_pair_count(one, "naive") == 64 ** 2
    # a lone router still attends to itself: one extra score entry
    assert attention_pair_count(one, "two_stage") == 64 ** 2 + 1
    with pytest.raises(ConfigError):
        attention_pair_count(one, "sparse")


def test_inter_requires_block_and_routers():
    with pytest.raises(ConfigError):
        inter_attention([], make_layer())
    with pytest.raises(ConfigError):
        inter_attention([random_state([1])[0].u], make_layer(inter=False))
