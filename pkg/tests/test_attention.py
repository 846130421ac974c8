import numpy as np
import pytest

from scanformer import autodiff as ad
from scanformer.attention import (
    AttentionParams,
    ConvMixerParams,
    GateParam,
    SpanBias,
    bias_preferences,
    conv_mixer,
    fixed_span_bias,
    multi_head_attention,
    read_bias_preferences,
    sag_apply,
    t5_bias,
    write_bias_preferences,
)
from scanformer.autodiff import Tensor

from oracles import naive_attention, naive_conv1d, naive_glu

NEG = -np.inf


def params(d=8, h=2, seed=0):
    return AttentionParams(d, h, np.random.default_rng(seed))


def test_single_token_attends_to_itself(rng):
    p = params()
    x = rng.normal(size=(1, 8))
    out, w = multi_head_attention(Tensor(x), Tensor(x), p, return_weights=True)
    np.testing.assert_array_equal(w.data, np.ones((2, 1, 1)))
    np.testing.assert_allclose(out.data, x @ p.v.data @ p.out.data, atol=1e-12)


def test_zero_query_key_gives_uniform_weights(rng):
    p = params()
    p.q.data[:] = 0.0
    p.k.data[:] = 0.0
    x = Tensor(rng.normal(size=(5, 8)))
    _, w = multi_head_attention(x, x, p, return_weights=True)
    np.testing.assert_allclose(w.data, np.full((2, 5, 5), 0.2), atol=1e-15)


@pytest.mark.parametrize("causal", [False, True])
def test_matches_naive_per_head_loop(rng, causal):
    p = params()
    x = rng.normal(size=(4, 8))
    bias = rng.normal(size=(2, 4, 4))
    out = multi_head_attention(Tensor(x), Tensor(x), p, bias=Tensor(bias), causal=causal).data
    ref = naive_attention(x, x, p.q.data, p.k.data, p.v.data, p.out.data, 2, bias=bias, causal=causal)
    np.testing.assert_allclose(out, ref, atol=1e-6)


def test_cross_attention_shapes(rng):
    p = params()
    out = multi_head_attention(Tensor(rng.normal(size=(3, 8))), Tensor(rng.normal(size=(6, 8))), p)
    assert out.shape == (3, 8)


def test_batched_equals_unbatched(rng):
    p = params()
    x = rng.normal(size=(3, 5, 8))
    batched = multi_head_attention(Tensor(x), Tensor(x), p, causal=True).data
    for b in range(3):
        single = multi_head_attention(Tensor(x[b]), Tensor(x[b]), p, causal=True).data
        np.testing.assert_allclose(batched[b], single, atol=1e-12)


def test_causal_output_ignores_future(rng):
    p = params()
    x = rng.normal(size=(6, 8))
    base = multi_head_attention(Tensor(x), Tensor(x), p, causal=True).data
    x2 = x.copy()
    x2[3:] = rng.normal(size=(3, 8))
    np.testing.assert_array_equal(multi_head_attention(Tensor(x2), Tensor(x2), p, causal=True).data[:3], base[:3])


def test_d_not_divisible_by_heads():
    with pytest.raises(ValueError):
        AttentionParams(10, 4, np.random.default_rng(0))


# -- gate -------------------------------------------------------------------


def test_gate_at_zero_halves(rng):
    x = rng.normal(size=(3, 4))
    np.testing.assert_array_equal(sag_apply(Tensor(x), GateParam(0.0)).data, 0.5 * x)


def test_gate_saturates(rng):
    x = rng.normal(size=(3, 4))
    assert np.abs(sag_apply(Tensor(x), GateParam(20.0)).data - x).max() < 1e-6


def test_gate_default_init_scale():
    g = GateParam(-1.0)
    assert g.value().item() == pytest.approx(0.26894, abs=1e-5)


def test_gate_gradient_matches_finite_differences(rng):
    g = GateParam(0.3)
    x = Tensor(rng.normal(size=(3, 4)))
    w = rng.normal(size=(3, 4))
    assert ad.grad_check(lambda _: ad.sum(ad.mul(sag_apply(x, g), w)), g.beta) < 1e-4


def test_gate_override():
    g = GateParam(-1.0)
    g.override = 1.0
    assert g.value().item() == 1.0


# -- fixed span -------------------------------------------------------------


def test_fixed_span_t3_s1():
    np.testing.assert_array_equal(fixed_span_bias(3, 1).data, [[0, 0, NEG], [0, 0, 0], [NEG, 0, 0]])


def test_fixed_span_unbounded():
    assert not fixed_span_bias(5, 4).data.any()
    assert not fixed_span_bias(5, 10).data.any()


def test_fixed_span_zero_is_diagonal():
    b = fixed_span_bias(4, 0).data
    assert np.array_equal(np.isfinite(b), np.eye(4, dtype=bool))


@pytest.mark.parametrize("s", [0, 1, 2])
def test_fixed_span_locality(rng, s):
    p = params()
    t = 7
    x = rng.normal(size=(t, 8))
    bias = fixed_span_bias(t, s)
    base = multi_head_attention(Tensor(x), Tensor(x), p, bias=bias).data
    for i in range(t):
        far = [j for j in range(t) if abs(i - j) > s]
        if not far:
            continue
        x2 = x.copy()
        x2[far] += rng.normal(size=(len(far), 8))
        out = multi_head_attention(Tensor(x2), Tensor(x2), p, bias=bias).data
        np.testing.assert_allclose(out[i], base[i], atol=1e-12)


# -- t5 bias ----------------------------------------------------------------


def test_t5_zero_table_is_vanilla(rng):
    table = SpanBias("t5", 2, 1, 2)
    p = params()
    x = Tensor(rng.normal(size=(5, 8)))
    bias = t5_bias(table, 0, 5)
    assert not bias.data.any()
    np.testing.assert_allclose(multi_head_attention(x, x, p, bias=bias).data, multi_head_attention(x, x, p).data, atol=1e-12)


def test_t5_parameter_count():
    table = SpanBias("t5", 6, 4, 8)
    assert table.num_parameters() == (2 * 6 + 1) * 4 * 8 == 416
    assert SpanBias("fixed", 6, 4, 8).num_parameters() == 0


def test_t5_capping():
    table = SpanBias("t5", 2, 1, 1)
    table.tables[0].data[:, 0] = np.arange(5.0)  # row r holds offset r - 2
    b = t5_bias(table, 0, 8).data[0]
    assert b[5, 0] == b[2, 0] == 4.0  # offsets 5 and 2 share b_2
    assert b[0, 6] == b[0, 2] == 0.0  # offsets -6 and -2 share b_-2
    assert b[3, 3] == 2.0


def test_t5_causal_and_layer_range():
    table = SpanBias("t5", 1, 2, 2)
    b = t5_bias(table, 1, 3, causal=True).data
    assert np.isneginf(b[:, 0, 1]).all() and np.isfinite(b[:, 1, 0]).all()
    with pytest.raises(IndexError):
        t5_bias(table, 2, 3)
    with pytest.raises(ValueError):
        t5_bias(SpanBias("fixed", 1, 2, 2), 0, 3)


def test_t5_table_gradient(rng):
    table = SpanBias("t5", 2, 1, 2)
    table.tables[0].data[:] = rng.normal(size=(5, 2))
    p = params()
    x = Tensor(rng.normal(size=(6, 8)))
    w = rng.normal(size=(6, 8))
    f = lambda _: ad.sum(ad.mul(multi_head_attention(x, x, p, bias=t5_bias(table, 0, 6, causal=True)), w))  # noqa: E731
    assert ad.grad_check(f, table.tables[0]) < 1e-4


# -- conv mixer -------------------------------------------------------------


def test_glu_half_split():
    assert ad.glu(np.array([0.0, 2.0])).data[0] == 1.0


def test_conv_mixer_zero_weights(rng):
    p = ConvMixerParams(4, 3, rng)
    p.weight.data[:] = 0.0
    assert not conv_mixer(Tensor(rng.normal(size=(5, 4))), p).data.any()


@pytest.mark.parametrize("causal", [False, True])
def test_conv_mixer_matches_naive(rng, causal):
    p = ConvMixerParams(4, 3, rng)
    x = rng.normal(size=(5, 4))
    ref = naive_glu(naive_conv1d(x, p.weight.data, "causal" if causal else "symmetric"))
    np.testing.assert_allclose(conv_mixer(Tensor(x), p, causal).data, ref, atol=1e-6)


@pytest.mark.parametrize("s", [1, 2])
def test_conv_receptive_field_matches_span(rng, s):
    p = ConvMixerParams(4, 2 * s + 1, rng)
    t = 8
    x = rng.normal(size=(t, 4))
    base = conv_mixer(Tensor(x), p).data
    for i in range(t):
        far = [j for j in range(t) if abs(i - j) > s]
        near = [j for j in range(t) if abs(i - j) == s]
        x2 = x.copy()
        x2[far] += 1.0
        np.testing.assert_allclose(conv_mixer(Tensor(x2), p).data[i], base[i], atol=1e-12)
        x3 = x.copy()
        x3[near] += 1.0
        assert not np.allclose(conv_mixer(Tensor(x3), p).data[i], base[i])


def test_conv_mixer_even_kernel_rejected(rng):
    with pytest.raises(ValueError):
        ConvMixerParams(4, 4, rng)


# -- preferences ------------------------------------------------------------


def test_preferences_uniform_for_zero_table():
    d, prefs = bias_preferences(SpanBias("t5", 3, 2, 4))
    assert list(d) == [-3, -2, -1, 0, 1, 2, 3]
    for p in prefs:
        np.testing.assert_allclose(p, np.full((4, 7), 1 / 7))


def test_preferences_rows_normalised(rng):
    table = SpanBias("t5", 2, 2, 3)
    for t in table.tables:
        t.data[:] = rng.normal(size=t.shape) * 4
    for causal in (False, True):
        _, prefs = bias_preferences(table, causal)
        for p in prefs:
            np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-6)


def test_preferences_saturate():
    table = SpanBias("t5", 2, 1, 1)
    table.tables[0].data[1, 0] = 10.0  # offset i - j = -1, i.e. distance d = +1
    d, prefs = bias_preferences(table)
    assert prefs[0][0, list(d).index(1)] > 0.99


def test_decoder_preferences_only_non_positive(tmp_path):
    table = SpanBias("t5", 2, 2, 3)
    paths = write_bias_preferences(table, tmp_path, "decoder", causal=True)
    assert len(paths) == 2
    d, probs = read_bias_preferences(paths[0])
    assert list(d) == [-2, -1, 0]
    assert probs.shape == (3, 3)
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-6)


def test_decoder_preferences_use_unmasked_offsets():
    table = SpanBias("t5", 1, 1, 1)
    table.tables[0].data[:, 0] = [0.0, 0.0, 5.0]  # offsets -1, 0, +1; +1 means key one step back
    d, prefs = bias_preferences(table, causal=True)
    assert list(d) == [-1, 0]
    assert prefs[0][0, 0] > prefs[0][0, 1]
