import math

import numpy as np
import pytest

from scanformer import autodiff as ad
from scanformer.model import (
    CheckpointError,
    ConfigError,
    ModelConfig,
    Seq2SeqModel,
    load_checkpoint,
    loss,
    save_checkpoint,
    sinusoidal_positions,
)


def small(variant="vanilla", **kw):
    cfg = dict(variant=variant, n_layers=2, n_heads=2, d_model=16, d_ffn=32, dropout=0.0,
               attention_dropout=0.0, span=2, src_vocab_size=16, tgt_vocab_size=9, seed=0)
    cfg.update(kw)
    return Seq2SeqModel(ModelConfig(**cfg))


SRC = np.array([[3, 5, 7, 2], [4, 6, 2, 0]])
TGT_IN = np.array([[1, 3, 4, 5], [1, 6, 0, 0]])
TGT_OUT = np.array([[3, 4, 5, 2], [6, 2, 0, 0]])


def test_config_rejects_unknown_keys_and_bad_values():
    with pytest.raises(ConfigError):
        ModelConfig.from_dict({"n_layer": 2})
    with pytest.raises(ConfigError):
        ModelConfig(d_model=10, n_heads=4)
    with pytest.raises(ConfigError):
        ModelConfig(variant="lstm")
    assert ModelConfig(variant="sag+t5").variant == "sag_t5"


def test_config_round_trip_and_hash():
    cfg = ModelConfig(variant="sag_fixed_span", span=6)
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg
    assert cfg.config_hash() == ModelConfig.from_dict(cfg.to_dict()).config_hash()
    assert cfg.config_hash() != ModelConfig(variant="sag_fixed_span", span=4).config_hash()


# -- embed --------------------------------------------------------------------


def test_empty_sequence_embeds_to_empty():
    m = small()
    assert m.embed(np.zeros((0,), dtype=np.int64)).shape == (0, 16)


def test_same_token_differs_only_by_position():
    m = small()
    e = m.embed([5, 5]).data
    pos = sinusoidal_positions(4, 16)
    np.testing.assert_allclose(e[1] - e[0], pos[1] - pos[0], atol=1e-12)


def test_embedding_gradient():
    m = small()
    w = np.random.default_rng(0).normal(size=(3, 16))
    assert ad.grad_check(lambda _: ad.sum(ad.mul(m.embed([3, 4, 3]), w)), m.src_embed) < 1e-4


def test_embed_rejects_bad_ids_and_length():
    m = small(max_positions=4)
    with pytest.raises(IndexError):
        m.embed([99])
    with pytest.raises(ValueError):
        m.embed([3] * 5)


# -- encode -------------------------------------------------------------------


def test_encoder_degenerate_gate_case():
    m = small("sag")
    m.set_gate_override(0.0)
    for layer in m.encoder:
        layer.ffn.w2.data[:] = 0.0
        layer.ffn.b2.data[:] = 0.0
    x = m.embed([3, 5, 7])
    expected = x.data
    for layer in m.encoder:
        for norm in (layer.norm1, layer.norm2):
            expected = ad.layer_norm(expected, norm.gain, norm.shift, norm.eps).data
    np.testing.assert_allclose(m.encode([3, 5, 7]).data, expected, atol=1e-12)


def test_encoder_output_shape():
    m = small()
    for cmd in ([3], [3, 4, 5, 6, 7, 8, 9, 10, 11, 2]):
        assert m.encode(cmd).shape == (len(cmd), 16)


@pytest.mark.parametrize("variant", ["vanilla", "sag", "sag_conv", "sag_fixed_span", "sag_t5"])
def test_encoder_gradient(variant):
    m = small(variant)
    rng = np.random.default_rng(1)
    if m.encoder_span is not None and m.encoder_span.mode == "t5":
        for t in m.encoder_span.tables:
            t.data[:] = rng.normal(size=t.shape)
    w = rng.normal(size=(4, 16))
    f = lambda _: ad.sum(ad.mul(m.encode([3, 5, 7, 2]), w))  # noqa: E731
    worst = 0.0
    for name, p in m.named_parameters():
        if name.startswith(("encoder", "src_embed")):
            coords = rng.choice(p.size, size=min(p.size, 6), replace=False)
            worst = max(worst, ad.grad_check(f, p, eps=1e-6, coords=coords))
    assert worst < 1e-3


def test_padded_batch_matches_individual_sequences():
    for variant in ("vanilla", "sag_conv", "sag_fixed_span", "sag_t5"):
        m = small(variant, span=1)
        logits = m(SRC, TGT_IN).data
        for b in range(2):
            n_src = int((SRC[b] != 0).sum())
            n_tgt = int((TGT_IN[b] != 0).sum())
            single = m(SRC[b : b + 1, :n_src], TGT_IN[b : b + 1, :n_tgt]).data[0]
            np.testing.assert_allclose(logits[b, :n_tgt], single, atol=1e-10)


# -- decode -------------------------------------------------------------------


def test_decode_logits_shape():
    m = small()
    assert m.decode_step([1, 3, 4], m.encode([3, 4, 2])).shape == (3, 9)


@pytest.mark.parametrize("variant", ["vanilla", "sag_conv", "sag_fixed_span", "sag_t5"])
def test_decoder_is_causal(variant):
    m = small(variant)
    enc = m.encode([3, 4, 2])
    a = m.decode_step([1, 3, 4, 5], enc).data
    b = m.decode_step([1, 3, 8, 7], enc).data
    np.testing.assert_array_equal(a[:2], b[:2])


def test_single_source_token_cross_attention():
    m = small()
    from scanformer.attention import multi_head_attention

    enc = m.encode([3])
    x = m.embed([1, 4], "tgt")
    _, w = multi_head_attention(x, enc, m.decoder[0].cross, return_weights=True)
    np.testing.assert_array_equal(w.data, np.ones((2, 2, 1)))


def test_prefix_must_start_with_bos():
    m = small()
    with pytest.raises(ValueError):
        m.decode_step([3, 4], m.encode([3, 2]))


# -- loss ---------------------------------------------------------------------


def test_uniform_logits_loss_is_log_vocab():
    assert loss(np.zeros((3, 9)), np.array([3, 4, 5])).item() == pytest.approx(math.log(9))


def test_confident_correct_loss_is_zero():
    logits = np.full((2, 9), -50.0)
    logits[0, 3] = logits[1, 4] = 50.0
    assert loss(logits, np.array([3, 4])).item() < 1e-12


def test_loss_ignores_padding_and_rejects_all_pad():
    logits = np.random.default_rng(0).normal(size=(3, 9))
    assert loss(logits, np.array([3, 0, 0])).item() == pytest.approx(loss(logits[:1], np.array([3])).item())
    with pytest.raises(ValueError):
        loss(logits, np.zeros(3, dtype=int))


def test_loss_gradient():
    x = ad.Tensor(np.random.default_rng(0).normal(size=(4, 9)), requires_grad=True)
    assert ad.grad_check(lambda t: loss(t, np.array([3, 4, 0, 2])), x) < 1e-4


# -- invariants ---------------------------------------------------------------


def _shared_weights(src, dst):
    theirs = dict(src.named_parameters())
    for name, p in dst.named_parameters():
        if name in theirs:
            p.data = theirs[name].data.copy()


def test_parameter_accounting():
    base = small("sag", n_layers=4, n_heads=8, d_model=16, span=6)
    t5 = small("sag_t5", n_layers=4, n_heads=8, d_model=16, span=6)
    van = small("vanilla", n_layers=4, n_heads=8, d_model=16)
    names = dict(t5.named_parameters())
    enc = sum(p.size for n, p in names.items() if n.startswith("encoder_span"))
    dec = sum(p.size for n, p in names.items() if n.startswith("decoder_span"))
    assert enc == dec == 416
    assert t5.num_parameters() - base.num_parameters() == 2 * 416
    assert base.num_parameters() - van.num_parameters() == 2 * 4
    assert small("sag_fixed_span", n_layers=4, n_heads=8, d_model=16).num_parameters() == base.num_parameters()


@pytest.mark.parametrize("variant,span", [("sag_t5", 2), ("sag_fixed_span", 10)])
def test_variant_reduces_to_vanilla(variant, span):
    van = small("vanilla")
    var = small(variant, span=span)
    _shared_weights(van, var)
    var.set_gate_override(1.0)
    np.testing.assert_allclose(var(SRC, TGT_IN).data, van(SRC, TGT_IN).data, atol=1e-12)


def test_batch_permutation_equivariance():
    m = small("sag_t5")
    perm = [1, 0]
    np.testing.assert_allclose(m(SRC[perm], TGT_IN[perm]).data, m(SRC, TGT_IN).data[perm], atol=1e-12)


def test_eval_forward_deterministic_and_train_uses_dropout():
    m = small(dropout=0.3, attention_dropout=0.3)
    a, b = m(SRC, TGT_IN).data, m(SRC, TGT_IN).data
    np.testing.assert_array_equal(a, b)
    m.train(np.random.default_rng(0))
    c = m(SRC, TGT_IN).data
    m.train(np.random.default_rng(0))
    d = m(SRC, TGT_IN).data
    m.eval()
    np.testing.assert_array_equal(c, d)
    assert not np.allclose(a, c)


# -- checkpoints --------------------------------------------------------------


def test_checkpoint_round_trip(tmp_path):
    m = small("sag_t5")
    m.encoder_span.tables[0].data[:] = 0.5
    path = tmp_path / "ck.npz"
    save_checkpoint(path, m, step=7)
    back, meta, _ = load_checkpoint(path)
    assert meta["step"] == 7
    np.testing.assert_array_equal(back(SRC, TGT_IN).data, m(SRC, TGT_IN).data)


def test_checkpoint_mismatch_names_parameters(tmp_path):
    from scanformer.model import load_into, read_checkpoint

    path = tmp_path / "ck.npz"
    save_checkpoint(path, small("sag_t5"))
    meta, arrays = read_checkpoint(path)
    with pytest.raises(CheckpointError, match="encoder_span.tables.0"):
        load_into(small("sag"), meta, arrays)


def test_missing_checkpoint():
    with pytest.raises(FileNotFoundError):
        load_checkpoint("/nonexistent/ck.npz")
