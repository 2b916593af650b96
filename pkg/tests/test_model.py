"""Backbone, condition net and decoder behaviour."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from actrack.autodiff import AdamW, Tensor, backward, no_grad, ops, reset_tape
from actrack.backbone import Backbone, EncoderConfig, PretrainHead, TokenMemory, pretrain_step, sample_mask
from actrack.condnet import CondNet, ConditionMap, Tower, TowerConfig, inject, xcorr
from actrack.decoder import DecoderConfig, SequenceDecoder, Vocabulary, dequantize, quantize
from actrack.errors import ConfigurationError, DimensionError, DomainError
from actrack.tracker import ACTracker, TrackerConfig

TINY = TrackerConfig(dim=32, heads=2, enc_layers=1, dec_layers=1)


def images(rng, n, side):
    return rng.uniform(0, 1, (n, 3, side, side)).astype(np.float32)


# --- backbone -------------------------------------------------------------------


@pytest.fixture(scope="module")
def backbone():
    return Backbone(EncoderConfig(), np.random.default_rng(0))


def test_encoder_config_rejects_bad_geometry():
    with pytest.raises(ConfigurationError):
        EncoderConfig(search_side=60)
    with pytest.raises(ConfigurationError):
        EncoderConfig(dim=130, heads=4)
    assert EncoderConfig().template_tokens == 16 and EncoderConfig().search_tokens == 64


def test_patch_embed_examples(backbone):
    rng = np.random.default_rng(1)
    x = images(rng, 1, 64)
    tok = backbone.patch_embed(x, 1)
    assert tok.shape == (1, 64, 128)
    np.testing.assert_array_equal(tok.data, backbone.patch_embed(x.copy(), 1).data)
    with pytest.raises(ConfigurationError):
        backbone.patch_embed(images(rng, 1, 60), 1)


def test_encode_shape_and_order(backbone):
    rng = np.random.default_rng(2)
    mem = backbone.encode(images(rng, 2, 32), images(rng, 2, 64))
    assert mem.tokens.shape == (2, 80, 128)
    assert list(mem.segment_ids[:16]) == [0] * 16 and list(mem.segment_ids[16:]) == [1] * 64


def test_swapping_roles_changes_output():
    bb = Backbone(EncoderConfig(template_side=32, search_side=32, dim=32, heads=2, layers=1),
                  np.random.default_rng(3))
    rng = np.random.default_rng(4)
    a, b = images(rng, 1, 32), images(rng, 1, 32)
    m1 = bb.encode(a, b).tokens.data
    m2 = bb.encode(b, a).tokens.data
    assert not np.allclose(m1[:, :16], m2[:, 16:])


def test_attention_rows_sum_to_one(backbone):
    rng = np.random.default_rng(5)
    with no_grad():
        backbone.encode(images(rng, 1, 32), images(rng, 1, 64), keep_weights=True)
    maps = backbone.attention_maps()
    assert len(maps) == 4
    for w in maps:
        np.testing.assert_allclose(w.sum(-1), 1.0, atol=1e-6)


def test_freeze_is_total_and_encode_unchanged_by_training_elsewhere():
    cfg = TINY
    model = ACTracker(cfg, np.random.default_rng(6))
    model.set_mode("additive")
    frozen = {n for n, p in model.named_parameters().items() if p.frozen}
    assert frozen == {n for n in model.named_parameters() if n.startswith("backbone.")}
    rng = np.random.default_rng(7)
    z, x = images(rng, 2, 32), images(rng, 2, 64)
    before = model.backbone.encode(z, x).tokens.data.copy()
    opt = AdamW(model.parameters(), lr=1e-2)
    assert not any(n.startswith("backbone.") for n in opt.state_names())
    prev = np.full((2, 4), 200)
    tgt = np.array([[190, 210, 100, 90], [205, 199, 80, 120]])
    for _ in range(3):
        reset_tape()
        opt.zero_grad()
        backward(model.loss(z, x, prev, tgt))
        opt.step()
    np.testing.assert_array_equal(model.backbone.encode(z, x).tokens.data, before)


def test_sample_mask_and_ratio_errors():
    m = sample_mask(np.random.default_rng(0), 3, 64, 0.5)
    assert m.shape == (3, 64) and (m.sum(1) == 32).all()
    for bad in (0.0, 1.0, -0.2):
        with pytest.raises(ConfigurationError):
            sample_mask(np.random.default_rng(0), 1, 64, bad)


def test_pretrain_fixed_batch_halves_loss():
    cfg = EncoderConfig()
    rng = np.random.default_rng(8)
    bb, head = Backbone(cfg, rng), PretrainHead(cfg, rng)
    opt = AdamW(bb.parameters() + head.parameters(), lr=1e-3)
    # smooth images so there is structure to reconstruct
    base = np.random.default_rng(9).uniform(0, 1, (4, 3, 4, 4))
    searches = np.kron(base, np.ones((1, 1, 16, 16))).astype(np.float32)
    templates = searches[:, :, 16:48, 16:48].copy()
    mask_rng = np.random.default_rng(10)
    losses = [pretrain_step(bb, head, opt, templates, searches, mask_rng) for _ in range(300)]
    assert min(losses) >= 0
    assert losses[-1] <= 0.5 * losses[0]


# --- condnet --------------------------------------------------------------------


def test_tower_shapes_and_siamese_sharing():
    tower = Tower(TowerConfig(), np.random.default_rng(0))
    rng = np.random.default_rng(1)
    assert tower(images(rng, 1, 64)).shape == (1, 64, 16, 16)
    z = images(rng, 1, 32)
    assert tower(z).shape == (1, 64, 8, 8)
    np.testing.assert_array_equal(tower(z).data, tower(z.copy()).data)
    with pytest.raises(ConfigurationError):
        tower(images(rng, 1, 48))
    net = CondNet(128, np.random.default_rng(2))
    names = [n for n in net.named_parameters() if ".tower." in n]
    assert len(names) == len(set(names)) == 6  # one weight + bias per stage, no second tower


def brute_xcorr(k, x):
    c, kh, kw = k.shape
    oh, ow = x.shape[1] - kh + 1, x.shape[2] - kw + 1
    out = np.zeros((c, oh, ow))
    for ch in range(c):
        for i in range(oh):
            for j in range(ow):
                out[ch, i, j] = (x[ch, i : i + kh, j : j + kw] * k[ch]).sum()
    return out


@pytest.mark.parametrize("seed", range(5))
def test_xcorr_matches_bruteforce(seed):
    rng = np.random.default_rng(seed)
    k = rng.integers(-3, 4, (1, 4, 8, 8)).astype(np.float64)
    x = rng.integers(-3, 4, (1, 4, 16, 16)).astype(np.float64)
    out = xcorr(Tensor(k), Tensor(x)).data
    assert out.shape == (1, 4, 9, 9)
    np.testing.assert_array_equal(out[0], brute_xcorr(k[0], x[0]))


def test_xcorr_window_sums_and_peak():
    rng = np.random.default_rng(11)
    x = rng.standard_normal((1, 3, 16, 16))
    ones = np.ones((1, 3, 8, 8))
    out = xcorr(Tensor(ones), Tensor(x)).data
    assert out[0, 1, 2, 5] == pytest.approx(x[0, 1, 2:10, 5:13].sum(), abs=1e-4)
    k = rng.uniform(0.5, 1.0, (1, 3, 8, 8))
    s = np.zeros((1, 3, 16, 16))
    s[0, :, 3:11, 5:13] = k[0]
    grid = xcorr(Tensor(k), Tensor(s)).data[0]
    for ch in range(3):
        assert np.unravel_index(np.argmax(grid[ch]), grid[ch].shape) == (3, 5)
    with pytest.raises(DimensionError):
        xcorr(Tensor(np.ones((1, 2, 8, 8))), Tensor(np.ones((1, 3, 16, 16))))


def test_condition_is_zero_at_init_and_moves_after_a_step():
    rng = np.random.default_rng(12)
    net = CondNet(128, np.random.default_rng(13))
    z, x = images(rng, 2, 32), images(rng, 2, 64)
    cond = net(z, x)
    assert cond.similarity.shape == (2, 64, 9, 9)
    assert cond.tokens.shape == (2, 9, 128) and cond.residual.shape == (2, 64, 128)
    assert not cond.tokens.data.any() and not cond.residual.data.any()
    assert all(not p.frozen for p in net.parameters())
    opt = AdamW(net.parameters(), lr=1e-3)
    reset_tape()
    c = net(z, x)
    w = rng.standard_normal(c.residual.shape)
    backward(ops.sum(c.residual * Tensor(w)) + ops.sum(c.tokens))
    opt.step()
    assert np.abs(net(z, x).residual.data).max() > 0


def test_inject_examples():
    rng = np.random.default_rng(14)
    mem = TokenMemory(Tensor(rng.standard_normal((1, 80, 8))), 16, 64)
    zero = ConditionMap(None, None, Tensor(np.zeros((1, 64, 8))))
    np.testing.assert_array_equal(inject(mem, zero).tokens.data, mem.tokens.data)
    eps = 0.125
    out = inject(mem, ConditionMap(None, None, Tensor(np.full((1, 64, 8), eps)))).tokens.data
    np.testing.assert_array_equal(out[:, :16], mem.tokens.data[:, :16])
    np.testing.assert_allclose(out[:, 16:] - mem.tokens.data[:, 16:], eps, atol=1e-6)
    with pytest.raises(DimensionError):
        inject(mem, ConditionMap(None, None, Tensor(np.zeros((1, 49, 8)))))


# --- vocabulary and decoder -----------------------------------------------------


def test_quantize_examples():
    assert quantize(0.0, 400) == 0 and quantize(1.0, 400) == 399 and quantize(0.5, 400) == 200
    assert quantize(-3.0, 400) == 0 and quantize(7.0, 400) == 399
    assert dequantize(0, 400) == 0.0 and dequantize(399, 400) == 1.0
    assert dequantize(200, 400) == pytest.approx(0.501253, abs=1e-6)
    with pytest.raises(DomainError):
        dequantize(400, 400)
    v = Vocabulary(400)
    assert (v.start, v.pad, v.size) == (400, 401, 402)


@given(st.floats(0.0, 1.0))
def test_quantize_round_trip_bound(v):
    assert abs(v - dequantize(quantize(v, 400), 400)) <= 1.0 / (2 * 399) + 1e-12


@pytest.fixture(scope="module")
def decoder():
    cfg = DecoderConfig(layers=1, heads=2, dim=32)
    return SequenceDecoder(cfg, Vocabulary(400), np.random.default_rng(0))


def memory(rng, n=1, dim=32):
    return TokenMemory(Tensor(rng.standard_normal((n, 80, dim)).astype(np.float32)), 16, 64)


def test_build_queries(decoder):
    cond = Tensor(np.zeros((1, 9, 32), np.float32))
    q = decoder.build_queries([[200, 200, 50, 60]], cond)
    assert q.shape == (1, 14, 32)
    np.testing.assert_array_equal(q.data, decoder.build_queries([[200, 200, 50, 60]], cond).data)
    with pytest.raises(DomainError):
        decoder.build_queries([[200, 400, 50, 60]], cond)
    with pytest.raises(DomainError):
        decoder.build_queries([[200, 200, 50, 60]], Tensor(np.zeros((1, 8, 32))))


def test_zeroed_head_gives_uniform_loss():
    dec = SequenceDecoder(DecoderConfig(layers=1, heads=2, dim=32), Vocabulary(400), np.random.default_rng(1))
    dec.head.weight.data[:] = 0
    rng = np.random.default_rng(2)
    q = dec.build_queries([[1, 2, 3, 4]], Tensor(np.zeros((1, 9, 32), np.float32)))
    loss = dec.teacher_forced_loss(q, memory(rng), [[10, 20, 30, 40]])
    assert float(loss.data) == pytest.approx(math.log(402), abs=1e-4)
    with pytest.raises(DomainError):
        dec.teacher_forced_loss(q, memory(rng), [[10, 20, 30, 401]])


def test_teacher_forcing_is_causal(decoder):
    rng = np.random.default_rng(3)
    mem = memory(rng)
    q = decoder.build_queries([[5, 6, 7, 8]], Tensor(np.zeros((1, 9, 32), np.float32)))
    base = decoder.teacher_forced_logits(q, mem, [[100, 110, 120, 130]]).data
    for j in range(3):
        tgt = [[100, 110, 120, 130]]
        tgt[0][j] = 333
        out = decoder.teacher_forced_logits(q, mem, tgt).data
        np.testing.assert_array_equal(out[:, : j + 1], base[:, : j + 1])
        assert not np.allclose(out[:, j + 1 :], base[:, j + 1 :])


def test_greedy_decode_never_emits_specials(decoder):
    rng = np.random.default_rng(4)
    # bias the head towards the specials; they must still be masked out
    saved = decoder.head.bias.data.copy()
    decoder.head.bias.data[400:] = 50.0
    try:
        q = decoder.build_queries(rng.integers(0, 400, (64, 4)), Tensor(np.zeros((64, 9, 32), np.float32)))
        out = decoder.decode_greedy(q, memory(rng, 64))
    finally:
        decoder.head.bias.data[:] = saved
    assert out.shape == (64, 4) and out.max() < 400


def test_greedy_ties_go_to_lower_id():
    dec = SequenceDecoder(DecoderConfig(layers=1, heads=2, dim=32), Vocabulary(400), np.random.default_rng(5))
    dec.head.weight.data[:] = 0
    dec.head.bias.data[:] = 0
    dec.head.bias.data[[17, 250]] = 3.0
    q = dec.build_queries([[1, 2, 3, 4]], Tensor(np.zeros((1, 9, 32), np.float32)))
    assert dec.decode_greedy(q, memory(np.random.default_rng(6))).tolist() == [[17, 17, 17, 17]]


def test_overfit_probe_reproduces_target():
    dec = SequenceDecoder(DecoderConfig(layers=1, heads=2, dim=32), Vocabulary(400), np.random.default_rng(7))
    rng = np.random.default_rng(8)
    mem = memory(rng)
    cond = Tensor(np.zeros((1, 9, 32), np.float32))
    target = [[173, 222, 95, 61]]
    opt = AdamW(dec.parameters(), lr=3e-3)
    for _ in range(300):
        reset_tape()
        opt.zero_grad()
        loss = dec.teacher_forced_loss(dec.build_queries([[200, 200, 90, 60]], cond), mem, target)
        backward(loss)
        opt.step()
    with no_grad():
        final = float(dec.teacher_forced_loss(dec.build_queries([[200, 200, 90, 60]], cond), mem, target).data)
    assert final <= 0.05
    out = dec.decode_greedy(dec.build_queries([[200, 200, 90, 60]], cond), mem)
    assert out.tolist() == target
    # teacher-forced argmax equals the target, so greedy decoding must agree
    logits = dec.teacher_forced_logits(dec.build_queries([[200, 200, 90, 60]], cond), mem, target).data
    assert logits.argmax(-1).tolist() == target
