import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from neurotse import functional as F
from neurotse.errors import InputTooShortError, ParameterError
from neurotse.gradcheck import check_parameters, finite_diff_check
from neurotse.nn import Linear
from neurotse.speech import (BidirectionalMamba, DualPathMamba, DualPathBlock, SpeechEncoder, SpeechEncoderConfig,
                             bidirectional_mamba, encode_waveform, merge, segment)
from neurotse.ssm import MambaBlock
from neurotse.tensor import Tensor

MKW = dict(d_state=4, expand=2, conv_width=3)


def test_encoder_frame_count():
    rng = np.random.default_rng(0)
    w = rng.standard_normal((8, 1, 16))
    out = encode_waveform(rng.standard_normal((2, 8000)), w, 8)
    assert out.shape == (2, 999, 8)
    assert SpeechEncoderConfig(frame_len=16, frame_stride=8).n_frames(8000) == 999


def test_encoder_zero_and_short_input():
    w = np.random.default_rng(1).standard_normal((4, 1, 16))
    assert np.all(encode_waveform(np.zeros((1, 64)), w, 8).data == 0)
    with pytest.raises(InputTooShortError):
        encode_waveform(np.zeros((1, 15)), w, 8)


def test_encoder_gradient():
    rng = np.random.default_rng(2)
    wav = rng.standard_normal((1, 40))
    w0 = rng.standard_normal((3, 1, 8))
    g = rng.standard_normal((1, 9, 3))
    err = finite_diff_check(lambda ts: F.sum(F.mul(encode_waveform(ts[0], ts[1], 4), g)), [wav, w0])
    assert err < 1e-4


def test_config_validation():
    with pytest.raises(ParameterError):
        SpeechEncoderConfig(frame_len=8, frame_stride=9)
    with pytest.raises(ParameterError):
        SpeechEncoderConfig(chunk_len=10, chunk_hop=11)
    with pytest.raises(ParameterError):
        SpeechEncoderConfig(n_repeats=0)


def test_segment_no_overlap_is_reshape():
    x = np.arange(2 * 12 * 3, dtype=float).reshape(2, 12, 3)
    ch, lay = segment(x, 4, 4)
    assert ch.shape == (2, 3, 4, 3)
    assert np.array_equal(ch.data, x.reshape(2, 3, 4, 3))
    assert np.array_equal(merge(ch, lay).data, x)


def test_segment_hand_count():
    ch, lay = segment(np.ones((1, 6, 2)), 4, 2)
    assert lay.n_chunks == 3 and ch.shape == (1, 3, 4, 2)
    # last chunk covers positions 4..7, of which 6 and 7 are padding
    assert ch.data[0, 2, :, 0].tolist() == [1, 1, 0, 0]


@settings(max_examples=40, deadline=None)
@given(T=st.integers(1, 40), K=st.integers(1, 9), data=st.data())
def test_segment_merge_round_trip(T, K, data):
    P = data.draw(st.integers(1, K))
    x = np.random.default_rng(T * 100 + K).standard_normal((2, T, 3))
    ch, lay = segment(x, K, P)
    assert np.max(np.abs(merge(ch, lay).data - x)) <= 1e-12


def test_segment_merge_gradients():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((1, 7, 2))
    g = rng.standard_normal((1, 4, 3, 2))

    def f(t):
        ch, _ = segment(t, 3, 2)
        return F.sum(F.mul(ch, g))

    assert finite_diff_check(f, x) < 1e-7

    def h(t):
        ch, lay = segment(t, 3, 2)
        return F.sum(F.mul(merge(F.square(ch), lay), x))

    assert finite_diff_check(h, x) < 1e-7


def test_segment_rejects_bad_hop():
    with pytest.raises(ParameterError):
        segment(np.ones((1, 4, 1)), 2, 3)


def test_bidirectional_swap_property_bit_exact():
    rng = np.random.default_rng(4)
    d = 6
    pf, pb = MambaBlock(d, rng, **MKW), MambaBlock(d, rng, **MKW)
    proj = Linear(2 * d, d, rng)
    x = rng.standard_normal((2, 11, d))
    y = bidirectional_mamba(x, pf, pb, proj)
    y_swapped = bidirectional_mamba(F.flip(Tensor(x), 1), pb, pf, proj, swap=True)
    assert np.array_equal(F.flip(y_swapped, 1).data, y.data)


def test_bidirectional_shape_and_independent_branches():
    rng = np.random.default_rng(5)
    m = BidirectionalMamba(16, rng, **MKW)
    assert m(rng.standard_normal((2, 37, 16))).shape == (2, 37, 16)
    assert not np.array_equal(m.fwd.in_proj.weight.data, m.bwd.in_proj.weight.data)


def test_bidirectional_gradients():
    rng = np.random.default_rng(6)
    m = BidirectionalMamba(4, rng, **MKW)
    x = rng.standard_normal((1, 5, 4))
    w = rng.standard_normal((1, 5, 4))
    checks = check_parameters(lambda: F.sum(F.mul(m(x), w)), m.named_parameters(), rng)
    assert max(c.max_error for c in checks) < 1e-4
    assert finite_diff_check(lambda t: F.sum(F.mul(m(t), w)), x) < 1e-4


def test_degenerate_chunking_is_single_global_pass():
    rng = np.random.default_rng(7)
    T, d = 9, 4
    cfg = SpeechEncoderConfig(d_model=d, chunk_len=T, chunk_hop=T, n_repeats=1)
    enc = DualPathMamba(cfg, rng, **MKW)
    x = rng.standard_normal((2, T, d))
    blk = enc.blocks[0]
    local = F.add(Tensor(x), blk.intra_norm(blk.intra(x)))
    # with one chunk the inter path sees sequences of length 1
    glob = F.reshape(local, (2 * T, 1, d))
    glob = F.add(glob, blk.inter_norm(blk.inter(glob)))
    expect = F.reshape(glob, (2, T, d)).data
    np.testing.assert_allclose(enc(x).data, expect, rtol=1e-13, atol=1e-13)


def test_dual_path_is_non_causal():
    rng = np.random.default_rng(8)
    cfg = SpeechEncoderConfig(d_model=4, chunk_len=4, chunk_hop=2, n_repeats=1)
    enc = DualPathMamba(cfg, rng, **MKW)
    x = rng.standard_normal((1, 13, 4))
    x2 = x.copy()
    x2[0, 6] += 1.0
    diff = np.abs(enc(x2).data - enc(x).data).max(axis=-1)[0]
    assert diff[:6].max() > 1e-6 and diff[7:].max() > 1e-6


def test_dual_path_stack_gradients_and_shape():
    rng = np.random.default_rng(9)
    cfg = SpeechEncoderConfig(d_model=4, chunk_len=4, chunk_hop=2, n_repeats=2)
    enc = DualPathMamba(cfg, rng, **MKW)
    x = rng.standard_normal((1, 9, 4))
    w = rng.standard_normal((1, 9, 4))
    assert enc(x).shape == x.shape
    checks = check_parameters(lambda: F.sum(F.mul(enc(x), w)), enc.named_parameters(), rng)
    assert max(c.max_error for c in checks) < 1e-4


def test_speech_encoder_without_mamba_returns_embedding_twice():
    rng = np.random.default_rng(10)
    enc = SpeechEncoder(SpeechEncoderConfig(d_model=8), rng, use_mamba=False)
    emb, feats = enc(rng.standard_normal((1, 200)))
    assert emb is feats and emb.shape == (1, 24, 8)
    assert enc.num_parameters() == 8 * 16
