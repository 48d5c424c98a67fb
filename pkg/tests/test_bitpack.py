import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pixemb.autodiff import conv2d, Tensor
from pixemb.bitpack import (LANES, PackError, PackedWeights, check_accumulator_bound,
                            dequantize_accumulator, embed_pack, n_words, pack_activations,
                            packed_conv2d, packed_conv2d_int, plane_table)
from pixemb.embedding import EmbeddingTable, embed_infer, merge_table
from pixemb.quant import QuantConfig, QuantizedCode, dequantize

from oracles import conv2d_int

Q2 = QuantConfig(activation_bits=2)


def random_codes(rng, shape, bits):
    return rng.integers(0, 1 << bits, shape).astype(np.uint8)


# ---------------------------------------------------------------- activation packing

def test_single_pixel_planes():
    # codes 3 and 1 at 2 bits: plane 0 holds both lanes, plane 1 only lane 0
    p = pack_activations(np.array([3, 1]).reshape(1, 2, 1, 1), 2)
    assert p.words.shape == (1, 2, 1, 1, 1)
    assert int(p.words[0, 0, 0, 0, 0]) == 0b11
    assert int(p.words[0, 1, 0, 0, 0]) == 0b01


def test_word_count():
    assert [n_words(c) for c in (1, 63, 64, 65, 128, 129)] == [1, 1, 1, 2, 2, 3]


@pytest.mark.parametrize("channels", [1, 63, 64, 65, 128])
@pytest.mark.parametrize("bits", [1, 2, 3, 8])
def test_activation_roundtrip(rng, channels, bits):
    codes = random_codes(rng, (2, channels, 3, 2), bits)
    p = pack_activations(codes, bits)
    assert p.words.dtype == np.uint64
    assert p.words.shape == (2, bits, 3, 2, n_words(channels))
    np.testing.assert_array_equal(p.unpack(), codes)


@pytest.mark.parametrize("channels", [1, 63, 65, 100])
def test_padded_lanes_are_zero(rng, channels):
    codes = np.full((1, channels, 2, 2), 3, np.uint8)
    last = pack_activations(codes, 2).words[..., -1]
    used = channels % LANES
    assert not np.any(last >> np.uint64(used))
    assert np.all(last & np.uint64(1) == 1)


def test_pack_from_quantized_code(rng):
    qc = QuantizedCode(random_codes(rng, (1, 5, 2, 2), 2), Q2)
    np.testing.assert_array_equal(pack_activations(qc).unpack(), qc.codes)


def test_channel_axis(rng):
    nhwc = random_codes(rng, (2, 3, 3, 6), 2)
    p = pack_activations(nhwc, 2, channel_axis=-1)
    np.testing.assert_array_equal(p.unpack(), nhwc.transpose(0, 3, 1, 2))


def test_pack_errors():
    with pytest.raises(PackError):
        pack_activations(np.array([4]).reshape(1, 1, 1, 1), 2)
    with pytest.raises(PackError):
        pack_activations(np.zeros((2, 2, 2), np.uint8), 2)
    with pytest.raises(PackError):
        pack_activations(np.zeros((1, 1, 1, 1), np.uint8))


# ---------------------------------------------------------------- weight packing

@pytest.mark.parametrize("channels", [1, 63, 64, 65])
def test_weight_roundtrip(rng, channels):
    w = rng.normal(size=(4, channels, 3, 3)).astype(np.float32)
    pw = PackedWeights.from_float(w)
    np.testing.assert_array_equal(pw.positive(), w >= 0)
    alpha = np.abs(w).mean(axis=(1, 2, 3))
    np.testing.assert_allclose(pw.dequantize(), np.where(w >= 0, 1, -1) * alpha[:, None, None, None],
                               rtol=1e-6)
    assert pw.signs.shape == (4, 3, 3, n_words(channels))
    used = channels % LANES
    if used:
        assert not np.any(pw.signs[..., -1] >> np.uint64(used))


def test_signed_sum():
    pos = np.array([True, True, False, True]).reshape(1, 4, 1, 1)
    assert PackedWeights.from_signs(pos, [1.0]).signed_sum().tolist() == [2]


def test_zero_weight_packs_positive():
    pw = PackedWeights.from_float(np.array([0.0, -1.0], np.float32).reshape(1, 2, 1, 1))
    assert pw.positive().ravel().tolist() == [True, False]


# ---------------------------------------------------------------- popcount convolution

def test_one_by_one_example():
    # a single weight +1 times a code of 3 at 2 bits is the real value 1.0
    x = pack_activations(np.array([[[[3]]]]), 2)
    w = PackedWeights.from_signs(np.ones((1, 1, 1, 1), bool), [1.0])
    assert packed_conv2d_int(x, w).tolist() == [[[[3]]]]
    assert packed_conv2d(x, w, Q2).tolist() == [[[[1.0]]]]


@pytest.mark.parametrize("channels", [1, 63, 64, 65, 128])
@pytest.mark.parametrize("stride,padding", [(1, 1), (2, 1), (1, 0)])
def test_int_conv_matches_naive(rng, channels, stride, padding):
    codes = random_codes(rng, (2, channels, 5, 5), 2)
    pos = rng.random((3, channels, 3, 3)) < 0.5
    got = packed_conv2d_int(pack_activations(codes, 2), PackedWeights.from_signs(pos, np.ones(3)),
                            stride, padding)
    np.testing.assert_array_equal(got, conv2d_int(codes, pos, stride, padding))


@settings(max_examples=25)
@given(st.integers(1, 3), st.integers(1, 70), st.integers(1, 4), st.sampled_from([1, 3]),
       st.integers(1, 2), st.integers(0, 2**31))
def test_int_conv_property(bits, channels, out, k, stride, seed):
    rng = np.random.default_rng(seed)
    codes = random_codes(rng, (1, channels, 4, 4), bits)
    pos = rng.random((out, channels, k, k)) < 0.5
    pad = k // 2
    got = packed_conv2d_int(pack_activations(codes, bits), PackedWeights.from_signs(pos, np.ones(out)),
                            stride, pad)
    np.testing.assert_array_equal(got, conv2d_int(codes, pos, stride, pad))


def test_sign_flip_negates(rng):
    codes = random_codes(rng, (1, 10, 4, 4), 2)
    pos = rng.random((2, 10, 3, 3)) < 0.5
    x = pack_activations(codes, 2)
    a = packed_conv2d_int(x, PackedWeights.from_signs(pos, np.ones(2)), 1, 1)
    b = packed_conv2d_int(x, PackedWeights.from_signs(~pos, np.ones(2)), 1, 1)
    np.testing.assert_array_equal(a, -b)


def test_all_zero_codes_give_zero(rng):
    x = pack_activations(np.zeros((1, 7, 3, 3), np.uint8), 2)
    w = PackedWeights.from_signs(rng.random((2, 7, 3, 3)) < 0.5, np.ones(2))
    assert not packed_conv2d_int(x, w, 1, 1).any()


@pytest.mark.parametrize("channels", [3, 64, 65])
@pytest.mark.parametrize("bits", [1, 2, 3])
def test_matches_float_conv_of_dequantized(rng, channels, bits):
    """Packed conv equals the float conv of the same quantized tensors."""
    cfg = QuantConfig(activation_bits=bits)
    codes = random_codes(rng, (2, channels, 6, 6), bits)
    w = rng.normal(size=(5, channels, 3, 3)).astype(np.float32)
    pw = PackedWeights.from_float(w)
    want = conv2d(Tensor(dequantize(codes, cfg)), Tensor(pw.dequantize()), 1, 1).data
    got = packed_conv2d(pack_activations(codes, bits), pw, cfg, 1, 1)
    np.testing.assert_allclose(got, want, rtol=1e-5, atol=1e-5)
    acc = packed_conv2d_int(pack_activations(codes, bits), pw, 1, 1)
    np.testing.assert_allclose(dequantize_accumulator(acc, pw, cfg), want, rtol=1e-5, atol=1e-5)


def test_nonzero_lower_bound_offset(rng):
    cfg = QuantConfig(activation_bits=2, lo=-1.0, hi=1.0)
    codes = random_codes(rng, (1, 4, 3, 3), 2)
    w = rng.normal(size=(2, 4, 1, 1)).astype(np.float32)
    pw = PackedWeights.from_float(w)
    want = conv2d(Tensor(dequantize(codes, cfg)), Tensor(pw.dequantize())).data
    np.testing.assert_allclose(packed_conv2d(pack_activations(codes, 2), pw, cfg), want,
                               rtol=1e-5, atol=1e-5)


def test_batch_equals_single(rng):
    codes = random_codes(rng, (3, 8, 5, 5), 2)
    pw = PackedWeights.from_signs(rng.random((4, 8, 3, 3)) < 0.5, np.ones(4))
    batch = packed_conv2d_int(pack_activations(codes, 2), pw, 1, 1)
    for i in range(3):
        one = packed_conv2d_int(pack_activations(codes[i:i + 1], 2), pw, 1, 1)
        np.testing.assert_array_equal(batch[i:i + 1], one)


def test_conv_errors(rng):
    x = pack_activations(random_codes(rng, (1, 4, 3, 3), 2), 2)
    with pytest.raises(PackError, match="channels"):
        packed_conv2d_int(x, PackedWeights.from_signs(np.ones((1, 5, 1, 1), bool), [1.0]))
    with pytest.raises(PackError):
        packed_conv2d_int(x, PackedWeights.from_signs(np.ones((1, 4, 5, 5), bool), [1.0]))
    with pytest.raises(PackError, match="overflow"):
        check_accumulator_bound(8, 2**20, 3, 3)
    check_accumulator_bound(2, 64, 3, 3)


# ---------------------------------------------------------------- fused embedding pack

@pytest.mark.parametrize("d,bits", [(1, 1), (8, 2), (16, 2), (22, 3)])
def test_embed_pack_matches_lookup_then_pack(rng, d, bits):
    merged = merge_table(EmbeddingTable.random(d, rng, QuantConfig(activation_bits=bits),
                                               ordered=False))
    img = rng.integers(0, 256, (2, 5, 4, 3))
    want = pack_activations(embed_infer(img, merged).codes, bits, channel_axis=-1)
    got = embed_pack(img, merged)
    assert got.shape == want.shape == (2, 3 * d, 5, 4)
    np.testing.assert_array_equal(got.words, want.words)
    cached = embed_pack(img, merged, plane_table(merged))
    np.testing.assert_array_equal(cached.words, want.words)


def test_embed_pack_single_image(rng):
    merged = merge_table(EmbeddingTable.random(4, rng))
    img = rng.integers(0, 256, (3, 3, 3))
    assert embed_pack(img, merged).shape == (1, 12, 3, 3)
