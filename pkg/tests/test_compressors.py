"""Baseline compressors, error feedback, byte accounting."""

from itertools import combinations

import numpy as np
import pytest

from fedcomp import compressors as cp
from fedcomp.models import ModelSpec, ParamVector


def _pv(values):
    # a [d-1, 1] model has exactly d parameters (d-1 weights + 1 bias)
    return ParamVector(values, ModelSpec((values.size - 1, 1)))


# ---------------------------------------------------------------------------
# top-k

def test_topk_keeps_largest_magnitude():
    msg = cp.TopKCompressor(1).compress(np.array([3.0, -5.0, 1.0]))
    np.testing.assert_array_equal(msg.indices, [1])
    np.testing.assert_array_equal(msg.values, [-5.0])


def test_topk_full_k_is_identity():
    v = np.random.default_rng(0).standard_normal(7)
    msg = cp.TopKCompressor(7).compress(v)
    np.testing.assert_array_equal(cp.decompress(msg), v)


def test_topk_tie_break_lower_index():
    # |2| == |-2|: brute force over 2-subsets maximizing retained l2 energy
    # admits {0,1}; the tie-break rule selects the lower indices
    v = np.array([2.0, -2.0, 0.5])
    msg = cp.TopKCompressor(2).compress(v)
    np.testing.assert_array_equal(msg.indices, [0, 1])
    np.testing.assert_array_equal(msg.values, [2.0, -2.0])
    best = max(combinations(range(3), 2), key=lambda s: sum(v[i] ** 2 for i in s))
    assert set(msg.indices) == set(best)


def test_topk_k_out_of_range():
    with pytest.raises(cp.CompressorError):
        cp.TopKCompressor(0).compress(np.ones(3))
    with pytest.raises(cp.CompressorError):
        cp.TopKCompressor(4).compress(np.ones(3))


def test_topk_decompress_has_k_nonzeros():
    v = np.random.default_rng(1).standard_normal(20)
    out = cp.decompress(cp.TopKCompressor(5).compress(v))
    assert np.count_nonzero(out) == 5


@pytest.mark.parametrize("seed", range(5))
def test_topk_is_l2_optimal_k_sparse(seed):
    # brute force over all k-subsets for small dims
    rng = np.random.default_rng(seed)
    d, k = 10, 3
    v = rng.standard_normal(d)
    out = cp.decompress(cp.TopKCompressor(k).compress(v))
    err = np.linalg.norm(v - out)
    for subset in combinations(range(d), k):
        approx = np.zeros(d)
        approx[list(subset)] = v[list(subset)]
        assert err <= np.linalg.norm(v - approx) + 1e-12


def test_topk_error_monotone_in_k():
    v = np.random.default_rng(2).standard_normal(30)
    errs = [
        np.linalg.norm(v - cp.decompress(cp.TopKCompressor(k).compress(v)))
        for k in range(1, 31)
    ]
    assert all(a >= b - 1e-12 for a, b in zip(errs, errs[1:]))


# ---------------------------------------------------------------------------
# sign

def test_sign_constant_magnitude_lossless():
    msg = cp.SignCompressor().compress(np.array([1.0, 1.0, 1.0]))
    np.testing.assert_array_equal(cp.decompress(msg), [1.0, 1.0, 1.0])


def test_sign_symmetric_case():
    msg = cp.SignCompressor().compress(np.array([2.0, -2.0]))
    assert msg.scale == 2.0
    np.testing.assert_array_equal(cp.decompress(msg), [2.0, -2.0])


def test_sign_hand_case_with_residual():
    v = np.array([1.0, -3.0])
    msg = cp.SignCompressor().compress(v)
    assert msg.scale == 2.0
    np.testing.assert_array_equal(cp.decompress(msg), [2.0, -2.0])
    np.testing.assert_array_equal(v - cp.decompress(msg), [-1.0, -1.0])


def test_sign_of_zero_is_positive():
    msg = cp.SignCompressor().compress(np.array([0.0, -1.0]))
    assert msg.signs[0] == 1.0


# ---------------------------------------------------------------------------
# STC

def test_stc_equal_magnitudes():
    msg = cp.StcCompressor(2).compress(np.array([4.0, -4.0, 0.1]))
    assert msg.scale == 4.0
    np.testing.assert_array_equal(cp.decompress(msg), [4.0, -4.0, 0.0])


def test_stc_full_k_constant_magnitude_lossless():
    v = np.array([3.0, -3.0, 3.0, -3.0])
    out = cp.decompress(cp.StcCompressor(4).compress(v))
    np.testing.assert_array_equal(out, v)


def test_stc_hand_case():
    msg = cp.StcCompressor(2).compress(np.array([1.0, -3.0, 0.5]))
    assert set(msg.indices) == {0, 1}
    assert msg.scale == 2.0
    np.testing.assert_array_equal(cp.decompress(msg), [2.0, -2.0, 0.0])


def test_stc_error_monotone_in_k():
    v = np.random.default_rng(3).standard_normal(24)
    errs = [
        np.linalg.norm(v - cp.decompress(cp.StcCompressor(k).compress(v)))
        for k in (1, 4, 8, 16, 24)
    ]
    # STC is not strictly monotone in general but is on generic gaussian draws
    assert errs[0] >= errs[-1]


# ---------------------------------------------------------------------------
# decompress dispatch

def test_dense_roundtrip():
    v = np.random.default_rng(4).standard_normal(9)
    np.testing.assert_array_equal(cp.decompress(cp.IdentityCompressor().compress(v)), v)


def test_sparse_of_zero_vector():
    msg = cp.TopKCompressor(2).compress(np.zeros(6))
    np.testing.assert_array_equal(cp.decompress(msg), np.zeros(6))


def test_decompress_unknown_message():
    with pytest.raises(cp.CompressorError):
        cp.decompress("not a message")


# ---------------------------------------------------------------------------
# error feedback

def _ef_case(compressor, d=40, seed=0):
    rng = np.random.default_rng(seed)
    g = _pv(rng.standard_normal(d))
    ef = cp.EfState(ParamVector(rng.standard_normal(d), g.spec))
    return g, ef


@pytest.mark.parametrize("comp_factory,exact", [
    (cp.IdentityCompressor, True),
    (lambda: cp.TopKCompressor(5), True),
    (cp.SignCompressor, False),
    (lambda: cp.StcCompressor(5), False),
], ids=["identity", "topk", "sign", "stc"])
def test_ef_bookkeeping_identity(comp_factory, exact):
    # decompress(msg) + eps' == g + eps. Bit-exact where decompressed entries
    # coincide with the target's (identity/top-k); float64 round-off where the
    # reconstruction is a genuinely different value (sign/stc scales).
    compressor = comp_factory()
    for seed in range(50):
        g, ef = _ef_case(compressor, seed=seed)
        msg, new_ef = cp.compress_with_ef(compressor, g, ef)
        lhs = cp.decompress(msg) + new_ef.residual.values
        rhs = g.values + ef.residual.values
        if exact:
            np.testing.assert_array_equal(lhs, rhs)
        else:
            np.testing.assert_allclose(lhs, rhs, rtol=0, atol=1e-12)


def test_ef_identity_compressor_zero_residual():
    g, ef = _ef_case(cp.IdentityCompressor())
    _, new_ef = cp.compress_with_ef(cp.IdentityCompressor(), g, ef)
    np.testing.assert_array_equal(new_ef.residual.values, np.zeros(40))


def test_ef_topk_full_dim_zero_residual():
    g, ef = _ef_case(None, d=12)
    _, new_ef = cp.compress_with_ef(cp.TopKCompressor(12), g, ef)
    np.testing.assert_array_equal(new_ef.residual.values, np.zeros(12))


def test_ef_rejects_length_mismatch():
    g = _pv(np.ones(5))
    ef = cp.EfState.zeros(ModelSpec((9, 1)))
    with pytest.raises(cp.CompressorError):
        cp.compress_with_ef(cp.IdentityCompressor(), g, ef)


# ---------------------------------------------------------------------------
# byte accounting

def test_rate_identity_is_one():
    v = np.random.default_rng(5).standard_normal(17)
    msg = cp.IdentityCompressor().compress(v)
    assert cp.compression_rate(msg, 17) == 1.0


def test_ratio_one_synthetic_sample_paper_model():
    # one 795-scalar synthetic message against a 199,210-parameter model
    msg = cp.SfcMessage(np.zeros((1, 784)), np.zeros((1, 10)), 0.0)
    rate = cp.compression_rate(msg, 199_210)
    assert 1.0 / rate == pytest.approx(250.0, rel=0.01)


def test_rate_sign_about_one_thirtysecond():
    d = 3200
    msg = cp.SignCompressor().compress(np.ones(d))
    rate = cp.compression_rate(msg, d)
    assert rate == pytest.approx(1.0 / 32.0, rel=0.02)


@pytest.mark.parametrize("msg_factory", [
    lambda v: cp.IdentityCompressor().compress(v),
    lambda v: cp.TopKCompressor(6).compress(v),
    lambda v: cp.SignCompressor().compress(v),
    lambda v: cp.StcCompressor(6).compress(v),
    lambda v: cp.SfcMessage(v[:12].reshape(2, 6), v[12:20].reshape(2, 4), 0.5),
], ids=["dense", "sparse", "sign", "stc", "sfc"])
def test_reported_bytes_match_serialized_length(msg_factory):
    v = np.random.default_rng(6).standard_normal(20)
    msg = msg_factory(v)
    blob = msg.serialize()
    assert len(blob) == msg.reported_payload_bytes + msg.header_bytes


def test_rate_rejects_bad_param_count():
    msg = cp.IdentityCompressor().compress(np.ones(3))
    with pytest.raises(cp.CompressorError):
        cp.compression_rate(msg, 0)
