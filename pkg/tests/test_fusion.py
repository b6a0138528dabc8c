import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mmlip.errors import DegenerateInputError, InvalidInputError, ShapeError, UnsupportedConfigurationError
from mmlip.fusion import (
    AttentionParams,
    FusionKind,
    FusionMethod,
    attention_jacobian,
    attention_reg_gradient,
    attention_reg_term,
    effective_weights,
    fuse,
    fusion_jacobian,
)
from mmlip.linalg import spectral_norm

from oracles import fd_gradient, fd_jacobian, raw_attention


def _attention(weights, **flags):
    return FusionKind.attention(AttentionParams(tuple(weights), **flags))


def _random_instance(rng, n, d):
    ws = [rng.standard_normal((d, d)) for _ in range(n)]
    vs = [rng.standard_normal(d) for _ in range(n)]
    return ws, vs


def test_sum_example():
    out = fuse(FusionKind.sum(), [[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(out.u, [4.0, 6.0])
    assert out.coefficients.size == 0


def test_concat_stacks_in_order():
    out = fuse(FusionKind.concat(), [[1.0], [2.0, 3.0]])
    np.testing.assert_array_equal(out.u, [1.0, 2.0, 3.0])


def test_attention_orthogonal_inputs_vanish():
    out = fuse(_attention([np.eye(2), np.eye(2)]), [[1.0, 0.0], [0.0, 1.0]])
    np.testing.assert_array_equal(out.u, np.zeros(4))
    np.testing.assert_array_equal(out.coefficients, [0.0, 0.0])


def test_attention_parallel_inputs():
    out = fuse(_attention([np.eye(2), np.eye(2)]), [[2.0, 0.0], [3.0, 0.0]])
    assert out.scores[0, 1] == 6.0
    np.testing.assert_array_equal(out.coefficients, [6.0, 6.0])
    np.testing.assert_array_equal(out.u, [12.0, 0.0, 18.0, 0.0])


def test_attention_matches_direct_transcription():
    rng = np.random.default_rng(0)
    for n in (2, 3, 4):
        ws, vs = _random_instance(rng, n, 5)
        np.testing.assert_allclose(fuse(_attention(ws), vs).u, raw_attention(ws, vs), rtol=1e-13, atol=1e-13)


def test_shape_errors():
    with pytest.raises(ShapeError):
        fuse(FusionKind.sum(), [[1.0, 2.0], [1.0]])
    with pytest.raises(ShapeError):
        fuse(_attention([np.eye(2), np.eye(2)]), [[1.0, 0.0], [1.0, 0.0, 0.0]])
    with pytest.raises(ShapeError):
        fuse(_attention([np.eye(2), np.eye(2)]), [[1.0, 0.0]])


def test_zero_vector_under_unit_norm():
    with pytest.raises(DegenerateInputError):
        fuse(_attention([np.eye(2), np.eye(2)], unit_norm_inputs=True), [[0.0, 0.0], [1.0, 0.0]])


def test_attention_params_validation():
    with pytest.raises(InvalidInputError):
        AttentionParams((np.eye(2),))
    with pytest.raises(InvalidInputError):
        AttentionParams((np.eye(2), np.eye(2)), lambda_reg=-1.0)
    with pytest.raises((InvalidInputError, ShapeError)):
        AttentionParams((np.eye(2), np.eye(3)))


def test_jacobian_zero_partner():
    J = attention_jacobian(AttentionParams((np.eye(2), np.eye(2))), [[1.0, 0.0], [0.0, 0.0]], 0)
    np.testing.assert_array_equal(J, np.zeros((4, 2)))


def test_jacobian_orthogonal_example_against_fd():
    # rows are output coordinates, columns input coordinates of v_0
    params = AttentionParams((np.eye(2), np.eye(2)))
    vs = [np.array([1.0, 0.0]), np.array([0.0, 1.0])]
    J = attention_jacobian(params, vs, 0)
    fd = fd_jacobian(lambda x: fuse(FusionKind.attention(params), [x, vs[1]]).u, vs[0])
    np.testing.assert_allclose(J, fd, atol=1e-9)
    np.testing.assert_array_equal(J[:2], [[0.0, 1.0], [0.0, 0.0]])
    np.testing.assert_array_equal(J[2:], [[0.0, 0.0], [0.0, 1.0]])


def test_jacobian_random_n3_d4():
    rng = np.random.default_rng(7)
    ws, vs = _random_instance(rng, 3, 4)
    params = AttentionParams(tuple(ws))
    for k in range(3):
        def f(x, k=k):
            vv = list(vs)
            vv[k] = x
            return fuse(FusionKind.attention(params), vv).u
        fd = fd_jacobian(f, vs[k], step=1e-5)
        J = attention_jacobian(params, vs, k)
        assert np.linalg.norm(J - fd) <= 1e-6 * np.linalg.norm(fd)


def test_jacobian_rejects_flags_and_bad_index():
    ws = (np.eye(2), np.eye(2))
    vs = [[1.0, 0.0], [0.0, 1.0]]
    for flag in ("unit_norm_inputs", "spectral_normalize", "scale_by_sqrt_d"):
        with pytest.raises(UnsupportedConfigurationError):
            attention_jacobian(AttentionParams(ws, **{flag: True}), vs, 0)
    with pytest.raises(InvalidInputError):
        attention_jacobian(AttentionParams(ws), vs, 2)


def test_reg_term_examples():
    assert attention_reg_term(AttentionParams((np.eye(2), np.eye(2)), lambda_reg=0.0)) == 0.0
    assert attention_reg_term(AttentionParams((np.eye(2), np.zeros((2, 2))), lambda_reg=0.5)) == 1.0
    w = np.array([[3.0, 4.0], [0.0, 0.0]])
    assert attention_reg_term(AttentionParams((w, np.zeros((2, 2))), lambda_reg=0.1)) == pytest.approx(2.5)


def test_reg_gradient():
    np.testing.assert_array_equal(attention_reg_gradient(AttentionParams((np.eye(2), np.eye(2))), 0), np.zeros((2, 2)))
    np.testing.assert_array_equal(
        attention_reg_gradient(AttentionParams((np.eye(2), np.eye(2)), lambda_reg=0.5), 1), np.eye(2))
    rng = np.random.default_rng(2)
    ws = [rng.standard_normal((3, 3)) for _ in range(2)]
    lam = 0.37

    def term(w):
        return attention_reg_term(AttentionParams((w, ws[1]), lambda_reg=lam))

    g = attention_reg_gradient(AttentionParams(tuple(ws), lambda_reg=lam), 0)
    np.testing.assert_allclose(g, fd_gradient(term, ws[0]), atol=1e-8)


def test_fusion_jacobian_sum_and_concat():
    np.testing.assert_array_equal(fusion_jacobian(FusionKind.sum(), [[1.0, 2.0], [3.0, 4.0]], 0), np.eye(2))
    J = fusion_jacobian(FusionKind.concat(), [[1.0, 2.0], [3.0, 4.0]], 1)
    np.testing.assert_array_equal(J, [[0, 0], [0, 0], [1, 0], [0, 1]])


def test_fusion_jacobians_match_fd_for_all_kinds():
    rng = np.random.default_rng(11)
    ws, vs = _random_instance(rng, 3, 3)
    for kind in (FusionKind.sum(), FusionKind.concat(), _attention(ws)):
        for k in range(3):
            def f(x, k=k):
                vv = list(vs)
                vv[k] = x
                return fuse(kind, vv).u
            np.testing.assert_allclose(fusion_jacobian(kind, vs, k), fd_jacobian(f, vs[k]), atol=1e-6)


def test_concat_jacobian_single_nonzero_block():
    rng = np.random.default_rng(5)
    vs = [rng.standard_normal(d) for d in (2, 3, 4)]
    for k in range(3):
        J = fusion_jacobian(FusionKind.concat(), vs, k)
        blocks = np.split(J, np.cumsum([2, 3, 4])[:-1], axis=0)
        assert sum(np.any(b != 0) for b in blocks) == 1


def test_sum_and_concat_jacobians_constant():
    rng = np.random.default_rng(6)
    for kind in (FusionKind.sum(), FusionKind.concat()):
        a = fusion_jacobian(kind, [rng.standard_normal(3) for _ in range(2)], 1)
        b = fusion_jacobian(kind, [rng.standard_normal(3) for _ in range(2)], 1)
        np.testing.assert_array_equal(a, b)


def test_attention_jacobian_100_random_instances():
    rng = np.random.default_rng(12)
    for _ in range(100):
        n = int(rng.integers(2, 5))
        d = int(rng.integers(2, 9))
        ws, vs = _random_instance(rng, n, d)
        params = AttentionParams(tuple(ws))
        k = int(rng.integers(0, n))

        def f(x):
            vv = list(vs)
            vv[k] = x
            return raw_attention(ws, vv)

        fd = fd_jacobian(f, vs[k], step=1e-5)
        J = attention_jacobian(params, vs, k)
        assert np.linalg.norm(J - fd) <= 1e-6 * np.linalg.norm(fd)


seeds = st.integers(0, 2**32 - 1)


@settings(max_examples=40, deadline=None)
@given(seeds, st.integers(2, 4), st.integers(1, 6))
def test_scores_symmetric_with_shared_weights(seed, n, d):
    rng = np.random.default_rng(seed)
    w = rng.standard_normal((d, d))
    out = fuse(_attention([w] * n), [rng.standard_normal(d) for _ in range(n)])
    np.testing.assert_allclose(out.scores, out.scores.T, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(seeds, st.integers(2, 4), st.integers(1, 6), st.floats(0.1, 5.0))
def test_homogeneity(seed, n, d, c):
    rng = np.random.default_rng(seed)
    ws, vs = _random_instance(rng, n, d)
    base = fuse(_attention(ws), vs)
    scaled = fuse(_attention(ws), [c * v for v in vs])
    np.testing.assert_allclose(scaled.coefficients, c ** 2 * base.coefficients, rtol=1e-9, atol=1e-12)
    np.testing.assert_allclose(scaled.u, c ** 3 * base.u, rtol=1e-9, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(seeds, st.integers(2, 4), st.integers(1, 6))
def test_flags_normalize(seed, n, d):
    rng = np.random.default_rng(seed)
    ws, vs = _random_instance(rng, n, d)
    params = AttentionParams(tuple(ws), unit_norm_inputs=True, spectral_normalize=True)
    for w in effective_weights(params):
        assert abs(spectral_norm(w) - 1.0) <= 1e-4
    out = fuse(FusionKind.attention(params), vs)
    for i in range(n):
        block = out.u[i * d:(i + 1) * d]
        if out.coefficients[i] != 0:
            assert np.linalg.norm(block / out.coefficients[i]) == pytest.approx(1.0, abs=1e-10)


def test_sqrt_d_scaling():
    rng = np.random.default_rng(8)
    ws, vs = _random_instance(rng, 3, 4)
    plain = fuse(_attention(ws), vs)
    scaled = fuse(_attention(ws, scale_by_sqrt_d=True), vs)
    np.testing.assert_allclose(scaled.coefficients, plain.coefficients / 2.0, rtol=1e-14)


def test_method_enum_round_trip():
    assert FusionMethod("attention") is FusionMethod.ATTENTION
