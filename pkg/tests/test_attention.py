import numpy as np
import pytest

from src.attention import AttentionBlock, cross_attention, self_attention
from src.autodiff import Parameter
from src.autodiff.gradcheck import finite_diff_check
from src.autodiff.tensor import Tensor, mul, sum_all
from src.utils.errors import ConfigError, DimensionError


def softmax(x):
    e = np.exp(x - x.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def step_by_step(block, E, Z):
    q = E @ block.W_Q.data
    k = Z @ block.W_K.data
    v = Z @ block.W_V.data
    attn = softmax(q @ k.T / np.sqrt(block.d))
    return attn @ v, attn


def test_single_row_self_attention(rng):
    block = AttentionBlock("a", 4, rng)
    E = rng.normal(size=(1, 4))
    result = self_attention(block, Tensor(E))
    np.testing.assert_array_equal(result.map.data, [[1.0]])
    np.testing.assert_allclose(result.output.data, E @ block.W_V.data, atol=1e-12)


def test_zero_queries_give_uniform_map(rng):
    block = AttentionBlock("a", 4, rng)
    block.W_Q.data = np.zeros((4, 4))
    E = rng.normal(size=(3, 4))
    result = self_attention(block, Tensor(E))
    np.testing.assert_allclose(result.map.data, np.full((3, 3), 1 / 3), atol=1e-15)
    mean_v = (E @ block.W_V.data).mean(axis=0)
    np.testing.assert_allclose(result.output.data, np.tile(mean_v, (3, 1)), atol=1e-12)


def test_self_attention_matches_oracle(rng):
    block = AttentionBlock("a", 4, rng)
    E = rng.normal(size=(3, 4))
    result = self_attention(block, Tensor(E))
    out, attn = step_by_step(block, E, E)
    np.testing.assert_allclose(result.output.data, out, atol=1e-12)
    np.testing.assert_allclose(result.map.data, attn, atol=1e-12)


def test_single_key_cross_attention(rng):
    block = AttentionBlock("x", 4, rng)
    Z = rng.normal(size=(1, 4))
    result = cross_attention(block, Tensor(rng.normal(size=(5, 4))), Tensor(Z))
    np.testing.assert_allclose(result.output.data, np.tile(Z @ block.W_V.data, (5, 1)), atol=1e-12)


def test_cross_attention_matches_oracle_and_uniform_case(rng):
    block = AttentionBlock("x", 4, rng)
    E, Z = rng.normal(size=(2, 4)), rng.normal(size=(5, 4))
    result = cross_attention(block, Tensor(E), Tensor(Z))
    out, attn = step_by_step(block, E, Z)
    assert result.map.shape == (2, 5)
    np.testing.assert_allclose(result.output.data, out, atol=1e-12)

    block.W_Q.data = np.zeros((4, 4))
    uniform = cross_attention(block, Tensor(E), Tensor(Z)).output.data
    np.testing.assert_allclose(uniform, np.tile((Z @ block.W_V.data).mean(axis=0), (2, 1)), atol=1e-12)


def test_maps_are_row_stochastic(rng):
    for trial in range(1000):
        d = int(rng.integers(1, 6))
        block = AttentionBlock("r", d, np.random.default_rng(trial))
        E = Tensor(rng.normal(scale=3.0, size=(int(rng.integers(1, 6)), d)))
        Z = Tensor(rng.normal(scale=3.0, size=(int(rng.integers(1, 6)), d)))
        for m in (self_attention(block, E).map.data, cross_attention(block, E, Z).map.data):
            assert (m >= 0).all()
            np.testing.assert_allclose(m.sum(axis=1), 1.0, atol=1e-9)


def test_self_attention_is_permutation_equivariant(rng):
    block = AttentionBlock("p", 5, rng)
    E = rng.normal(size=(4, 5))
    perm = rng.permutation(4)
    base = self_attention(block, Tensor(E))
    permuted = self_attention(block, Tensor(E[perm]))
    np.testing.assert_allclose(permuted.output.data, base.output.data[perm], atol=1e-9)
    np.testing.assert_allclose(permuted.map.data, base.map.data[np.ix_(perm, perm)], atol=1e-9)


def test_dimension_mismatch(rng):
    block = AttentionBlock("a", 4, rng)
    with pytest.raises(DimensionError):
        self_attention(block, Tensor(np.ones((2, 3))))
    with pytest.raises(DimensionError):
        cross_attention(block, Tensor(np.ones((2, 4))), Tensor(np.ones((2, 5))))


def test_attention_gradients(rng):
    block = AttentionBlock("g", 3, rng)
    E = Parameter("E", rng.normal(size=(2, 3)))
    Z = Parameter("Z", rng.normal(size=(4, 3)))
    weights = rng.normal(size=(2, 3))

    def f(params):
        return sum_all(mul(cross_attention(block, E, Z).output, weights))

    report = finite_diff_check(f, [E, Z] + block.parameters())
    assert report.passed(1e-5), report.max_rel_error


def test_residual_flag_adds_queries(rng):
    plain = AttentionBlock("r", 3, np.random.default_rng(5))
    residual = AttentionBlock("r", 3, np.random.default_rng(5), residual=True)
    E = rng.normal(size=(2, 3))
    diff = self_attention(residual, Tensor(E)).output.data - self_attention(plain, Tensor(E)).output.data
    np.testing.assert_allclose(diff, E, atol=1e-12)


def test_identity_init_scores_raw_similarity(rng):
    block = AttentionBlock("i", 4, init="identity", gain=2.5, residual=True)
    E, Z = rng.normal(size=(3, 4)), rng.normal(size=(5, 4))
    result = cross_attention(block, Tensor(E), Tensor(Z))
    np.testing.assert_allclose(result.map.data, softmax(2.5 * E @ Z.T / 2.0), atol=1e-12)
    np.testing.assert_array_equal(result.output.data, E)


def test_unknown_init_and_bad_gain_are_rejected():
    with pytest.raises(ConfigError):
        AttentionBlock("x", 3, init="orthogonal")
    with pytest.raises(ConfigError):
        AttentionBlock("x", 3, init="identity", gain=0.0)
