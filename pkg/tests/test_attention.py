import numpy as np
import pytest

from dmsanet.attention import (
    ChannelBranchParams,
    SaUnitParams,
    SeDescriptorParams,
    SpatialBranchParams,
    channel_attention_map,
    channel_branch,
    channel_shuffle,
    concat_groups,
    group_features,
    sa_spatial_unit,
    se_weight,
    spatial_attention_map,
    spatial_branch,
    split_subfeature,
)
from dmsanet.errors import InvalidGroups, ShapeMismatch
from dmsanet.tensor import instance_norm


def channel_oracle(a, beta):
    _, c, h, w = a.shape
    flat = a[0].reshape(c, h * w)
    out = np.empty_like(flat)
    for j in range(c):
        logits = np.array([flat[i] @ flat[j] for i in range(c)])
        x = np.exp(logits - logits.max())
        x /= x.sum()
        out[j] = beta * sum(x[i] * flat[i] for i in range(c)) + flat[j]
    return out.reshape(1, c, h, w)


def spatial_oracle(a, p):
    _, c, h, w = a.shape
    flat = a[0].reshape(c, h * w)
    proj = [p_.reshape(c, c) @ flat for p_ in (p.wb, p.wc, p.wd)]
    b, cm, d = proj
    out = np.empty_like(flat)
    for j in range(h * w):
        logits = np.array([b[:, i] @ cm[:, j] for i in range(h * w)])
        s = np.exp(logits - logits.max())
        s /= s.sum()
        out[:, j] = p.alpha[0] * sum(s[i] * d[:, i] for i in range(h * w)) + flat[:, j]
    return out.reshape(1, c, h, w)


def random_spatial(rng, c, alpha):
    return SpatialBranchParams(*(rng.standard_normal((c, c, 1, 1)) for _ in range(3)), alpha=np.array([alpha]))


def test_group_features_slices_and_restores(rng):
    x = np.arange(4, dtype=np.float64).reshape(1, 4, 1, 1)
    a, b = group_features(x, 2)
    np.testing.assert_array_equal(a.ravel(), [0, 1])
    np.testing.assert_array_equal(b.ravel(), [2, 3])

    y = rng.standard_normal((2, 8, 3, 3))
    (only,) = group_features(y, 1)
    np.testing.assert_array_equal(only, y)
    np.testing.assert_array_equal(concat_groups(group_features(y, 8)), y)
    with pytest.raises(InvalidGroups):
        group_features(y, 3)


def test_split_subfeature():
    xk = np.arange(4, dtype=np.float64).reshape(1, 4, 1, 1)
    k1, k2 = split_subfeature(xk)
    np.testing.assert_array_equal(k1.ravel(), [0, 1])
    np.testing.assert_array_equal(k2.ravel(), [2, 3])
    np.testing.assert_array_equal(np.concatenate([k1, k2], axis=1), xk)
    with pytest.raises(InvalidGroups):
        split_subfeature(np.ones((1, 3, 2, 2)))


def test_se_weight(rng):
    x = rng.standard_normal((2, 8, 4, 4))
    zero = SeDescriptorParams(np.zeros((2, 8)), np.zeros((8, 2)), reduction=4)
    np.testing.assert_array_equal(se_weight(x, zero), np.full((2, 8, 1, 1), 0.5))

    p = SeDescriptorParams.init(rng, 8, 4, "float64")
    w = se_weight(x, p)
    assert w.shape == (2, 8, 1, 1)
    assert np.all((w > 0) & (w < 1))
    gap = x.mean(axis=(2, 3))
    oracle = 1 / (1 + np.exp(-(np.maximum(gap @ p.w0.T, 0) @ p.w1.T)))
    np.testing.assert_allclose(w[:, :, 0, 0], oracle, atol=1e-10)


def test_se_params_validate_shapes(rng):
    with pytest.raises(ShapeMismatch):
        SeDescriptorParams(np.zeros((3, 8)), np.zeros((8, 3)), reduction=4)


def test_channel_attention_map():
    same = np.ones((1, 3, 2, 2))
    np.testing.assert_allclose(channel_attention_map(same), np.full((1, 3, 3), 1 / 3))
    np.testing.assert_array_equal(channel_attention_map(np.ones((1, 1, 2, 2))), [[[1.0]]])


def test_channel_attention_rows_sum_to_one(rng):
    attn = channel_attention_map(rng.standard_normal((2, 5, 3, 3)))
    np.testing.assert_allclose(attn.sum(axis=-1), 1.0, atol=1e-6)


def test_channel_branch(rng):
    a = rng.standard_normal((1, 3, 2, 2))
    np.testing.assert_array_equal(channel_branch(a, ChannelBranchParams(np.array([0.0]))), a)

    same = np.repeat(rng.standard_normal((1, 1, 2, 2)), 3, axis=1)
    np.testing.assert_allclose(channel_branch(same, ChannelBranchParams(np.array([1.0]))), 2 * same, atol=1e-12)

    np.testing.assert_allclose(channel_branch(a, ChannelBranchParams(np.array([0.7]))), channel_oracle(a, 0.7),
                               atol=1e-6)


def test_channel_branch_keeps_spatially_constant_input_constant():
    a = np.ones((1, 4, 3, 3)) * np.arange(1, 5).reshape(1, 4, 1, 1) * 0.1
    out = channel_branch(a, ChannelBranchParams(np.array([0.5])))
    np.testing.assert_allclose(out, np.broadcast_to(out[:, :, :1, :1], out.shape), atol=1e-12)


def test_spatial_attention_map(rng):
    a = rng.standard_normal((1, 2, 2, 2))
    zero_b = random_spatial(rng, 2, 0.0)
    zero_b.wb[...] = 0.0
    np.testing.assert_allclose(spatial_attention_map(a, zero_b), np.full((1, 4, 4), 0.25))

    p = random_spatial(rng, 2, 0.0)
    np.testing.assert_array_equal(spatial_attention_map(rng.standard_normal((1, 2, 1, 1)), p), [[[1.0]]])
    np.testing.assert_allclose(spatial_attention_map(a, p).sum(axis=-1), 1.0, atol=1e-6)


def test_spatial_branch(rng):
    a = rng.standard_normal((1, 2, 2, 2))
    np.testing.assert_array_equal(spatial_branch(a, random_spatial(rng, 2, 0.0)), a)

    p = random_spatial(rng, 2, 0.3)
    np.testing.assert_allclose(spatial_branch(a, p), spatial_oracle(a, p), atol=1e-6)

    point = rng.standard_normal((1, 2, 1, 1))
    d = (p.wd.reshape(2, 2) @ point.reshape(2, 1)).reshape(1, 2, 1, 1)
    np.testing.assert_allclose(spatial_branch(point, p), 0.3 * d + point, atol=1e-12)


def test_spatial_branch_separate_residual(rng):
    a = rng.standard_normal((1, 2, 2, 2))
    raw = rng.standard_normal((1, 2, 2, 2))
    np.testing.assert_array_equal(spatial_branch(a, random_spatial(rng, 2, 0.0), residual=raw), raw)
    with pytest.raises(ShapeMismatch):
        spatial_branch(a, random_spatial(rng, 2, 0.1), residual=np.ones((1, 2, 3, 3)))


def test_sa_spatial_unit(rng):
    x = rng.standard_normal((2, 4, 3, 3))
    p = SaUnitParams.init(4, dtype="float64")
    p.b2[...] = 50.0
    np.testing.assert_allclose(sa_spatial_unit(x, p), x, atol=1e-12)

    p.b2[...] = 0.0
    np.testing.assert_allclose(sa_spatial_unit(x, p), 0.5 * x, atol=1e-15)

    p.w2[...] = rng.standard_normal(p.w2.shape)
    p.b2[...] = rng.standard_normal(p.b2.shape)
    p.in_gamma[...] = rng.standard_normal(4)
    p.in_beta[...] = rng.standard_normal(4)
    logits = p.w2 * instance_norm(x, p.in_gamma, p.in_beta) + p.b2
    np.testing.assert_allclose(sa_spatial_unit(x, p), x / (1 + np.exp(-logits)), atol=1e-6)


@pytest.mark.parametrize("norm", ["instance", "batch", "group", "shuffle-norm"])
def test_sa_spatial_unit_variants_preserve_shape(rng, norm):
    x = rng.standard_normal((2, 4, 3, 3))
    p = SaUnitParams.init(4, with_running_stats=norm == "batch", dtype="float64")
    out = sa_spatial_unit(x, p, norm=norm)
    assert out.shape == x.shape
    assert np.all(np.isfinite(out))


def test_sa_unit_params_need_exactly_one_kernel():
    with pytest.raises(ShapeMismatch):
        SaUnitParams(b2=np.zeros((2, 1, 1)), in_gamma=np.ones(2), in_beta=np.zeros(2))
    with pytest.raises(ShapeMismatch):
        sa_spatial_unit(np.ones((1, 3, 2, 2)), SaUnitParams.init(2))


def test_channel_shuffle(rng):
    x = np.arange(4, dtype=np.float64).reshape(1, 4, 1, 1)
    np.testing.assert_array_equal(channel_shuffle(x, 2).ravel(), [0, 2, 1, 3])

    y = rng.standard_normal((2, 12, 3, 3))
    np.testing.assert_array_equal(channel_shuffle(y, 1), y)
    np.testing.assert_array_equal(channel_shuffle(y, 12), y)
    np.testing.assert_array_equal(channel_shuffle(channel_shuffle(y, 3), 4), y)

    shuffled = channel_shuffle(y, 4)
    planes = sorted(map(bytes, y[0].reshape(12, -1)))
    assert sorted(map(bytes, shuffled[0].reshape(12, -1))) == planes
    with pytest.raises(InvalidGroups):
        channel_shuffle(y, 5)


def test_attention_maps_are_row_stochastic():
    rng = np.random.default_rng(5)
    for _ in range(100):
        a = rng.standard_normal((1, 4, 3, 3))
        np.testing.assert_allclose(channel_attention_map(a).sum(axis=-1), 1.0, atol=1e-6)
        np.testing.assert_allclose(spatial_attention_map(a, random_spatial(rng, 4, 0.5)).sum(axis=-1), 1.0,
                                   atol=1e-6)
