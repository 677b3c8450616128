import itertools

import numpy as np
import pytest

from dmsanet.attention import channel_branch, channel_shuffle, se_weight, spatial_branch
from dmsanet.block import (
    ABLATIONS,
    DmsaConfig,
    DmsaParams,
    aggregate_branches,
    branch_weights,
    dmsa_forward,
    enhance,
    fuse_splits,
    identity_extraction_kernels,
    make_ablation,
    multi_scale_extract,
)
from dmsanet.errors import InvalidConfig, ShapeMismatch, UnknownVariant
from dmsanet.tensor import conv2d


def config_grid():
    for c, s, g in itertools.product((16, 32, 64), (1, 2, 4), (1, 2, 4, 8)):
        if c % s == 0 and c % (2 * g) == 0:
            yield DmsaConfig(c, splits=s, sa_groups=g, reduction=4, dtype="float64")


def test_config_defaults():
    cfg = DmsaConfig(64)
    assert cfg.kernel_schedule == [3, 5, 7, 9]
    assert cfg.conv_groups_schedule == [1, 4, 8, 16]
    assert (cfg.sa_groups, cfg.reduction) == (8, 16)
    assert cfg.branch_agg == "softmax_eq8"

    wide = DmsaConfig(96, splits=6, reduction=8)
    assert wide.kernel_schedule == [3, 5, 7, 9, 11, 13]
    narrow = DmsaConfig(16, splits=2, sa_groups=2, reduction=4)
    assert narrow.kernel_schedule == [3, 5]
    assert narrow.conv_groups_schedule == [1, 4]
    assert DmsaConfig(8, splits=4, sa_groups=1, reduction=4).conv_groups_schedule == [1, 2, 2, 2]


@pytest.mark.parametrize("kwargs", [
    dict(channels=30, splits=4),
    dict(channels=64, kernel_schedule=[3, 4, 7, 9]),
    dict(channels=64, conv_groups_schedule=[1, 3, 8, 16]),
    dict(channels=64, sa_groups=3),
    dict(channels=64, reduction=24),
    dict(channels=64, norm_variant="layer"),
    dict(channels=64, fc_variant="mlp"),
    dict(channels=64, branch_agg="max"),
])
def test_config_rejects_invalid(kwargs):
    with pytest.raises(InvalidConfig):
        DmsaConfig(**kwargs)


def test_make_ablation():
    cfg = DmsaConfig(64)
    assert (make_ablation(cfg, "origin").norm_variant, make_ablation(cfg, "origin").fc_variant) == \
        ("instance", "affine_gate")
    assert make_ablation(cfg, "wo_fc").fc_variant == "none"
    assert make_ablation(cfg, "conv1x1_fc").fc_variant == "conv1x1"
    assert make_ablation(cfg, "w_bn").norm_variant == "batch"
    with pytest.raises(UnknownVariant):
        make_ablation(cfg, "w_ln")


def test_multi_scale_extract(rng):
    cfg = DmsaConfig(64, dtype="float64")
    params = DmsaParams.init(cfg, rng)
    x = rng.standard_normal((1, 64, 8, 8))
    parts = multi_scale_extract(x, cfg, params)
    assert [p.shape for p in parts] == [(1, 16, 8, 8)] * 4

    one = DmsaConfig(16, splits=1, sa_groups=2, reduction=4, dtype="float64")
    one_params = DmsaParams.init(one, rng)
    one_params.extract = identity_extraction_kernels(one)
    y = rng.standard_normal((1, 16, 5, 5))
    (out,) = multi_scale_extract(y, one, one_params)
    np.testing.assert_allclose(out, y, atol=1e-6)

    two = DmsaConfig(16, splits=2, sa_groups=2, reduction=4, dtype="float64")
    two_params = DmsaParams.init(two, rng)
    z = rng.standard_normal((2, 16, 6, 6))
    got = multi_scale_extract(z, two, two_params)
    for i, (k, g) in enumerate(zip(two.kernel_schedule, two.conv_groups_schedule)):
        expected = conv2d(z[:, 8 * i:8 * i + 8], two_params.extract[i], padding=(k - 1) // 2, groups=g)
        np.testing.assert_allclose(got[i], expected, atol=1e-6)


def test_fuse_splits(rng):
    parts = [rng.standard_normal((1, 16, 8, 8)) for _ in range(4)]
    assert fuse_splits(parts).shape == (1, 64, 8, 8)
    np.testing.assert_array_equal(fuse_splits(parts[:1]), parts[0])
    with pytest.raises(ShapeMismatch):
        fuse_splits([parts[0], rng.standard_normal((1, 8, 8, 8))])

    cfg = DmsaConfig(32, splits=4, sa_groups=2, reduction=4, dtype="float64")
    params = DmsaParams.init(cfg, rng)
    params.extract = identity_extraction_kernels(cfg)
    x = rng.standard_normal((1, 32, 5, 5))
    np.testing.assert_array_equal(fuse_splits(multi_scale_extract(x, cfg, params)), x)


def test_aggregate_equal_branches_pass_through(rng):
    cfg = DmsaConfig(16, splits=2, sa_groups=2, reduction=4, dtype="float64")
    params = DmsaParams.init(cfg, rng)
    e = rng.standard_normal((2, 16, 4, 4))
    np.testing.assert_allclose(aggregate_branches(e, e.copy(), params, cfg), e, atol=1e-6)

    params.se[1] = params.se[0]
    att = branch_weights(e, e, params)
    np.testing.assert_allclose(att, 0.5, atol=1e-12)


def test_aggregate_uniform_when_descriptors_equal(rng):
    cfg = DmsaConfig(16, splits=2, sa_groups=2, reduction=4, dtype="float64")
    params = DmsaParams.init(cfg, rng)
    for se in params.se:
        se.w0[...] = 0.0
        se.w1[...] = 0.0
    e1, e2 = rng.standard_normal((2, 1, 16, 4, 4))
    np.testing.assert_allclose(aggregate_branches(e1, e2, params, cfg), (e1 + e2) / 2, atol=1e-6)


def test_aggregate_matches_composition(rng):
    cfg = DmsaConfig(16, splits=2, sa_groups=2, reduction=4, dtype="float64")
    params = DmsaParams.init(cfg, rng)
    e1, e2 = rng.standard_normal((2, 2, 16, 4, 4))
    z1, z2 = se_weight(e1, params.se[0]), se_weight(e2, params.se[1])
    att1 = np.exp(z1) / (np.exp(z1) + np.exp(z2))
    expected = att1 * e1 + (1 - att1) * e2
    np.testing.assert_allclose(aggregate_branches(e1, e2, params, cfg), expected, atol=1e-6)

    att = branch_weights(e1, e2, params)
    np.testing.assert_allclose(att.sum(axis=0), 1.0, atol=1e-6)


def test_concat_halve_aggregation(rng):
    cfg = DmsaConfig(16, splits=2, sa_groups=2, reduction=4, branch_agg="concat_halve", dtype="float64")
    params = DmsaParams.init(cfg, rng)
    assert params.se == []
    assert params.agg.shape == (16, 32, 1, 1)
    e1, e2 = rng.standard_normal((2, 1, 16, 3, 3))
    expected = conv2d(np.concatenate([e1, e2], axis=1), params.agg)
    np.testing.assert_allclose(aggregate_branches(e1, e2, params, cfg), expected, atol=1e-12)


@pytest.mark.parametrize("cfg", list(config_grid()), ids=lambda c: f"C{c.channels}-S{c.splits}-G{c.sa_groups}")
def test_forward_preserves_shape(cfg, rng):
    params = DmsaParams.init(cfg, rng)
    x = rng.standard_normal((2, cfg.channels, 5, 5))
    assert dmsa_forward(x, cfg, params).shape == x.shape


@pytest.mark.parametrize("cfg", [c for c in config_grid() if c.splits == 2],
                         ids=lambda c: f"C{c.channels}-G{c.sa_groups}")
def test_identity_at_init_equals_channel_shuffle(cfg, rng):
    params = DmsaParams.init(cfg, rng)
    params.extract = identity_extraction_kernels(cfg)
    assert params.channel.beta[0] == 0.0
    assert params.spatial.alpha[0] == 0.0
    x = rng.standard_normal((1, cfg.channels, 4, 4))
    np.testing.assert_array_equal(dmsa_forward(x, cfg, params), channel_shuffle(x, cfg.sa_groups))


def test_forward_matches_staged_composition(rng):
    cfg = DmsaConfig(16, splits=2, sa_groups=2, reduction=4, dtype="float64")
    params = DmsaParams.init(cfg, rng)
    params.channel.beta[...] = 0.4
    params.spatial.alpha[...] = 0.6
    x = rng.standard_normal((1, 16, 4, 4))

    a = fuse_splits(multi_scale_extract(x, cfg, params))
    e1 = channel_branch(a, params.channel)
    e2 = spatial_branch(enhance(a, cfg, params), params.spatial, residual=a)
    expected = channel_shuffle(aggregate_branches(e1, e2, params, cfg), cfg.sa_groups)
    np.testing.assert_allclose(dmsa_forward(x, cfg, params), expected, atol=1e-5)


def test_enhance_gates_only_second_halves(rng):
    cfg = DmsaConfig(16, splits=2, sa_groups=2, reduction=4, dtype="float64")
    params = DmsaParams.init(cfg, rng)
    params.sa.b2[...] = 0.0
    a = rng.standard_normal((1, 16, 3, 3))
    out = enhance(a, cfg, params)
    for g in range(2):
        np.testing.assert_array_equal(out[:, 8 * g:8 * g + 4], a[:, 8 * g:8 * g + 4])
        np.testing.assert_allclose(out[:, 8 * g + 4:8 * g + 8], 0.5 * a[:, 8 * g + 4:8 * g + 8], atol=1e-15)

    none = make_ablation(cfg, "wo_fc")
    np.testing.assert_array_equal(enhance(a, none, DmsaParams.init(none, rng)), a)


@pytest.mark.parametrize("variant", list(ABLATIONS))
def test_all_ablations_run_on_full_size_input(variant):
    rng = np.random.default_rng(7)
    cfg = make_ablation(DmsaConfig(64), variant)
    params = DmsaParams.init(cfg, rng)
    params.channel.beta[...] = 0.1
    params.spatial.alpha[...] = 0.1
    x = rng.standard_normal((1, 64, 56, 56)).astype(np.float32)
    y = dmsa_forward(x, cfg, params)
    assert y.shape == (1, 64, 56, 56)
    assert np.all(np.isfinite(y))


def test_forward_is_deterministic():
    cfg = DmsaConfig(32, splits=2, sa_groups=4, reduction=4, dtype="float64")
    x = np.random.default_rng(3).standard_normal((2, 32, 6, 6))
    outs = [dmsa_forward(x, cfg, DmsaParams.init(cfg, np.random.default_rng(11))) for _ in range(2)]
    np.testing.assert_array_equal(outs[0], outs[1])


def test_strided_block_halves_spatial_size(rng):
    cfg = DmsaConfig(32, splits=4, sa_groups=2, reduction=4, stride=2, dtype="float64")
    params = DmsaParams.init(cfg, rng)
    assert dmsa_forward(rng.standard_normal((1, 32, 8, 8)), cfg, params).shape == (1, 32, 4, 4)


def test_params_round_trip_through_param_set(rng):
    cfg = DmsaConfig(16, splits=2, sa_groups=2, reduction=4, dtype="float64")
    params = DmsaParams.init(cfg, rng)
    ps = params.to_param_set()
    assert "spatial.alpha" in ps and "se.1.w0" in ps and "sa.w2" in ps
    copy = params.rebind(ps.copy())
    x = rng.standard_normal((1, 16, 4, 4))
    np.testing.assert_array_equal(dmsa_forward(x, cfg, copy), dmsa_forward(x, cfg, params))


def test_full_conv_gate_adds_parameters(rng):
    cfg = DmsaConfig(64)
    origin = DmsaParams.init(make_ablation(cfg, "origin"), rng).to_param_set().numel()
    conv = DmsaParams.init(make_ablation(cfg, "conv1x1_fc"), rng).to_param_set().numel()
    none = DmsaParams.init(make_ablation(cfg, "wo_fc"), rng).to_param_set().numel()
    assert none < origin < conv
