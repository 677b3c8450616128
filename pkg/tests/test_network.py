import numpy as np
import pytest

from dmsanet.block import DmsaConfig
from dmsanet.errors import InvalidConfig, ShapeMismatch
from dmsanet.memory import ActivationTrace
from dmsanet.network import (
    Bottleneck,
    DmsaLayer,
    NetworkSpec,
    build_network,
    build_toy_network,
    check_stage_sizes,
    default_network_dmsa_config,
)


@pytest.fixture(scope="module")
def resnet50():
    return build_network(50, "plain_bottleneck")


def blocks_per_stage(net):
    return [len(layers) for name, layers in net.stages if name.startswith("stage")]


def test_resnet50_layout(resnet50):
    assert blocks_per_stage(resnet50) == [3, 4, 6, 3]
    assert [name for name, _ in resnet50.stages] == ["stem", "pool", "stage1", "stage2", "stage3", "stage4", "head"]
    assert all(isinstance(b, Bottleneck) for _, layers in resnet50.stages[2:6] for b in layers)


def test_resnet101_layout():
    spec = NetworkSpec.for_depth(101)
    assert [s.blocks for s in spec.stages] == [3, 4, 23, 3]
    assert spec.block_count == 33


def test_spec_output_sizes():
    spec = NetworkSpec.for_depth(50)
    assert [size for _, size in spec.output_sizes()] == [112, 56, 56, 28, 14, 7]
    assert [s.out_width for s in spec.stages] == [256, 512, 1024, 2048]
    with pytest.raises(InvalidConfig):
        NetworkSpec.for_depth(34)
    with pytest.raises(InvalidConfig):
        NetworkSpec.for_depth(50, "basic_block")


def test_resnet50_param_count(resnet50):
    assert resnet50.num_params() == 25_557_032


def test_static_output_shapes(resnet50):
    shapes = dict(resnet50.output_shapes(224))
    assert shapes["stem"] == (64, 112, 112)
    assert shapes["pool"] == (64, 56, 56)
    assert shapes["stage1"] == (256, 56, 56)
    assert shapes["stage4"] == (2048, 7, 7)
    assert shapes["head"] == (1000, 1, 1)


def test_resnet50_forward_traces_table_sizes(resnet50):
    trace = ActivationTrace()
    x = np.random.default_rng(0).standard_normal((1, 3, 224, 224)).astype(np.float32)
    logits = resnet50.forward(x, trace=trace)
    assert logits.shape == (1, 1000)
    assert np.all(np.isfinite(logits))
    check_stage_sizes(trace, resnet50.spec)
    assert [shape[2] for _, shape in trace.shapes()[:6]] == [112, 56, 56, 28, 14, 7]


def test_dmsanet50_forward_traces_table_sizes():
    net = build_network(50, "dmsa_bottleneck")
    trace = ActivationTrace()
    x = np.random.default_rng(0).standard_normal((1, 3, 224, 224)).astype(np.float32)
    logits = net.forward(x, trace=trace)
    assert logits.shape == (1, 1000)
    assert np.all(np.isfinite(logits))
    check_stage_sizes(trace, net.spec)
    assert [shape[2] for _, shape in trace.shapes()[:6]] == [112, 56, 56, 28, 14, 7]


def test_check_stage_sizes_reports_mismatch(resnet50):
    trace = ActivationTrace()
    resnet50.forward(np.zeros((1, 3, 64, 64), dtype=np.float32), trace=trace)
    with pytest.raises(ShapeMismatch):
        check_stage_sizes(trace, resnet50.spec)


def test_forward_rejects_wrong_channels(resnet50):
    with pytest.raises(ShapeMismatch):
        resnet50.forward(np.zeros((1, 4, 32, 32), dtype=np.float32))


def test_dmsanet50_structure():
    net = build_network(50, "dmsa_bottleneck")
    transforms = [b.transform for _, layers in net.stages[2:6] for b in layers]
    assert len(transforms) == 16
    assert all(isinstance(t, DmsaLayer) for t in transforms)
    assert [t.cfg.channels for t in transforms[:3]] == [64, 64, 64]
    assert transforms[3].cfg.stride == 2
    assert transforms[3].cfg.channels == 128
    assert net.name == "dmsanet50"
    assert "stage1.block0.dmsa.spatial.alpha" in net.params()


def test_dmsanet_small_forward():
    net = build_network(50, "dmsa_bottleneck", classes=10, resolution=64)
    logits = net.forward(np.random.default_rng(1).standard_normal((1, 3, 64, 64)).astype(np.float32))
    assert logits.shape == (1, 10)
    assert np.all(np.isfinite(logits))


def test_default_template_is_surfaced():
    cfg = default_network_dmsa_config()
    assert cfg.kernel_schedule == [3, 5, 7, 9]
    assert cfg.conv_groups_schedule == [1, 1, 2, 4]
    wide = cfg.with_channels(512, stride=2)
    assert wide.channels == 512 and wide.stride == 2
    assert wide.conv_groups_schedule == [1, 1, 2, 4]


def test_network_construction_is_seeded():
    a = build_toy_network(seed=3)
    b = build_toy_network(seed=3)
    c = build_toy_network(seed=4)
    for (name, ta), (_, tb) in zip(a.params().items(), b.params().items()):
        np.testing.assert_array_equal(ta, tb, err_msg=name)
    assert any(not np.array_equal(ta, tc) for (_, ta), (_, tc) in zip(a.params().items(), c.params().items()))


def test_toy_network_backward_shapes():
    net = build_toy_network(in_channels=3, classes=2, width=16)
    x = np.random.default_rng(0).standard_normal((4, 3, 8, 8))
    cache = []
    logits = net.forward(x, cache=cache)
    assert logits.shape == (4, 2)
    dx, grads = net.backward(np.ones_like(logits), cache)
    assert dx.shape == x.shape
    assert grads.names() == net.params().names()
    for name, g in grads.items():
        assert g.shape == net.params()[name].shape, name


def test_toy_network_with_custom_dmsa_config():
    cfg = DmsaConfig(32, splits=4, sa_groups=2, reduction=8, dtype="float64")
    net = build_toy_network(width=32, cfg=cfg)
    assert net.layers[3].cfg.splits == 4
    assert net.forward(np.zeros((1, 3, 6, 6))).shape == (1, 2)


def test_buffers_are_not_params(resnet50):
    buffers = resnet50.buffers()
    assert "stem.norm.running_mean" in buffers
    assert "stem.norm.running_mean" not in resnet50.params()
