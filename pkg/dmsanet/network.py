"""Layers, the staged network container and the builders for the plain and
DMSA ResNet families plus the small trainable network."""
import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass, replace
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from .backward import (
    add_backward,
    batch_norm_inference_backward,
    conv2d_backward,
    fully_connected_backward,
    global_avg_pool_backward,
    group_norm_backward,
    max_pool2d_backward,
    relu_backward,
)
from .block import DmsaConfig, DmsaParams, dmsa_backward, dmsa_forward_cached
from .errors import InvalidConfig, ShapeMismatch
from .memory import ActivationTrace
from .params import ParamSet, constant, kaiming_normal, lecun_normal
from .tensor import (
    Tensor,
    batch_norm_inference,
    conv2d,
    conv_output_size,
    fully_connected,
    global_avg_pool,
    group_norm,
    max_pool2d,
    relu,
    resolve_dtype,
)

logger = logging.getLogger(__name__)

BLOCK_KINDS = ("plain_bottleneck", "dmsa_bottleneck")
STAGE_BLOCKS = {50: (3, 4, 6, 3), 101: (3, 4, 23, 3)}
STAGE_INNER_WIDTHS = (64, 128, 256, 512)
EXPANSION = 4

Shape3 = Tuple[int, int, int]
Cache = Optional[Dict[str, Any]]


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

class Layer(ABC):
    """A differentiable stage of a network.

    ``forward`` stores whatever ``backward`` needs in ``cache`` when one is
    given. ``backward`` returns the input gradient and a dict of parameter
    gradients keyed like ``named_params``.
    """

    def __init__(self, name: str):
        self.name = name

    @abstractmethod
    def forward(self, x: Tensor, cache: Cache = None) -> Tensor:
        pass

    @abstractmethod
    def backward(self, dy: Tensor, cache: Dict[str, Any]) -> Tuple[Tensor, Dict[str, Tensor]]:
        pass

    @abstractmethod
    def output_shape(self, in_shape: Shape3) -> Shape3:
        pass

    def named_params(self) -> List[Tuple[str, Tensor]]:
        return []

    def named_buffers(self) -> List[Tuple[str, Tensor]]:
        return []

    def __repr__(self) -> str:
        return f"{type(self).__name__}({self.name})"


class Conv(Layer):
    def __init__(self, name: str, in_channels: int, out_channels: int, kernel: int, stride: int = 1,
                 padding: int = 0, groups: int = 1, bias: bool = False,
                 rng: Optional[np.random.Generator] = None, dtype="float32"):
        super().__init__(name)
        if in_channels % groups or out_channels % groups:
            raise InvalidConfig(f"{name}: channels {in_channels}->{out_channels} not divisible by {groups} groups")
        rng = rng or np.random.default_rng(0)
        self.in_channels, self.out_channels = in_channels, out_channels
        self.kernel, self.stride, self.padding, self.groups = kernel, stride, padding, groups
        fan_in = (in_channels // groups) * kernel * kernel
        self.weight = kaiming_normal(rng, (out_channels, in_channels // groups, kernel, kernel), fan_in, dtype)
        self.bias = constant((out_channels,), 0.0, dtype) if bias else None

    def forward(self, x, cache=None):
        if cache is not None:
            cache["x"] = x
        return conv2d(x, self.weight, self.bias, self.stride, self.padding, self.groups)

    def backward(self, dy, cache):
        dx, dw, db = conv2d_backward(dy, cache["x"], self.weight, self.stride, self.padding, self.groups)
        grads = {"weight": dw}
        if self.bias is not None:
            grads["bias"] = db
        return dx, grads

    def output_shape(self, in_shape):
        c, h, w = in_shape
        if c != self.in_channels:
            raise ShapeMismatch(f"{self.name}: expects {self.in_channels} channels, got {c}")
        return (self.out_channels, conv_output_size(h, self.kernel, self.stride, self.padding),
                conv_output_size(w, self.kernel, self.stride, self.padding))

    def named_params(self):
        named = [("weight", self.weight)]
        if self.bias is not None:
            named.append(("bias", self.bias))
        return named


class Norm(Layer):
    """Batch norm in inference mode, or group norm."""

    def __init__(self, name: str, channels: int, kind: str = "batch", groups: int = 32,
                 eps: float = 1e-5, dtype="float32"):
        super().__init__(name)
        if kind not in ("batch", "group"):
            raise InvalidConfig(f"{name}: unknown norm kind '{kind}'")
        if kind == "group" and channels % groups:
            raise InvalidConfig(f"{name}: {channels} channels not divisible by {groups} groups")
        self.channels, self.kind, self.groups, self.eps = channels, kind, groups, eps
        self.gamma = constant((channels,), 1.0, dtype)
        self.beta = constant((channels,), 0.0, dtype)
        self.running_mean = constant((channels,), 0.0, dtype) if kind == "batch" else None
        self.running_var = constant((channels,), 1.0, dtype) if kind == "batch" else None

    def forward(self, x, cache=None):
        if cache is not None:
            cache["x"] = x
        if self.kind == "batch":
            return batch_norm_inference(x, self.gamma, self.beta, self.running_mean, self.running_var, self.eps)
        return group_norm(x, self.groups, self.gamma, self.beta, self.eps)

    def backward(self, dy, cache):
        if self.kind == "batch":
            dx, dg, db = batch_norm_inference_backward(dy, cache["x"], self.gamma, self.running_mean,
                                                       self.running_var, self.eps)
        else:
            dx, dg, db = group_norm_backward(dy, cache["x"], self.groups, self.gamma, self.eps)
        return dx, {"gamma": dg, "beta": db}

    def output_shape(self, in_shape):
        if in_shape[0] != self.channels:
            raise ShapeMismatch(f"{self.name}: expects {self.channels} channels, got {in_shape[0]}")
        return in_shape

    def named_params(self):
        return [("gamma", self.gamma), ("beta", self.beta)]

    def named_buffers(self):
        if self.kind == "batch":
            return [("running_mean", self.running_mean), ("running_var", self.running_var)]
        return []


class ReLU(Layer):
    def forward(self, x, cache=None):
        if cache is not None:
            cache["x"] = x
        return relu(x)

    def backward(self, dy, cache):
        return relu_backward(dy, cache["x"]), {}

    def output_shape(self, in_shape):
        return in_shape


class MaxPool(Layer):
    def __init__(self, name: str, kernel: int = 3, stride: int = 2, padding: int = 1):
        super().__init__(name)
        self.kernel, self.stride, self.padding = kernel, stride, padding

    def forward(self, x, cache=None):
        if cache is not None:
            cache["x"] = x
        return max_pool2d(x, self.kernel, self.stride, self.padding)

    def backward(self, dy, cache):
        return max_pool2d_backward(dy, cache["x"], self.kernel, self.stride, self.padding), {}

    def output_shape(self, in_shape):
        c, h, w = in_shape
        return (c, conv_output_size(h, self.kernel, self.stride, self.padding),
                conv_output_size(w, self.kernel, self.stride, self.padding))


class GlobalAvgPool(Layer):
    def forward(self, x, cache=None):
        if cache is not None:
            cache["shape"] = x.shape
        return global_avg_pool(x)

    def backward(self, dy, cache):
        return global_avg_pool_backward(dy, cache["shape"]), {}

    def output_shape(self, in_shape):
        return (in_shape[0], 1, 1)


class Linear(Layer):
    """Fully connected head over a flattened [N, C, 1, 1] input; returns [N, M]."""

    def __init__(self, name: str, in_features: int, out_features: int,
                 rng: Optional[np.random.Generator] = None, dtype="float32"):
        super().__init__(name)
        rng = rng or np.random.default_rng(0)
        self.in_features, self.out_features = in_features, out_features
        self.weight = lecun_normal(rng, (in_features, out_features), in_features, dtype)
        self.bias = constant((out_features,), 0.0, dtype)

    def forward(self, x, cache=None):
        flat = x.reshape(x.shape[0], -1)
        if flat.shape[1] != self.in_features:
            raise ShapeMismatch(f"{self.name}: expects {self.in_features} features, got {flat.shape[1]}")
        if cache is not None:
            cache["x"] = flat
            cache["shape"] = x.shape
        return fully_connected(flat, self.weight, self.bias)

    def backward(self, dy, cache):
        dx, dw, db = fully_connected_backward(dy, cache["x"], self.weight)
        return dx.reshape(cache["shape"]), {"weight": dw, "bias": db}

    def output_shape(self, in_shape):
        if int(np.prod(in_shape)) != self.in_features:
            raise ShapeMismatch(f"{self.name}: expects {self.in_features} features, got {in_shape}")
        return (self.out_features, 1, 1)

    def named_params(self):
        return [("weight", self.weight), ("bias", self.bias)]


class DmsaLayer(Layer):
    def __init__(self, name: str, cfg: DmsaConfig, rng: Optional[np.random.Generator] = None):
        super().__init__(name)
        self.cfg = cfg
        self.params = DmsaParams.init(cfg, rng or np.random.default_rng(0))

    def forward(self, x, cache=None):
        y, inner = dmsa_forward_cached(x, self.cfg, self.params)
        if cache is not None:
            cache.update(inner)
        return y

    def backward(self, dy, cache):
        dx, grads = dmsa_backward(dy, cache, self.cfg, self.params)
        return dx, dict(grads.named_tensors())

    def output_shape(self, in_shape):
        c, h, w = in_shape
        if c != self.cfg.channels:
            raise ShapeMismatch(f"{self.name}: expects {self.cfg.channels} channels, got {c}")
        k = self.cfg.kernel_schedule[0]
        s = self.cfg.stride
        return (c, conv_output_size(h, k, s, (k - 1) // 2), conv_output_size(w, k, s, (k - 1) // 2))

    def named_params(self):
        return self.params.named_tensors()

    def named_buffers(self):
        sa = self.params.sa
        if sa is not None and sa.running_mean is not None:
            return [("sa.running_mean", sa.running_mean), ("sa.running_var", sa.running_var)]
        return []


def _run(layers: List[Layer], x: Tensor, caches: Optional[List[Dict[str, Any]]]) -> Tensor:
    for layer in layers:
        entry = None
        if caches is not None:
            entry = {}
            caches.append(entry)
        x = layer.forward(x, entry)
    return x


def _run_backward(layers: List[Layer], dy: Tensor, caches: List[Dict[str, Any]],
                  grads: Dict[str, Tensor]) -> Tensor:
    for layer, entry in zip(reversed(layers), reversed(caches)):
        dy, local = layer.backward(dy, entry)
        for name, g in local.items():
            grads[f"{layer.name}.{name}"] = g
    return dy


class Bottleneck(Layer):
    """1x1 reduce, transform (3x3 conv or DMSA), 1x1 expand, plus a shortcut.

    The stride sits on the transform. A projection shortcut (strided 1x1 conv
    and norm) is used whenever the stride or the width changes.
    """

    def __init__(self, name: str, in_channels: int, inner: int, out_channels: int, stride: int = 1,
                 kind: str = "plain_bottleneck", cfg: Optional[DmsaConfig] = None, norm_kind: str = "batch",
                 rng: Optional[np.random.Generator] = None, dtype="float32"):
        super().__init__(name)
        rng = rng or np.random.default_rng(0)
        self.in_channels, self.inner, self.out_channels, self.stride = in_channels, inner, out_channels, stride
        self.kind = kind
        if kind == "plain_bottleneck":
            transform = Conv("conv2", inner, inner, 3, stride=stride, padding=1, rng=rng, dtype=dtype)
        elif kind == "dmsa_bottleneck":
            if cfg is None:
                raise InvalidConfig(f"{name}: a DMSA bottleneck needs a DmsaConfig")
            transform = DmsaLayer("dmsa", replace(cfg.with_channels(inner, stride), dtype=dtype), rng)
        else:
            raise InvalidConfig(f"unknown block kind '{kind}', expected one of {BLOCK_KINDS}")
        self.main: List[Layer] = [
            Conv("conv1", in_channels, inner, 1, rng=rng, dtype=dtype),
            Norm("norm1", inner, norm_kind, dtype=dtype),
            ReLU("relu1"),
            transform,
            Norm("norm2", inner, norm_kind, dtype=dtype),
            ReLU("relu2"),
            Conv("conv3", inner, out_channels, 1, rng=rng, dtype=dtype),
            Norm("norm3", out_channels, norm_kind, dtype=dtype),
        ]
        self.shortcut: List[Layer] = []
        if stride != 1 or in_channels != out_channels:
            self.shortcut = [
                Conv("downsample.conv", in_channels, out_channels, 1, stride=stride, rng=rng, dtype=dtype),
                Norm("downsample.norm", out_channels, norm_kind, dtype=dtype),
            ]

    @property
    def transform(self) -> Layer:
        return self.main[3]

    def sublayers(self) -> List[Layer]:
        return self.main + self.shortcut

    def forward(self, x, cache=None):
        main_caches = [] if cache is not None else None
        short_caches = [] if cache is not None else None
        h = _run(self.main, x, main_caches)
        s = _run(self.shortcut, x, short_caches)
        pre = h + s
        if cache is not None:
            cache.update(main=main_caches, shortcut=short_caches, pre=pre, x_shape=x.shape)
        return relu(pre)

    def backward(self, dy, cache):
        d = relu_backward(dy, cache["pre"])
        dh, ds = add_backward(d, d.shape, d.shape)
        grads: Dict[str, Tensor] = {}
        dx = _run_backward(self.main, dh, cache["main"], grads)
        dx = dx + _run_backward(self.shortcut, ds, cache["shortcut"], grads)
        return dx, grads

    def output_shape(self, in_shape):
        shape = in_shape
        for layer in self.main:
            shape = layer.output_shape(shape)
        return shape

    def named_params(self):
        return [(f"{layer.name}.{n}", t) for layer in self.sublayers() for n, t in layer.named_params()]

    def named_buffers(self):
        return [(f"{layer.name}.{n}", t) for layer in self.sublayers() for n, t in layer.named_buffers()]


# ---------------------------------------------------------------------------
# network description and container
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StageSpec:
    name: str
    blocks: int
    inner_width: int
    out_width: int
    stride: int


@dataclass(frozen=True)
class NetworkSpec:
    """Stage-by-stage layout of a bottleneck network (stem, pool, four stages, head)."""

    depth: int
    block_kind: str
    stages: Tuple[StageSpec, ...]
    stem_width: int = 64
    stem_kernel: int = 7
    classes: int = 1000
    in_channels: int = 3
    resolution: int = 224

    @classmethod
    def for_depth(cls, depth: int, block_kind: str = "plain_bottleneck", classes: int = 1000,
                  in_channels: int = 3, resolution: int = 224) -> "NetworkSpec":
        if depth not in STAGE_BLOCKS:
            raise InvalidConfig(f"unsupported depth {depth}, expected one of {sorted(STAGE_BLOCKS)}")
        if block_kind not in BLOCK_KINDS:
            raise InvalidConfig(f"unknown block kind '{block_kind}', expected one of {BLOCK_KINDS}")
        stages = tuple(
            StageSpec(f"stage{i + 1}", blocks, inner, inner * EXPANSION, 1 if i == 0 else 2)
            for i, (blocks, inner) in enumerate(zip(STAGE_BLOCKS[depth], STAGE_INNER_WIDTHS))
        )
        spec = cls(depth, block_kind, stages, classes=classes, in_channels=in_channels, resolution=resolution)
        spec.validate()
        return spec

    def validate(self) -> None:
        for i, stage in enumerate(self.stages):
            if stage.out_width != EXPANSION * stage.inner_width:
                raise InvalidConfig(f"{stage.name}: output width must be {EXPANSION}x the inner width")
            if i and stage.inner_width != 2 * self.stages[i - 1].inner_width:
                raise InvalidConfig(f"{stage.name}: inner width must double per stage")
        if self.classes < 1 or self.in_channels < 1:
            raise InvalidConfig("classes and in_channels must be positive")

    @property
    def block_count(self) -> int:
        return sum(s.blocks for s in self.stages)

    def output_sizes(self) -> List[Tuple[str, int]]:
        """Spatial size after the stem, the pool and each stage (112, 56, 56, 28, 14, 7 at 224)."""
        size = conv_output_size(self.resolution, self.stem_kernel, 2, self.stem_kernel // 2)
        sizes = [("stem", size)]
        size = conv_output_size(size, 3, 2, 1)
        sizes.append(("pool", size))
        for stage in self.stages:
            size = conv_output_size(size, 3, stage.stride, 1)
            sizes.append((stage.name, size))
        return sizes


class Network:
    """Ordered named stages of layers; the last stage produces logits [N, classes]."""

    def __init__(self, name: str, stages: List[Tuple[str, List[Layer]]], in_channels: int,
                 spec: Optional[NetworkSpec] = None):
        self.name = name
        self.stages = stages
        self.in_channels = in_channels
        self.spec = spec
        for stage_name, layers in stages:
            for layer in layers:
                layer.name = f"{stage_name}.{layer.name}" if not layer.name.startswith(f"{stage_name}.") else layer.name

    @property
    def layers(self) -> List[Layer]:
        return [layer for _, layers in self.stages for layer in layers]

    def forward(self, x: Tensor, trace: Optional[ActivationTrace] = None,
                cache: Optional[List[Dict[str, Any]]] = None) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ShapeMismatch(f"{self.name} expects [N, {self.in_channels}, H, W] input, got {x.shape}")
        for stage_name, layers in self.stages:
            x = _run(layers, x, cache)
            if trace is not None:
                trace.add_record(stage_name, x)
        return x

    def backward(self, dlogits: Tensor, cache: List[Dict[str, Any]]) -> Tuple[Tensor, ParamSet]:
        """Input gradient and parameter gradients named like ``params()``."""
        grads: Dict[str, Tensor] = {}
        dx = _run_backward(self.layers, dlogits, cache, grads)
        return dx, ParamSet((name, grads[name]) for name, _ in self.params().items())

    def params(self) -> ParamSet:
        return ParamSet((f"{layer.name}.{n}", t) for layer in self.layers for n, t in layer.named_params())

    def buffers(self) -> ParamSet:
        return ParamSet((f"{layer.name}.{n}", t) for layer in self.layers for n, t in layer.named_buffers())

    def num_params(self) -> int:
        return self.params().numel()

    def output_shapes(self, resolution: int) -> List[Tuple[str, Shape3]]:
        shape: Shape3 = (self.in_channels, resolution, resolution)
        shapes = []
        for stage_name, layers in self.stages:
            for layer in layers:
                shape = layer.output_shape(shape)
            shapes.append((stage_name, shape))
        return shapes


def check_stage_sizes(trace: ActivationTrace, spec: NetworkSpec) -> None:
    """Raise ShapeMismatch unless traced stage activations match NetworkSpec.output_sizes."""
    for stage_name, size in spec.output_sizes():
        shape = trace.get(stage_name)["shape"]
        if shape[2:] != (size, size):
            raise ShapeMismatch(f"{stage_name}: expected {size}x{size}, traced {shape[2]}x{shape[3]}")
    logits = trace.get("head")["shape"]
    if logits[1:] != (spec.classes,):
        raise ShapeMismatch(f"head: expected {spec.classes} logits, traced {logits}")


# ---------------------------------------------------------------------------
# builders
# ---------------------------------------------------------------------------

def default_network_dmsa_config(width: int = 64, dtype: str = "float32") -> DmsaConfig:
    """DMSA template for bottleneck networks; narrower conv groups than the block default."""
    return DmsaConfig(channels=width, splits=4, kernel_schedule=[3, 5, 7, 9],
                      conv_groups_schedule=[1, 1, 2, 4], sa_groups=8, reduction=16, dtype=dtype)


def network_name(depth: Any, kind: str) -> str:
    if depth == "toy":
        return "toy"
    return f"{'dmsanet' if kind == 'dmsa_bottleneck' else 'resnet'}{depth}"


def build_network(depth: int, kind: str = "plain_bottleneck", cfg: Optional[DmsaConfig] = None,
                  classes: int = 1000, in_channels: int = 3, seed: int = 0, norm_kind: str = "batch",
                  dtype: str = "float32", resolution: int = 224) -> Network:
    """Build a depth-50/101 bottleneck network with plain or DMSA transforms."""
    spec = NetworkSpec.for_depth(depth, kind, classes, in_channels, resolution)
    resolve_dtype(dtype)
    rng = np.random.default_rng(seed)
    template = cfg if cfg is not None else default_network_dmsa_config(dtype=dtype)

    stages: List[Tuple[str, List[Layer]]] = [
        ("stem", [
            Conv("conv", in_channels, spec.stem_width, spec.stem_kernel, stride=2,
                 padding=spec.stem_kernel // 2, rng=rng, dtype=dtype),
            Norm("norm", spec.stem_width, norm_kind, dtype=dtype),
            ReLU("relu"),
        ]),
        ("pool", [MaxPool("maxpool", 3, 2, 1)]),
    ]
    width = spec.stem_width
    for stage in spec.stages:
        blocks: List[Layer] = []
        for b in range(stage.blocks):
            stride = stage.stride if b == 0 else 1
            blocks.append(Bottleneck(f"block{b}", width, stage.inner_width, stage.out_width, stride, kind,
                                     template if kind == "dmsa_bottleneck" else None, norm_kind, rng, dtype))
            width = stage.out_width
        stages.append((stage.name, blocks))
    stages.append(("head", [GlobalAvgPool("avgpool"), Linear("fc", width, classes, rng, dtype)]))

    net = Network(network_name(depth, kind), stages, in_channels, spec)
    logger.info(f"built {net.name}: {spec.block_count} blocks, {net.num_params():,} parameters")
    return net


def build_toy_network(in_channels: int = 3, classes: int = 2, width: int = 16,
                      cfg: Optional[DmsaConfig] = None, seed: int = 0, dtype: str = "float64",
                      norm_groups: int = 4) -> Network:
    """3x3 stem, GN, ReLU, one DMSA block, GN, ReLU, GAP, FC."""
    if cfg is None:
        cfg = DmsaConfig(width, splits=2, sa_groups=2, reduction=4, dtype=dtype)
    elif cfg.channels != width:
        cfg = cfg.with_channels(width)
    cfg = replace(cfg, dtype=dtype)
    rng = np.random.default_rng(seed)
    stages: List[Tuple[str, List[Layer]]] = [
        ("stem", [
            Conv("conv", in_channels, width, 3, padding=1, rng=rng, dtype=dtype),
            Norm("norm", width, "group", norm_groups, dtype=dtype),
            ReLU("relu"),
        ]),
        ("dmsa", [
            DmsaLayer("block", cfg, rng),
            Norm("norm", width, "group", norm_groups, dtype=dtype),
            ReLU("relu"),
        ]),
        ("head", [GlobalAvgPool("avgpool"), Linear("fc", width, classes, rng, dtype)]),
    ]
    net = Network("toy", stages, in_channels)
    logger.info(f"built toy network: width {width}, {net.num_params():,} parameters")
    return net
