"""Dense NCHW tensors and the primitive kernels every block composes.

Tensors are plain ``numpy.ndarray`` values in row-major NCHW layout. Kernels
never modify their inputs, so arrays can be shared freely between threads.
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Any, Callable, Iterable, List, Optional, Sequence, Tuple, TypeVar

import numpy as np

from .errors import InvalidGroups, ShapeMismatch

logger = logging.getLogger(__name__)

Tensor = np.ndarray

T = TypeVar("T")

DTYPES = {"float32": np.float32, "float64": np.float64}
AXIS_TAGS = ("batch", "channel", "height", "width")

_num_threads = 1


def set_num_threads(n: int) -> None:
    """Set the worker count used by kernels that split work across groups."""
    global _num_threads
    if n < 1:
        raise ValueError(f"thread count must be >= 1, got {n}")
    _num_threads = int(n)
    logger.debug(f"kernel threads set to {_num_threads}")


def get_num_threads() -> int:
    return _num_threads


def parallel_map(fn: Callable[[Any], T], items: Iterable[Any]) -> List[T]:
    """Map ``fn`` over ``items``, in a thread pool when more than one thread is enabled.

    Results come back in input order, so callers see the same values whatever
    the scheduling.
    """
    items = list(items)
    if _num_threads == 1 or len(items) < 2:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=min(_num_threads, len(items))) as pool:
        return list(pool.map(fn, items))


@dataclass(frozen=True)
class Shape:
    """Tensor extents tagged with axis names (trailing axes of N, C, H, W)."""

    dims: Tuple[int, ...]
    axes: Tuple[str, ...]

    def __post_init__(self):
        if len(self.dims) != len(self.axes):
            raise ShapeMismatch(f"{len(self.dims)} extents but {len(self.axes)} axis tags")
        if len(set(self.axes)) != len(self.axes):
            raise ShapeMismatch(f"axis tags must be unique: {self.axes}")
        if any(d < 1 for d in self.dims):
            raise ShapeMismatch(f"all extents must be >= 1: {self.dims}")

    @classmethod
    def of(cls, x: Tensor) -> "Shape":
        if x.ndim > 4:
            raise ShapeMismatch(f"rank {x.ndim} exceeds 4")
        return cls(tuple(int(d) for d in x.shape), AXIS_TAGS[4 - x.ndim:])

    def extent(self, axis: str) -> int:
        if axis not in self.axes:
            raise ShapeMismatch(f"shape {self.dims} has no '{axis}' axis")
        return self.dims[self.axes.index(axis)]

    @property
    def channels(self) -> int:
        return self.extent("channel")

    @property
    def pixels(self) -> int:
        """N = H x W."""
        return self.extent("height") * self.extent("width")

    def require_channels(self, c: int, what: str = "input") -> None:
        if self.channels != c:
            raise ShapeMismatch(f"{what} has {self.channels} channels, expected {c}")


def resolve_dtype(dtype: Any) -> np.dtype:
    if isinstance(dtype, str):
        if dtype not in DTYPES:
            raise ValueError(f"unsupported dtype '{dtype}', expected one of {list(DTYPES)}")
        return np.dtype(DTYPES[dtype])
    resolved = np.dtype(dtype)
    if resolved not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported dtype {resolved}")
    return resolved


def tensor(values: Any, dtype: Any = "float32") -> Tensor:
    """Build a validated contiguous tensor from array-like ``values``."""
    x = np.ascontiguousarray(values, dtype=resolve_dtype(dtype))
    if x.ndim == 0:
        x = x.reshape(1)
    Shape.of(x)
    check_finite(x, "tensor")
    return x


def check_finite(x: Tensor, where: str) -> None:
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{where}: tensor contains NaN or Inf")


def _require_rank(x: Tensor, rank: int, what: str) -> None:
    if x.ndim != rank:
        raise ShapeMismatch(f"{what} must be rank {rank}, got shape {x.shape}")


def _normalize_axis(x: Tensor, axis: int) -> int:
    if not -x.ndim <= axis < x.ndim:
        raise ShapeMismatch(f"axis {axis} out of range for shape {x.shape}")
    return axis % x.ndim


# ---------------------------------------------------------------------------
# linear algebra and convolution
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    _require_rank(a, 2, "matmul lhs")
    _require_rank(b, 2, "matmul rhs")
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul inner extents differ: {a.shape} x {b.shape}")
    return a @ b


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    out = (size + 2 * padding - kernel) // stride + 1
    if out < 1:
        raise ShapeMismatch(
            f"convolution output would be empty (size={size}, kernel={kernel}, "
            f"stride={stride}, padding={padding})"
        )
    return out


def _windows(x: Tensor, kh: int, kw: int, stride: int, padding: int, fill: float = 0.0) -> Tensor:
    """Strided view [N, C, H', W', kh, kw] over the padded input."""
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)),
                   mode="constant", constant_values=fill)
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def check_conv_args(x: Tensor, w: Tensor, stride: int, padding: int, groups: int) -> Tuple[int, int]:
    _require_rank(x, 4, "conv2d input")
    _require_rank(w, 4, "conv2d weight")
    if groups < 1:
        raise InvalidGroups(f"groups must be >= 1, got {groups}")
    if stride < 1 or padding < 0:
        raise ShapeMismatch(f"invalid stride/padding {stride}/{padding}")
    cin, cout = x.shape[1], w.shape[0]
    if cin % groups or cout % groups:
        raise InvalidGroups(f"channels {cin}->{cout} not divisible by groups={groups}")
    if w.shape[1] != cin // groups:
        raise ShapeMismatch(f"weight expects {w.shape[1]} channels per group, input gives {cin // groups}")
    ho = conv_output_size(x.shape[2], w.shape[2], stride, padding)
    wo = conv_output_size(x.shape[3], w.shape[3], stride, padding)
    return ho, wo


def conv2d(x: Tensor, w: Tensor, bias: Optional[Tensor] = None, stride: int = 1,
           padding: int = 0, groups: int = 1) -> Tensor:
    """Grouped 2-D cross-correlation via im2col.

    Args:
        x: input [N, Cin, H, W]
        w: kernel [Cout, Cin/groups, kh, kw]
        bias: optional [Cout]
        stride, padding: applied symmetrically to both spatial axes
        groups: channel groups; each is an independent convolution

    Returns:
        Tensor [N, Cout, H', W']
    """
    ho, wo = check_conv_args(x, w, stride, padding, groups)
    n = x.shape[0]
    cout, cg, kh, kw = w.shape
    og = cout // groups
    if bias is not None and bias.shape != (cout,):
        raise ShapeMismatch(f"bias shape {bias.shape} does not match {cout} output channels")

    win = _windows(x, kh, kw, stride, padding)
    out = np.empty((n, cout, ho, wo), dtype=np.result_type(x, w))

    def _group(g: int) -> None:
        cols = win[:, g * cg:(g + 1) * cg].transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, cg * kh * kw)
        kernel = w[g * og:(g + 1) * og].reshape(og, cg * kh * kw)
        out[:, g * og:(g + 1) * og] = (cols @ kernel.T).reshape(n, ho, wo, og).transpose(0, 3, 1, 2)

    parallel_map(_group, range(groups))
    if bias is not None:
        out += bias.reshape(1, cout, 1, 1)
    return out


def fully_connected(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """x [N, K] @ w [K, M] + b [M]."""
    _require_rank(x, 2, "fully_connected input")
    _require_rank(w, 2, "fully_connected weight")
    if x.shape[1] != w.shape[0]:
        raise ShapeMismatch(f"fully_connected: input {x.shape} vs weight {w.shape}")
    out = x @ w
    if b is not None:
        if b.shape != (w.shape[1],):
            raise ShapeMismatch(f"fully_connected bias {b.shape} vs {w.shape[1]} outputs")
        out = out + b
    return out


# ---------------------------------------------------------------------------
# softmax, pooling
# ---------------------------------------------------------------------------

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    axis = _normalize_axis(x, axis)
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def global_avg_pool(x: Tensor) -> Tensor:
    _require_rank(x, 4, "global_avg_pool input")
    return x.mean(axis=(2, 3), keepdims=True)


def max_pool2d(x: Tensor, k: int, stride: int, padding: int = 0) -> Tensor:
    _require_rank(x, 4, "max_pool2d input")
    if padding * 2 > k:
        raise ShapeMismatch(f"max_pool2d padding {padding} exceeds half the window {k}")
    conv_output_size(x.shape[2], k, stride, padding)
    conv_output_size(x.shape[3], k, stride, padding)
    return _windows(x, k, k, stride, padding, fill=-np.inf).max(axis=(4, 5))


# ---------------------------------------------------------------------------
# normalisation
# ---------------------------------------------------------------------------

def _affine(x: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeMismatch(f"affine parameters {gamma.shape}/{beta.shape} do not match {c} channels")
    return x * gamma.reshape(1, c, 1, 1) + beta.reshape(1, c, 1, 1)


def normalize_groups(x: Tensor, num_groups: int, eps: float) -> Tuple[Tensor, Tensor]:
    """Standardise over (C/num_groups) x H x W blocks.

    Returns the standardised tensor and the per-block inverse standard
    deviation [N, num_groups, 1, 1, 1]. Variance is the population variance.
    """
    _require_rank(x, 4, "normalisation input")
    n, c, h, w = x.shape
    if num_groups < 1 or c % num_groups:
        raise InvalidGroups(f"{c} channels not divisible by num_groups={num_groups}")
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    blocks = x.reshape(n, num_groups, c // num_groups, h, w)
    mean = blocks.mean(axis=(2, 3, 4), keepdims=True)
    centered = blocks - mean
    var = np.mean(centered * centered, axis=(2, 3, 4), keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    return (centered * inv_std).reshape(n, c, h, w), inv_std


def instance_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    xhat, _ = normalize_groups(x, x.shape[1], eps)
    return _affine(xhat, gamma, beta)


def group_norm(x: Tensor, num_groups: int, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    xhat, _ = normalize_groups(x, num_groups, eps)
    return _affine(xhat, gamma, beta)


def batch_norm_inference(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: Tensor,
                         running_var: Tensor, eps: float = 1e-5) -> Tensor:
    _require_rank(x, 4, "batch_norm input")
    c = x.shape[1]
    if running_mean.shape != (c,) or running_var.shape != (c,):
        raise ShapeMismatch(f"running statistics do not match {c} channels")
    scale = 1.0 / np.sqrt(running_var + eps)
    xhat = (x - running_mean.reshape(1, c, 1, 1)) * scale.reshape(1, c, 1, 1)
    return _affine(xhat, gamma, beta)


# ---------------------------------------------------------------------------
# elementwise and layout
# ---------------------------------------------------------------------------

def _broadcast_check(a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(np.shape(a), np.shape(b))
    except ValueError as e:
        raise ShapeMismatch(f"cannot broadcast {np.shape(a)} with {np.shape(b)}") from e


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_check(a, b)
    return a + b


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_check(a, b)
    return a * b


def scale(x: Tensor, s: float) -> Tensor:
    return x * s


def relu(x: Tensor) -> Tensor:
    # NaN propagates so non-finite activations reach the loss checks
    return np.maximum(x, np.zeros((), dtype=np.asarray(x).dtype))


def sigmoid(x: Tensor) -> Tensor:
    """Logistic function, evaluated in the overflow-free branch form."""
    x = np.asarray(x)
    flat = x.reshape(-1)
    out = np.empty_like(flat, dtype=np.result_type(flat, np.float32))
    pos = flat >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-flat[pos]))
    ex = np.exp(flat[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out.reshape(x.shape)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(d) for d in shape)
    if int(np.prod(shape)) != x.size or any(d < 1 for d in shape):
        raise ShapeMismatch(f"cannot reshape {x.shape} to {shape}")
    return x.reshape(shape)


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(int(a) for a in axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeMismatch(f"{axes} is not a permutation of the {x.ndim} axes")
    return np.ascontiguousarray(x.transpose(axes))


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    if not tensors:
        raise ShapeMismatch("concat needs at least one tensor")
    first = tensors[0]
    axis = _normalize_axis(first, axis)
    for t in tensors[1:]:
        if t.ndim != first.ndim or any(
                t.shape[i] != first.shape[i] for i in range(first.ndim) if i != axis):
            raise ShapeMismatch(f"concat shapes disagree off axis {axis}: {first.shape} vs {t.shape}")
    return np.concatenate(tensors, axis=axis)


def split(x: Tensor, parts: int, axis: int = 1) -> List[Tensor]:
    axis = _normalize_axis(x, axis)
    if parts < 1 or x.shape[axis] % parts:
        raise ShapeMismatch(f"axis {axis} of extent {x.shape[axis]} does not split into {parts} parts")
    return [np.ascontiguousarray(p) for p in np.split(x, parts, axis=axis)]
