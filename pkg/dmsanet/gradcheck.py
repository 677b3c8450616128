"""Central-difference gradient oracle and the check suites run by ``gradcheck``."""
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Sequence

import numpy as np
import pandas as pd
from tqdm import tqdm

from . import backward as B
from . import tensor as T
from .attention import (
    ChannelBranchParams,
    SaUnitParams,
    SeDescriptorParams,
    SpatialBranchParams,
    channel_branch,
    channel_branch_backward,
    channel_shuffle,
    channel_shuffle_backward,
    sa_spatial_unit,
    sa_spatial_unit_backward,
    se_weight,
    se_weight_backward,
    spatial_branch,
    spatial_branch_backward,
)
from .block import DmsaConfig, DmsaParams, dmsa_backward, dmsa_forward_cached, make_ablation
from .errors import NonFiniteObjective
from .network import ReLU, build_toy_network
from .params import ParamSet

logger = logging.getLogger(__name__)

Objective = Callable[[ParamSet], float]

DEFAULT_STEP = 1e-4
DEFAULT_ATOL = 1e-8


def _evaluate(f: Objective, params: ParamSet, where: str) -> float:
    value = float(f(params))
    if not np.isfinite(value):
        raise NonFiniteObjective(f"objective is not finite at {where}")
    return value


def numeric_gradient(f: Objective, params: ParamSet, step: float = DEFAULT_STEP,
                     names: Optional[Sequence[str]] = None, max_coords: Optional[int] = None,
                     rng: Optional[np.random.Generator] = None, progress: bool = False,
                     threaded: Optional[bool] = None, richardson: bool = False) -> ParamSet:
    """Central differences (f(p+h) - f(p-h)) / 2h for every selected coordinate.

    With ``richardson`` the estimate is (4 D(h/2) - D(h)) / 3, which cancels the
    h**2 truncation term.

    Coordinates are perturbed in place and restored exactly, so ``f`` may read
    the tensors of ``params`` directly. In threaded mode (the default when more
    than one kernel thread is enabled) each tensor is handled on a private copy
    of ``params``, so ``f`` must then read its values from the ParamSet it is
    given. When ``max_coords`` limits the sample, unsampled coordinates are NaN
    in the result.
    """
    if step <= 0:
        raise ValueError(f"step must be positive, got {step}")
    names = list(names) if names is not None else params.names()
    rng = rng or np.random.default_rng(0)
    _evaluate(f, params, "the unperturbed parameters")

    plan = {}
    for name in names:
        size = params[name].size
        if max_coords is not None and size > max_coords:
            plan[name] = np.sort(rng.choice(size, max_coords, replace=False))
        else:
            plan[name] = np.arange(size)
    bar = tqdm(total=int(sum(len(idx) for idx in plan.values())), desc="numeric gradient",
               disable=not progress, leave=False)

    def _tensor(name: str, local: ParamSet) -> np.ndarray:
        t = local[name]
        grad = np.full(t.shape, np.nan, dtype=np.float64)
        flat = t.reshape(-1)

        def _central(i: int, h: float) -> float:
            orig = flat[i]
            flat[i] = orig + h
            plus = _evaluate(f, local, f"{name}[{i}] + h")
            flat[i] = orig - h
            minus = _evaluate(f, local, f"{name}[{i}] - h")
            flat[i] = orig
            return (plus - minus) / (2.0 * h)

        for i in plan[name]:
            if richardson:
                grad.reshape(-1)[i] = (4.0 * _central(i, step / 2.0) - _central(i, step)) / 3.0
            else:
                grad.reshape(-1)[i] = _central(i, step)
            bar.update(1)
        return grad

    if threaded is None:
        threaded = T.get_num_threads() > 1
    if threaded and len(names) > 1:
        grads = T.parallel_map(lambda n: _tensor(n, params.copy()), names)
    else:
        grads = [_tensor(n, params) for n in names]
    bar.close()
    return ParamSet(zip(names, grads))


@dataclass
class TensorCheck:
    name: str
    max_rel_error: float
    max_abs_error: float
    checked: int
    passed: bool


@dataclass
class GradCheckReport:
    tol: float
    atol: float = DEFAULT_ATOL
    step: float = DEFAULT_STEP
    checks: List[TensorCheck] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    @property
    def failures(self) -> List[str]:
        return [c.name for c in self.checks if not c.passed]

    def extend(self, other: "GradCheckReport") -> None:
        self.checks.extend(other.checks)

    def get(self, name: str) -> TensorCheck:
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [(c.name, c.max_rel_error, c.max_abs_error, c.checked, c.passed) for c in self.checks],
            columns=["name", "max_rel_error", "max_abs_error", "checked", "passed"],
        )


def relative_error(numeric: np.ndarray, analytic: np.ndarray) -> np.ndarray:
    return np.abs(numeric - analytic) / np.maximum(np.maximum(np.abs(numeric), np.abs(analytic)), 1e-8)


def compare_gradients(numeric: ParamSet, analytic: Dict[str, np.ndarray], tol: float,
                      atol: float = DEFAULT_ATOL, step: float = DEFAULT_STEP,
                      prefix: str = "") -> GradCheckReport:
    """An element passes when its relative error is <= tol or its absolute error is <= atol."""
    report = GradCheckReport(tol, atol, step)
    for name, num in numeric.items():
        ana = np.asarray(analytic[name], dtype=np.float64)
        mask = np.isfinite(num)
        n, a = num[mask], ana[mask]
        rel = relative_error(n, a)
        err = np.abs(n - a)
        ok = bool(np.all((rel <= tol) | (err <= atol)))
        check = TensorCheck(f"{prefix}{name}", float(rel.max(initial=0.0)), float(err.max(initial=0.0)),
                            int(mask.sum()), ok)
        if ok:
            logger.debug(f"gradcheck {check.name}: rel {check.max_rel_error:.3e} abs {check.max_abs_error:.3e}")
        else:
            logger.warning(f"gradcheck {check.name} FAILED: rel {check.max_rel_error:.3e} "
                           f"abs {check.max_abs_error:.3e} (tol {tol:g})")
        report.checks.append(check)
    return report


def _corrupted(grads: Dict[str, np.ndarray], prefix: str, corrupt: Optional[str]) -> Dict[str, np.ndarray]:
    if corrupt is None or not corrupt.startswith(prefix):
        return grads
    name = corrupt[len(prefix):]
    if name in grads:
        grads = dict(grads)
        grads[name] = grads[name] + 1.0
        logger.info(f"corrupted analytic gradient of {corrupt}")
    return grads


# ---------------------------------------------------------------------------
# primitive and attention op suite
# ---------------------------------------------------------------------------

@dataclass
class _OpCase:
    name: str
    inputs: Dict[str, np.ndarray]
    forward: Callable[[Dict[str, np.ndarray]], np.ndarray]
    backward: Callable[[Dict[str, np.ndarray], np.ndarray], Dict[str, np.ndarray]]


def _away_from_zero(rng: np.random.Generator, shape, margin: float = 1e-3) -> np.ndarray:
    x = rng.standard_normal(shape)
    while np.any(np.abs(x) < margin):
        bad = np.abs(x) < margin
        x[bad] = rng.standard_normal(int(bad.sum()))
    return x


def _se_inputs(rng: np.random.Generator, margin: float = 1e-3):
    # resample until no SE hidden pre-activation sits on the relu kink
    while True:
        x = rng.standard_normal((2, 8, 3, 3))
        w0 = rng.standard_normal((2, 8))
        w1 = rng.standard_normal((8, 2))
        pre = T.global_avg_pool(x).reshape(2, 8) @ w0.T
        if np.all(np.abs(pre) > margin):
            return x, w0, w1


def _sa_case(rng: np.random.Generator, norm: str, full_conv: bool) -> _OpCase:
    c2 = 4
    inputs = {
        "x": rng.standard_normal((2, c2, 3, 3)),
        "b2": rng.standard_normal((c2, 1, 1)),
        "in_gamma": rng.standard_normal(c2),
        "in_beta": rng.standard_normal(c2),
    }
    inputs["fc" if full_conv else "w2"] = rng.standard_normal((c2, c2, 1, 1) if full_conv else (c2, 1, 1))
    buffers = {}
    if norm == "batch":
        buffers = {"running_mean": rng.standard_normal(c2), "running_var": rng.uniform(0.5, 2.0, c2)}

    def params(t):
        return SaUnitParams(b2=t["b2"], in_gamma=t["in_gamma"], in_beta=t["in_beta"], w2=t.get("w2"),
                            fc=t.get("fc"), **buffers)

    def bwd(t, r):
        dx, g = sa_spatial_unit_backward(r, t["x"], params(t), norm)
        grads = {"x": dx, "b2": g.b2, "in_gamma": g.in_gamma, "in_beta": g.in_beta}
        grads["fc" if full_conv else "w2"] = g.fc if full_conv else g.w2
        return grads

    label = f"sa_spatial_unit[{norm}{',conv1x1' if full_conv else ''}]"
    return _OpCase(label, inputs, lambda t: sa_spatial_unit(t["x"], params(t), norm), bwd)


def _op_cases(rng: np.random.Generator) -> List[_OpCase]:
    n = rng.standard_normal
    cases = [
        _OpCase("matmul", {"a": n((3, 4)), "b": n((4, 2))},
                lambda t: T.matmul(t["a"], t["b"]),
                lambda t, r: dict(zip("ab", B.matmul_backward(r, t["a"], t["b"])))),
        _OpCase("conv2d", {"x": n((1, 4, 5, 5)), "w": n((6, 2, 3, 3)), "bias": n(6)},
                lambda t: T.conv2d(t["x"], t["w"], t["bias"], 1, 1, 2),
                lambda t, r: dict(zip(("x", "w", "bias"), B.conv2d_backward(r, t["x"], t["w"], 1, 1, 2)))),
        _OpCase("conv2d_strided", {"x": n((1, 2, 5, 5)), "w": n((3, 2, 3, 3))},
                lambda t: T.conv2d(t["x"], t["w"], stride=2, padding=1),
                lambda t, r: dict(zip(("x", "w"), B.conv2d_backward(r, t["x"], t["w"], 2, 1)[:2]))),
        _OpCase("fully_connected", {"x": n((3, 4)), "w": n((4, 5)), "b": n(5)},
                lambda t: T.fully_connected(t["x"], t["w"], t["b"]),
                lambda t, r: dict(zip(("x", "w", "b"), B.fully_connected_backward(r, t["x"], t["w"])))),
        _OpCase("softmax", {"x": n((2, 5))},
                lambda t: T.softmax(t["x"], -1),
                lambda t, r: {"x": B.softmax_backward(r, T.softmax(t["x"], -1), -1)}),
        _OpCase("global_avg_pool", {"x": n((2, 3, 3, 3))},
                lambda t: T.global_avg_pool(t["x"]),
                lambda t, r: {"x": B.global_avg_pool_backward(r, t["x"].shape)}),
        # distinct values 0.01 apart keep every window's argmax stable under the step
        _OpCase("max_pool2d", {"x": rng.permutation(50).reshape(1, 2, 5, 5) * 0.01 + 0.001 * n((1, 2, 5, 5))},
                lambda t: T.max_pool2d(t["x"], 3, 2, 1),
                lambda t, r: {"x": B.max_pool2d_backward(r, t["x"], 3, 2, 1)}),
        _OpCase("instance_norm", {"x": n((2, 3, 3, 3)), "gamma": n(3), "beta": n(3)},
                lambda t: T.instance_norm(t["x"], t["gamma"], t["beta"]),
                lambda t, r: dict(zip(("x", "gamma", "beta"),
                                      B.instance_norm_backward(r, t["x"], t["gamma"])))),
        _OpCase("group_norm", {"x": n((2, 4, 3, 3)), "gamma": n(4), "beta": n(4)},
                lambda t: T.group_norm(t["x"], 2, t["gamma"], t["beta"]),
                lambda t, r: dict(zip(("x", "gamma", "beta"),
                                      B.group_norm_backward(r, t["x"], 2, t["gamma"])))),
    ]
    mean, var = n(3), rng.uniform(0.5, 2.0, 3)
    cases += [
        _OpCase("batch_norm_inference", {"x": n((2, 3, 3, 3)), "gamma": n(3), "beta": n(3)},
                lambda t: T.batch_norm_inference(t["x"], t["gamma"], t["beta"], mean, var),
                lambda t, r: dict(zip(("x", "gamma", "beta"),
                                      B.batch_norm_inference_backward(r, t["x"], t["gamma"], mean, var)))),
        _OpCase("relu", {"x": _away_from_zero(rng, (2, 3, 4))},
                lambda t: T.relu(t["x"]),
                lambda t, r: {"x": B.relu_backward(r, t["x"])}),
        _OpCase("sigmoid", {"x": n((2, 3, 4))},
                lambda t: T.sigmoid(t["x"]),
                lambda t, r: {"x": B.sigmoid_backward(r, T.sigmoid(t["x"]))}),
        _OpCase("add", {"a": n((2, 3, 4, 4)), "b": n((1, 3, 1, 1))},
                lambda t: T.add(t["a"], t["b"]),
                lambda t, r: dict(zip("ab", B.add_backward(r, t["a"].shape, t["b"].shape)))),
        _OpCase("mul", {"a": n((2, 3, 4, 4)), "b": n((1, 3, 1, 1))},
                lambda t: T.mul(t["a"], t["b"]),
                lambda t, r: dict(zip("ab", B.mul_backward(r, t["a"], t["b"])))),
        _OpCase("scale", {"x": n((2, 3))},
                lambda t: T.scale(t["x"], 1.7),
                lambda t, r: {"x": B.scale_backward(r, 1.7)}),
        _OpCase("reshape", {"x": n((2, 3, 4))},
                lambda t: T.reshape(t["x"], (6, 4)),
                lambda t, r: {"x": B.reshape_backward(r, (2, 3, 4))}),
        _OpCase("transpose", {"x": n((2, 3, 4))},
                lambda t: T.transpose(t["x"], (2, 0, 1)),
                lambda t, r: {"x": B.transpose_backward(r, (2, 0, 1))}),
        _OpCase("concat", {"a": n((1, 2, 2, 2)), "b": n((1, 3, 2, 2))},
                lambda t: T.concat([t["a"], t["b"]], 1),
                lambda t, r: dict(zip("ab", B.concat_backward(r, [2, 3], 1)))),
        _OpCase("split", {"x": n((1, 4, 2, 2))},
                lambda t: T.split(t["x"], 2, 1)[1] * 2.0 + T.split(t["x"], 2, 1)[0],
                lambda t, r: {"x": B.split_backward([r, 2.0 * r], (1, 2, 2, 2), 1)}),
    ]

    x, w0, w1 = _se_inputs(rng)

    def se_bwd(t, r):
        dx, g = se_weight_backward(r, t["x"], SeDescriptorParams(t["w0"], t["w1"], 4))
        return {"x": dx, "w0": g.w0, "w1": g.w1}

    cases.append(_OpCase("se_weight", {"x": x, "w0": w0, "w1": w1},
                         lambda t: se_weight(t["x"], SeDescriptorParams(t["w0"], t["w1"], 4)), se_bwd))

    def ch_bwd(t, r):
        da, g = channel_branch_backward(r, t["a"], ChannelBranchParams(t["beta"]))
        return {"a": da, "beta": g.beta}

    cases.append(_OpCase("channel_branch", {"a": n((1, 3, 2, 2)), "beta": np.array([0.7])},
                         lambda t: channel_branch(t["a"], ChannelBranchParams(t["beta"])), ch_bwd))

    def sp_params(t):
        return SpatialBranchParams(t["wb"], t["wc"], t["wd"], t["alpha"])

    def sp_bwd(t, r):
        da, _, g = spatial_branch_backward(r, t["a"], sp_params(t))
        return {"a": da, "wb": g.wb, "wc": g.wc, "wd": g.wd, "alpha": g.alpha}

    cases.append(_OpCase("spatial_branch",
                         {"a": n((1, 2, 2, 2)), "wb": n((2, 2, 1, 1)), "wc": n((2, 2, 1, 1)),
                          "wd": n((2, 2, 1, 1)), "alpha": np.array([0.3])},
                         lambda t: spatial_branch(t["a"], sp_params(t)), sp_bwd))
    for norm in ("instance", "batch", "group", "shuffle-norm"):
        cases.append(_sa_case(rng, norm, full_conv=False))
    cases.append(_sa_case(rng, "instance", full_conv=True))
    cases.append(_OpCase("channel_shuffle", {"x": n((1, 4, 2, 2))},
                         lambda t: channel_shuffle(t["x"], 2),
                         lambda t, r: {"x": channel_shuffle_backward(r, 2)}))
    return cases


def check_ops(seed: int = 0, tol: float = 1e-5, atol: float = DEFAULT_ATOL, step: float = DEFAULT_STEP,
              corrupt: Optional[str] = None, progress: bool = False) -> GradCheckReport:
    """Every tensor-core primitive and attention op against central differences, at float64."""
    rng = np.random.default_rng(seed)
    report = GradCheckReport(tol, atol, step)
    for case in _op_cases(rng):
        r = rng.standard_normal(case.forward(case.inputs).shape)
        analytic = _corrupted(case.backward(case.inputs, r), f"{case.name}.", corrupt)
        params = ParamSet(case.inputs.items())
        numeric = numeric_gradient(lambda ps: float(np.sum(case.forward(dict(ps.items())) * r)),
                                   params, step, progress=progress)
        report.extend(compare_gradients(numeric, analytic, tol, atol, step, prefix=f"{case.name}."))
    return report


# ---------------------------------------------------------------------------
# block and network suites
# ---------------------------------------------------------------------------

def _randomize_block(params: DmsaParams, rng: np.random.Generator) -> None:
    params.channel.beta[...] = 0.3
    params.spatial.alpha[...] = 0.5
    if params.sa is not None:
        for _, t in params.sa.named():
            t[...] = rng.standard_normal(t.shape)


def check_block(seed: int = 0, tol: float = 1e-4, atol: float = DEFAULT_ATOL, step: float = DEFAULT_STEP,
                variants: Iterable[str] = ("origin",), cfg: Optional[DmsaConfig] = None,
                corrupt: Optional[str] = None, progress: bool = False) -> GradCheckReport:
    """Full DMSA block (C=16, S=2, G=2, 4x4) with nonzero alpha and beta, per ablation variant."""
    base = cfg or DmsaConfig(16, splits=2, sa_groups=2, reduction=16, dtype="float64")
    report = GradCheckReport(tol, atol, step)
    for variant in variants:
        vcfg = make_ablation(base, variant)
        rng = np.random.default_rng(seed)
        params = DmsaParams.init(vcfg, rng)
        _randomize_block(params, rng)
        x = rng.standard_normal((1, vcfg.channels, 4, 4))
        y, cache = dmsa_forward_cached(x, vcfg, params)
        r = rng.standard_normal(y.shape)

        dx, grads = dmsa_backward(r, cache, vcfg, params)
        analytic = dict(grads.named_tensors())
        analytic["x"] = dx
        prefix = f"block[{variant}]."
        analytic = _corrupted(analytic, prefix, corrupt)

        ps = ParamSet([("x", x)] + params.named_tensors())
        numeric = numeric_gradient(
            lambda p: float(np.sum(dmsa_forward_cached(p["x"], vcfg, params.rebind(p))[0] * r)),
            ps, step, progress=progress, richardson=True)
        report.extend(compare_gradients(numeric, analytic, tol, atol, step, prefix=prefix))
    return report


def _relu_margin(net, cache) -> float:
    margin = np.inf
    for layer, entry in zip(net.layers, cache):
        if isinstance(layer, ReLU):
            margin = min(margin, float(np.min(np.abs(entry["x"]))))
    return margin


def check_network(seed: int = 0, tol: float = 1e-4, atol: float = DEFAULT_ATOL, step: float = DEFAULT_STEP,
                  max_coords: Optional[int] = 12, corrupt: Optional[str] = None,
                  progress: bool = False) -> GradCheckReport:
    """Toy network end to end on a 4x4 batch, sampling up to ``max_coords`` entries per tensor."""
    for attempt in range(50):
        rng = np.random.default_rng(seed + 1000 * attempt)
        net = build_toy_network(in_channels=3, classes=3, width=16, seed=seed + attempt, dtype="float64")
        for name, t in net.params().items():
            if name.endswith("spatial.alpha"):
                t[...] = 0.5
            elif name.endswith("channel.beta"):
                t[...] = 0.3
        x = rng.standard_normal((2, 3, 4, 4))
        cache: List[Dict] = []
        logits = net.forward(x, cache=cache)
        if _relu_margin(net, cache) > 1e-3:
            break
        logger.debug(f"network gradcheck: relu input near zero, resampling (attempt {attempt})")
    r = rng.standard_normal(logits.shape)

    _, grads = net.backward(r, cache)
    prefix = "network."
    analytic = _corrupted(dict(grads.items()), prefix, corrupt)
    numeric = numeric_gradient(lambda p: float(np.sum(net.forward(x) * r)), net.params(), step,
                               max_coords=max_coords, rng=np.random.default_rng(seed), progress=progress,
                               threaded=False, richardson=True)
    return compare_gradients(numeric, analytic, tol, atol, step, prefix=prefix)


SCOPES = {"op": check_ops, "block": check_block, "network": check_network}


def run_gradcheck(scope: str = "op", seeds: Sequence[int] = (0,), corrupt: Optional[str] = None,
                  progress: bool = False) -> GradCheckReport:
    if scope not in SCOPES:
        raise ValueError(f"unknown scope '{scope}', expected one of {list(SCOPES)}")
    merged: Optional[GradCheckReport] = None
    for seed in seeds:
        report = SCOPES[scope](seed=seed, corrupt=corrupt, progress=progress)
        if merged is None:
            merged = report
        else:
            merged.extend(report)
        logger.info(f"gradcheck {scope} seed {seed}: {len(report.checks)} tensors, "
                    f"{len(report.failures)} failures")
    return merged
