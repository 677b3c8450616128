"""JSON network configuration files."""
import json
import logging
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, Optional, Union

from .block import DmsaConfig
from .errors import ConfigFileError, DmsaError
from .network import BLOCK_KINDS, Network, build_network, build_toy_network, default_network_dmsa_config
from .tensor import DTYPES

logger = logging.getLogger(__name__)

DEPTHS = (50, 101, "toy")
DMSA_KEYS = ("splits", "kernel_schedule", "conv_groups_schedule", "sa_groups", "reduction",
             "norm_variant", "fc_variant", "branch_agg", "norm_groups", "eps")


def _line_of(text: str, key: str) -> Optional[int]:
    needle = f'"{key}"'
    for number, line in enumerate(text.splitlines(), 1):
        if needle in line:
            return number
    return None


@dataclass
class NetConfigFile:
    depth: Union[int, str] = 50
    block_kind: str = "dmsa_bottleneck"
    dmsa: Dict[str, Any] = field(default_factory=dict)
    seed: int = 0
    classes: int = 1000
    in_channels: int = 3
    resolution: int = 224
    width: int = 16
    dtype: str = "float32"

    @property
    def is_toy(self) -> bool:
        return self.depth == "toy"

    @property
    def name(self) -> str:
        if self.is_toy:
            return "toy"
        return f"{'dmsanet' if self.block_kind == 'dmsa_bottleneck' else 'resnet'}{self.depth}"

    def dmsa_config(self) -> DmsaConfig:
        """DMSA hyperparameters: the template for this depth with the file's overrides applied."""
        if self.is_toy:
            base = DmsaConfig(self.width, splits=2, sa_groups=2, reduction=4, dtype=self.dtype)
        else:
            base = default_network_dmsa_config(64, dtype=self.dtype)
        values = {k: getattr(base, k) for k in DMSA_KEYS}
        values.update(self.dmsa)
        if "splits" in self.dmsa and "kernel_schedule" not in self.dmsa:
            values["kernel_schedule"] = None
        if "splits" in self.dmsa and "conv_groups_schedule" not in self.dmsa:
            values["conv_groups_schedule"] = None
        return DmsaConfig(channels=base.channels, dtype=self.dtype, **values)

    def to_dict(self) -> Dict[str, Any]:
        """All keys with defaults filled in, as echoed after loading."""
        cfg = self.dmsa_config()
        out = {f.name: getattr(self, f.name) for f in fields(self)}
        out["dmsa"] = {k: getattr(cfg, k) for k in DMSA_KEYS}
        return out

    def build(self, seed: Optional[int] = None) -> Network:
        seed = self.seed if seed is None else seed
        cfg = self.dmsa_config()
        if self.is_toy:
            return build_toy_network(self.in_channels, self.classes, self.width, cfg, seed, self.dtype)
        return build_network(self.depth, self.block_kind, cfg, self.classes, self.in_channels, seed,
                             dtype=self.dtype, resolution=self.resolution)


def _require(condition: bool, message: str, key: str, text: str) -> None:
    if not condition:
        raise ConfigFileError(message, field=key, line=_line_of(text, key.split(".")[-1]))


def _is_int(v: Any) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def parse_net_config(text: str) -> NetConfigFile:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigFileError(f"invalid JSON: {e.msg}", line=e.lineno) from e
    if not isinstance(doc, dict):
        raise ConfigFileError("configuration must be a JSON object", line=1)

    known = {f.name for f in fields(NetConfigFile)}
    for key in doc:
        _require(key in known, f"unknown key '{key}'", key, text)
    dmsa = doc.get("dmsa", {})
    _require(isinstance(dmsa, dict), "'dmsa' must be an object", "dmsa", text)
    for key in dmsa:
        _require(key in DMSA_KEYS, f"unknown key '{key}' in dmsa", f"dmsa.{key}", text)

    depth = doc.get("depth", 50)
    _require(depth in DEPTHS and not isinstance(depth, bool), f"depth must be one of {list(DEPTHS)}", "depth", text)
    _require(doc.get("block_kind", "dmsa_bottleneck") in BLOCK_KINDS,
             f"block_kind must be one of {list(BLOCK_KINDS)}", "block_kind", text)
    for key in ("seed", "classes", "in_channels", "resolution", "width"):
        if key in doc:
            _require(_is_int(doc[key]), f"'{key}' must be an integer", key, text)
            _require(key == "seed" or doc[key] >= 1, f"'{key}' must be positive", key, text)
    _require(doc.get("dtype", "float32") in DTYPES, f"dtype must be one of {list(DTYPES)}", "dtype", text)

    cfg = NetConfigFile(**doc)
    try:
        cfg.dmsa_config()
    except (DmsaError, TypeError) as e:
        raise ConfigFileError(f"invalid dmsa settings: {e}", field="dmsa", line=_line_of(text, "dmsa")) from e
    return cfg


def load_net_config(path: Union[str, Path]) -> NetConfigFile:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigFileError(f"cannot read configuration {path}: {e}") from e
    cfg = parse_net_config(text)
    logger.info(f"loaded {cfg.name} configuration from {path}")
    return cfg
