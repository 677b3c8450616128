"""Dual multi-scale attention blocks and DMSANet networks on numpy."""
from .block import DmsaConfig, DmsaParams, dmsa_backward, dmsa_forward, make_ablation
from .config import NetConfigFile, load_net_config, parse_net_config
from .cost import CostConvention, count_flops, count_params, gap_against
from .gradcheck import run_gradcheck
from .network import Network, build_network, build_toy_network
from .params import ParamSet
from .serialization import load_weights, save_weights
from .train import TrainConfig, make_synthetic_dataset, train_toy

__version__ = "0.1.0"

__all__ = [
    "DmsaConfig",
    "DmsaParams",
    "dmsa_forward",
    "dmsa_backward",
    "make_ablation",
    "NetConfigFile",
    "load_net_config",
    "parse_net_config",
    "CostConvention",
    "count_params",
    "count_flops",
    "gap_against",
    "run_gradcheck",
    "Network",
    "build_network",
    "build_toy_network",
    "ParamSet",
    "load_weights",
    "save_weights",
    "TrainConfig",
    "make_synthetic_dataset",
    "train_toy",
]
