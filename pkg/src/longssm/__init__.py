"""Selective state space language models for long longitudinal documents."""

from longssm.model import LmModel, ModelConfig
from longssm.ssm import BlockConfig, selective_scan_parallel, selective_scan_sequential

__all__ = ["BlockConfig", "LmModel", "ModelConfig", "selective_scan_parallel", "selective_scan_sequential"]
__version__ = "0.1.0"
