"""Desk-scale cross-view image retrieval with adapter tuning, multi-scale
channel reallocation, and expert-routed query aggregation."""

from .autodiff import Tape, Tensor, gradcheck, gradcheck_params
from .backbone import Backbone, BackboneConfig, TokenGrid, init_backbone
from .model import CrossViewModel, ModelConfig
from .params import ParameterStore

__all__ = [
    "Backbone",
    "BackboneConfig",
    "CrossViewModel",
    "ModelConfig",
    "ParameterStore",
    "Tape",
    "Tensor",
    "TokenGrid",
    "gradcheck",
    "gradcheck_params",
    "init_backbone",
]

__version__ = "0.1.0"
