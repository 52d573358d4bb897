"""protofed: a desk-scale federated learning simulator in which clients train
and exchange only adapter and prototype parameters over a frozen backbone,
and the prototype layer doubles as the interpretation mechanism."""

from .config import RunConfig, load_config, parse_config
from .data import GlyphSpec, SiteDataset, SiteSpec, generate_site
from .fed import FedConfig, RunReport, compare_variants, run_federation
from .loss import LossBreakdown, LossWeights
from .model import BackboneConfig, ModelConfig, ParamGroups, PrototypeModel
from .tensor import Tensor, grad_check

__all__ = [
    "BackboneConfig", "FedConfig", "GlyphSpec", "LossBreakdown", "LossWeights",
    "ModelConfig", "ParamGroups", "PrototypeModel", "RunConfig", "RunReport",
    "SiteDataset", "SiteSpec", "Tensor", "compare_variants", "generate_site",
    "grad_check", "load_config", "parse_config", "run_federation",
]

__version__ = "0.1.0"
