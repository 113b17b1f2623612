"""Transformer-based crowd counting with density-map regression, built on a small numpy autodiff engine."""

from .config import RunConfig, load_config
from .model import CrowdCounter

__all__ = ["CrowdCounter", "RunConfig", "load_config"]
__version__ = "0.1.0"
