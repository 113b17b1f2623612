from __future__ import annotations

import numpy as np

from .backbone import Backbone
from .config import ModelConfig
from .mdc import MDCHead
from .nn import Module, name_parameters
from .pfa import PFA
from .tensor import Tensor


class CrowdCounter(Module):
    """Image (B x 3 x H x W) -> density map (B x 1 x H/8 x W/8)."""

    def __init__(self, cfg: ModelConfig, dtype=np.float32):
        rng = np.random.default_rng(cfg.seed)
        self.cfg = cfg
        self.backbone = Backbone(cfg.backbone, rng, dtype=dtype)
        widths = [s.width for s in cfg.backbone.stages]
        self.pfa = PFA(widths, cfg.pfa, rng, dtype=dtype)
        self.head = MDCHead(cfg.pfa.fused_width, cfg.mdc, rng, dtype=dtype)
        self.dtype = np.dtype(dtype)
        name_parameters(self)

    def forward(self, image: Tensor) -> Tensor:
        if not isinstance(image, Tensor):
            image = Tensor(np.asarray(image, dtype=self.dtype))
        feats = self.backbone(image)
        fused = self.pfa(feats, image.shape[2:])
        return self.head(fused)
