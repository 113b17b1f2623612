"""Pyramid feature aggregation: project every enabled stage, resize to 1/8, sum."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .config import ConfigError, PfaConfig
from .nn import BatchNorm2d, Conv2d, Module
from .tensor import DimensionError, Tensor


class StageProjection(Module):
    def __init__(self, c_in: int, c_out: int, rng, dtype=np.float64):
        self.conv = Conv2d(c_in, c_out, 1, rng, dtype=dtype)
        self.bn = BatchNorm2d(c_out, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return T.relu(self.bn(self.conv(x)))


class PFA(Module):
    def __init__(self, stage_widths: list[int], cfg: PfaConfig, rng, dtype=np.float64):
        if len(cfg.use_stage) != len(stage_widths):
            raise ConfigError("stage mask length differs from the number of stages")
        if not any(cfg.use_stage):
            raise ConfigError("PFA needs at least one enabled stage")
        self.cfg = cfg
        # disabled stages keep no parameters, so they cannot receive gradient
        self.proj = [StageProjection(c, cfg.fused_width, rng, dtype=dtype) if on else None
                     for c, on in zip(stage_widths, cfg.use_stage)]

    def forward(self, features: list[Tensor], input_hw: tuple[int, int]) -> Tensor:
        return aggregate(features, self, input_hw)


def aggregate(features: list[Tensor], pfa: PFA, input_hw: tuple[int, int]) -> Tensor:
    H, W = input_hw
    if H % 8 or W % 8:
        raise DimensionError(f"input {H} x {W} not divisible by 8")
    if len(features) != len(pfa.proj):
        raise DimensionError(f"expected {len(pfa.proj)} stage features, got {len(features)}")
    fused = None
    for feat, proj in zip(features, pfa.proj):
        if proj is None:
            continue
        y = T.bilinear_resize(proj(feat), H // 8, W // 8)
        fused = y if fused is None else fused + y
    return fused
