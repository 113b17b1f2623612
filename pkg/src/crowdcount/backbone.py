"""Pyramid transformer backbone with alternating local / global sub-sampled attention."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .config import BackboneConfig, StageConfig
from .nn import Conv2d, LayerNorm, Linear, Module
from .tensor import DimensionError, Tensor


class PatchEmbed(Module):
    """Non-overlapping K x K patches, linearly projected, then layer-normed."""

    def __init__(self, c_in: int, d_out: int, patch: int, rng, dtype=np.float64):
        self.patch = patch
        self.proj = Conv2d(c_in, d_out, patch, rng, stride=patch, init="trunc_normal", dtype=dtype)
        self.norm = LayerNorm(d_out, dtype=dtype)

    def forward(self, x: Tensor) -> tuple[Tensor, tuple[int, int]]:
        B, C, H, W = x.shape
        K = self.patch
        if H % K or W % K:
            raise DimensionError(f"patch size {K} does not divide input {H} x {W}")
        y = self.proj(x)  # B x d x H/K x W/K
        h, w = y.shape[2:]
        tokens = y.reshape(B, y.shape[1], h * w).transpose(0, 2, 1)
        return self.norm(tokens), (h, w)


def patch_embed(x: Tensor, embed: PatchEmbed) -> Tensor:
    return embed(x)[0]


class Attention(Module):
    """Multi-head attention; queries and keys/values may come from different token sets."""

    def __init__(self, d: int, heads: int, rng, dtype=np.float64):
        if d % heads:
            raise DimensionError(f"width {d} not divisible by {heads} heads")
        self.heads = heads
        self.q = Linear(d, d, rng, dtype=dtype)
        self.k = Linear(d, d, rng, dtype=dtype)
        self.v = Linear(d, d, rng, dtype=dtype)
        self.proj = Linear(d, d, rng, dtype=dtype)

    def _split(self, x: Tensor) -> Tensor:
        B, N, d = x.shape
        return x.reshape(B, N, self.heads, d // self.heads).transpose(0, 2, 1, 3)

    def weights(self, q_in: Tensor, kv_in: Tensor) -> Tensor:
        q, k = self._split(self.q(q_in)), self._split(self.k(kv_in))
        dh = q.shape[-1]
        return T.softmax(T.matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(dh)))

    def forward(self, q_in: Tensor, kv_in: Tensor | None = None) -> Tensor:
        kv_in = q_in if kv_in is None else kv_in
        attn = self.weights(q_in, kv_in)
        out = T.matmul(attn, self._split(self.v(kv_in)))  # B x m x N x dh
        B, m, N, dh = out.shape
        return self.proj(out.transpose(0, 2, 1, 3).reshape(B, N, m * dh))


def self_attention(z: Tensor, attn: Attention) -> Tensor:
    return attn(z)


def _to_grid(z: Tensor, grid: tuple[int, int]) -> Tensor:
    B, N, d = z.shape
    h, w = grid
    if N != h * w:
        raise DimensionError(f"{N} tokens do not form a {h} x {w} grid")
    return z.reshape(B, h, w, d)


def lsa(z: Tensor, grid: tuple[int, int], window: int, attn: Attention) -> Tensor:
    """Self-attention restricted to non-overlapping window x window groups."""
    B, N, d = z.shape
    h, w = grid
    wins = T.window_partition(_to_grid(z, grid), window)
    out = attn(wins)
    return T.window_merge(out, window, h, w).reshape(B, N, d)


class GlobalSubsample(Module):
    """Strided conv (kernel = stride = window) that yields one representative per window."""

    def __init__(self, d: int, window: int, rng, dtype=np.float64):
        self.window = window
        self.conv = Conv2d(d, d, window, rng, stride=window, init="trunc_normal", dtype=dtype)

    def forward(self, z: Tensor, grid: tuple[int, int]) -> Tensor:
        B, N, d = z.shape
        h, w = grid
        if h % self.window or w % self.window:
            raise DimensionError(f"window {self.window} does not divide grid {h} x {w}")
        fmap = _to_grid(z, grid).transpose(0, 3, 1, 2)
        reps = self.conv(fmap)
        return reps.reshape(B, d, -1).transpose(0, 2, 1)


def gsa(z: Tensor, grid: tuple[int, int], sub: GlobalSubsample, attn: Attention) -> Tensor:
    """All tokens query the per-window representatives."""
    return attn(z, sub(z, grid))


class Mlp(Module):
    def __init__(self, d: int, rng, ratio: int = 4, dtype=np.float64):
        self.fc1 = Linear(d, ratio * d, rng, dtype=dtype)
        self.fc2 = Linear(ratio * d, d, rng, dtype=dtype)

    def forward(self, z: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(z)))


def mlp_block(z: Tensor, mlp: Mlp) -> Tensor:
    return mlp(z)


class TwinsBlock(Module):
    """LSA, MLP, GSA, MLP; each pre-normed and wrapped in a residual."""

    def __init__(self, d: int, heads: int, window: int, rng, dtype=np.float64):
        self.window = window
        self.norm1 = LayerNorm(d, dtype=dtype)
        self.local_attn = Attention(d, heads, rng, dtype=dtype)
        self.norm2 = LayerNorm(d, dtype=dtype)
        self.mlp1 = Mlp(d, rng, dtype=dtype)
        self.norm3 = LayerNorm(d, dtype=dtype)
        self.sub = GlobalSubsample(d, window, rng, dtype=dtype)
        self.global_attn = Attention(d, heads, rng, dtype=dtype)
        self.norm4 = LayerNorm(d, dtype=dtype)
        self.mlp2 = Mlp(d, rng, dtype=dtype)

    def forward(self, z: Tensor, grid: tuple[int, int]) -> Tensor:
        z = z + lsa(self.norm1(z), grid, self.window, self.local_attn)
        z = z + self.mlp1(self.norm2(z))
        z = z + gsa(self.norm3(z), grid, self.sub, self.global_attn)
        return z + self.mlp2(self.norm4(z))


def twins_block(z: Tensor, grid: tuple[int, int], block: TwinsBlock) -> Tensor:
    return block(z, grid)


class PEG(Module):
    """Depthwise 3x3 conv over the token grid, added residually."""

    def __init__(self, d: int, rng, dtype=np.float64):
        self.conv = Conv2d(d, d, 3, rng, padding=1, groups=d, init="trunc_normal", dtype=dtype)

    def forward(self, z: Tensor, grid: tuple[int, int]) -> Tensor:
        B, N, d = z.shape
        fmap = _to_grid(z, grid).transpose(0, 3, 1, 2)
        return z + self.conv(fmap).reshape(B, d, N).transpose(0, 2, 1)


def peg(z: Tensor, grid: tuple[int, int], gen: PEG) -> Tensor:
    return gen(z, grid)


class Stage(Module):
    def __init__(self, c_in: int, cfg: StageConfig, use_peg: bool, rng, dtype=np.float64):
        self.cfg = cfg
        self.embed = PatchEmbed(c_in, cfg.width, cfg.patch, rng, dtype=dtype)
        self.blocks = [TwinsBlock(cfg.width, cfg.heads, cfg.window, rng, dtype=dtype)
                       for _ in range(cfg.blocks)]
        self.peg = PEG(cfg.width, rng, dtype=dtype) if use_peg else None

    def forward(self, x: Tensor) -> Tensor:
        z, grid = self.embed(x)
        h, w = grid
        if h % self.cfg.window or w % self.cfg.window:
            raise DimensionError(f"window {self.cfg.window} does not divide grid {h} x {w}")
        for i, blk in enumerate(self.blocks):
            z = blk(z, grid)
            if i == 0 and self.peg is not None:
                z = self.peg(z, grid)
        B, N, d = z.shape
        return z.transpose(0, 2, 1).reshape(B, d, h, w)


class Backbone(Module):
    def __init__(self, cfg: BackboneConfig, rng, in_channels: int = 3, dtype=np.float64):
        self.cfg = cfg
        stages = []
        c = in_channels
        for st in cfg.stages:
            stages.append(Stage(c, st, cfg.peg, rng, dtype=dtype))
            c = st.width
        self.stages = stages

    def check_input(self, H: int, W: int) -> None:
        for i, (st, stride) in enumerate(zip(self.cfg.stages, self.cfg.strides), 1):
            need = stride * st.window
            if H % need or W % need:
                raise DimensionError(
                    f"stage {i}: input {H} x {W} must be divisible by {need} "
                    f"(downsampling {stride} x window {st.window})")

    def forward(self, x: Tensor) -> list[Tensor]:
        self.check_input(*x.shape[2:])
        feats = []
        for st in self.stages:
            x = st(x)
            feats.append(x)
        return feats


def backbone_forward(image: Tensor, model: Backbone) -> list[Tensor]:
    return model(image)
