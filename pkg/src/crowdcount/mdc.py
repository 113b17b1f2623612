"""Multi-scale dilated-convolution regression head and receptive-field coverage analysis."""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import ConfigError, MdcConfig
from .nn import Conv2d, ConvBNReLU, Module
from .tensor import Tensor


class Column(Module):
    def __init__(self, c_in: int, c_out: int, pre_kernel: int, kernel: int, dilation: int, rng,
                 dtype=np.float64):
        self.pre = ConvBNReLU(c_in, c_out, pre_kernel, rng, dtype=dtype)
        self.dconv = ConvBNReLU(c_out, c_out, kernel, rng, dilation=dilation, dtype=dtype)
        self.layers = ((pre_kernel, 1), (kernel, dilation))

    def forward(self, x: Tensor) -> Tensor:
        return self.dconv(self.pre(x))


class MDCHead(Module):
    """Columns (parallel or chained), a 1x1 shortcut, then a 1x1 regressor with ReLU.

    In the depth modes each column's pre-conv is 1x1 so that the chain's spatial
    extent comes from the dilated convs alone.
    """

    def __init__(self, c_in: int, cfg: MdcConfig, rng, dtype=np.float64):
        self.cfg = cfg
        cw = max(c_in // 2, 1)
        active = [s for s, on in zip(cfg.specs, cfg.columns) if on]
        cols = []
        if cfg.stacking == "parallel":
            for s in active:
                cols.append(Column(c_in, cw, s.pre_kernel, s.kernel, s.dilation, rng, dtype=dtype))
            width = cw * max(len(active), 1)
        else:
            c = c_in
            for s in active:
                d = 2 if cfg.stacking == "depth_fixed_rate" else s.dilation
                cols.append(Column(c, cw, 1, s.kernel, d, rng, dtype=dtype))
                c = cw
            width = cw
        self.columns = cols
        self.shortcut = Conv2d(c_in, width, 1, rng, dtype=dtype) if cfg.use_shortcut else None
        self.regress = Conv2d(width, 1, 1, rng, init="trunc_normal", dtype=dtype)

    def features(self, x: Tensor) -> Tensor:
        y = None
        if self.columns:
            if self.cfg.stacking == "parallel":
                outs = [col(x) for col in self.columns]
                y = outs[0] if len(outs) == 1 else T.concat(outs, axis=1)
            else:
                y = x
                for col in self.columns:
                    y = col(y)
        if self.shortcut is not None:
            s = self.shortcut(x)
            y = s if y is None else y + s
        return y

    def forward(self, x: Tensor) -> Tensor:
        return T.relu(self.regress(self.features(x)))

    def coverage_stacks(self) -> list["DilationStack"]:
        """One layer stack per path from input to output (dilated layers included)."""
        if not self.columns:
            return [DilationStack(((1, 1),))]
        if self.cfg.stacking == "parallel":
            return [DilationStack(col.layers) for col in self.columns]
        return [DilationStack(tuple(itertools.chain.from_iterable(c.layers for c in self.columns)))]


def mdc_forward(fused: Tensor, head: MDCHead) -> Tensor:
    return head(fused)


# ---------------------------------------------------------------------------
# gridding analysis
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DilationStack:
    layers: tuple[tuple[int, int], ...]  # (kernel, dilation)

    def __post_init__(self):
        if not self.layers:
            raise ConfigError("dilation stack must be nonempty")
        for k, d in self.layers:
            if k < 1 or k % 2 == 0 or d < 1:
                raise ConfigError(f"layer ({k}, {d}): kernel must be odd and dilation positive")

    @classmethod
    def parse(cls, text: str) -> "DilationStack":
        """Parse ``k:d,k:d,...``."""
        layers = []
        for item in text.split(","):
            try:
                k, d = item.strip().split(":")
                layers.append((int(k), int(d)))
            except ValueError:
                raise ConfigError(f"bad stack entry {item!r}; expected k:d") from None
        return cls(tuple(layers))


@dataclass(frozen=True)
class Coverage:
    axis_offsets: frozenset[int]
    offsets_covered: frozenset[tuple[int, int]]
    radius: int
    has_holes: bool

    def grid(self) -> np.ndarray:
        r = self.radius
        g = np.zeros((2 * r + 1, 2 * r + 1), dtype=bool)
        for dy, dx in self.offsets_covered:
            g[dy + r, dx + r] = True
        return g

    def ascii(self) -> str:
        return "\n".join("".join("#" if v else "." for v in row) for row in self.grid())


def receptive_coverage(stack: DilationStack) -> Coverage:
    """Offsets one output position can see through the stack."""
    axis = {0}
    for k, d in stack.layers:
        half = (k - 1) // 2
        axis = {a + j * d for a in axis for j in range(-half, half + 1)}
    radius = sum(d * (k - 1) // 2 for k, d in stack.layers)
    covered = frozenset(itertools.product(sorted(axis), repeat=2))
    holes = len(covered) < (2 * radius + 1) ** 2
    return Coverage(frozenset(axis), covered, radius, holes)
