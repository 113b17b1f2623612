"""Run configuration: dataclasses plus a flat ``section.key = value`` text format.

Example file::

    # desk defaults
    backbone.widths = 32,64,128
    backbone.heads = 1,2,4
    backbone.windows = 4,4,4
    backbone.blocks = 1,1,1
    backbone.peg = on
    pfa.stages = 1,2,3
    mdc.columns = 1,2,3
    loss.kind = full
    optim.epochs = 200
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass
class StageConfig:
    patch: int
    width: int
    heads: int
    window: int
    blocks: int = 1

    def __post_init__(self):
        if self.width % self.heads:
            raise ConfigError(f"stage width {self.width} not divisible by {self.heads} heads")
        if min(self.patch, self.width, self.heads, self.window, self.blocks) < 1:
            raise ConfigError("stage fields must be positive")


@dataclass
class BackboneConfig:
    stages: list[StageConfig] = field(default_factory=lambda: [
        StageConfig(patch=4, width=32, heads=1, window=4),
        StageConfig(patch=2, width=64, heads=2, window=4),
        StageConfig(patch=2, width=128, heads=4, window=4),
    ])
    peg: bool = True

    def __post_init__(self):
        if not self.stages:
            raise ConfigError("backbone needs at least one stage")
        down = 1
        for i, st in enumerate(self.stages):
            down *= st.patch
            if down != 4 * 2 ** i:
                raise ConfigError(f"stage {i + 1} cumulative downsampling {down} != {4 * 2 ** i}")

    @property
    def strides(self) -> list[int]:
        return [4 * 2 ** i for i in range(len(self.stages))]


@dataclass
class PfaConfig:
    fused_width: int = 64
    use_stage: tuple[bool, ...] = (True, True, True)

    def __post_init__(self):
        if not any(self.use_stage):
            raise ConfigError("PFA needs at least one enabled stage")


@dataclass
class ColumnSpec:
    pre_kernel: int
    kernel: int
    dilation: int


DEFAULT_COLUMNS = (ColumnSpec(1, 3, 1), ColumnSpec(3, 3, 2), ColumnSpec(3, 3, 3))
STACKING_MODES = ("parallel", "depth", "depth_fixed_rate")


@dataclass
class MdcConfig:
    columns: tuple[bool, ...] = (True, True, True)
    use_shortcut: bool = True
    stacking: str = "parallel"
    specs: tuple[ColumnSpec, ...] = DEFAULT_COLUMNS

    def __post_init__(self):
        if self.stacking not in STACKING_MODES:
            raise ConfigError(f"mdc.stacking must be one of {STACKING_MODES}")
        if len(self.columns) != len(self.specs):
            raise ConfigError("column mask length must match column specs")
        if not any(self.columns) and not self.use_shortcut:
            raise ConfigError("MDC needs a column or the shortcut")
        for s in self.specs:
            if s.kernel % 2 == 0 or s.pre_kernel % 2 == 0:
                raise ConfigError("MDC kernels must be odd")


@dataclass
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    pfa: PfaConfig = field(default_factory=PfaConfig)
    mdc: MdcConfig = field(default_factory=MdcConfig)
    seed: int = 0

    def __post_init__(self):
        if len(self.pfa.use_stage) != len(self.backbone.stages):
            raise ConfigError("pfa.stages mask must cover every backbone stage")


@dataclass
class LossWeights:
    kind: str = "full"
    lambda1: float = 0.01
    lambda2: float | None = None  # None: 1.0 for full, 0.1 for dm
    smooth_l1_beta: float = 1.0
    sinkhorn_eps: float = 0.01
    sinkhorn_iters: int = 100
    sinkhorn_tol: float = 1e-6

    def __post_init__(self):
        if self.kind not in ("full", "dm", "weak"):
            raise ConfigError("loss.kind must be full, dm or weak")
        if min(self.smooth_l1_beta, self.sinkhorn_eps) <= 0 or self.sinkhorn_iters < 1:
            raise ConfigError("loss hyper-parameters must be positive")
        if self.lambda1 < 0 or self.l2_weight < 0:
            raise ConfigError("loss weights must be nonnegative")

    @property
    def l2_weight(self) -> float:
        if self.lambda2 is not None:
            return self.lambda2
        return 0.1 if self.kind == "dm" else 1.0


@dataclass
class OptimConfig:
    lr: float = 1e-4
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 4
    epochs: int = 200
    seed: int = 0
    crop: int = 128
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.lr < 0 or self.eps <= 0:
            raise ConfigError("optim.lr must be >= 0 and optim.eps > 0")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ConfigError("AdamW betas must lie in (0, 1)")
        if self.crop % 64:
            raise ConfigError("optim.crop must be a multiple of 64")


@dataclass
class SynthConfig:
    size: int = 128
    n_scenes: int = 8
    count_min: int = 10
    count_max: int = 40
    radius_min: float = 2.0
    radius_max: float = 3.5
    noise: float = 0.05
    seed: int = 7

    def __post_init__(self):
        if self.size % 64:
            raise ConfigError("synth.size must be a multiple of 64")
        if not 0 <= self.count_min <= self.count_max:
            raise ConfigError("synth count range is empty")


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    optim: OptimConfig = field(default_factory=OptimConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)


# ---------------------------------------------------------------------------
# text format
# ---------------------------------------------------------------------------

def _ints(v: str) -> list[int]:
    return [int(t) for t in v.replace(" ", "").split(",") if t]


def _flag(v: str) -> bool:
    v = v.strip().lower()
    if v in ("on", "true", "yes", "1"):
        return True
    if v in ("off", "false", "no", "0"):
        return False
    raise ConfigError(f"expected on/off, got {v!r}")


def _mask(v: str, n: int, what: str) -> tuple[bool, ...]:
    idx = _ints(v) if v.strip() not in ("", "none") else []
    if any(i < 1 or i > n for i in idx):
        raise ConfigError(f"{what} indices must lie in 1..{n}")
    return tuple(i + 1 in idx for i in range(n))


def parse_pairs(text: str) -> dict[str, str]:
    pairs = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, val = (s.strip() for s in line.split("=", 1))
        pairs[key] = val
    return pairs


_BACKBONE_KEYS = {"stages", "patches", "widths", "heads", "windows", "blocks", "peg"}


def from_pairs(pairs: dict[str, str], base: RunConfig | None = None) -> RunConfig:
    cfg = base or RunConfig()
    bb = cfg.model.backbone
    pairs = dict(pairs)

    bb_vals = {k.split(".", 1)[1]: pairs.pop(k) for k in list(pairs) if k.startswith("backbone.")}
    unknown = set(bb_vals) - _BACKBONE_KEYS
    if unknown:
        raise ConfigError(f"unknown backbone keys {sorted(unknown)}")
    n = int(bb_vals.get("stages", len(bb.stages)))

    def per_stage(key, current):
        if key not in bb_vals:
            vals = current
        else:
            vals = _ints(bb_vals[key])
        if len(vals) == 1 and n > 1:
            vals = vals * n
        if len(vals) < n:
            raise ConfigError(f"backbone.{key} needs {n} values")
        return vals[:n]

    def cur(attr, default):
        vals = [getattr(s, attr) for s in bb.stages]
        return vals + [default(i) for i in range(len(vals), n)]

    patches = per_stage("patches", cur("patch", lambda i: 4 if i == 0 else 2))
    widths = per_stage("widths", cur("width", lambda i: 32 * 2 ** i))
    heads = per_stage("heads", cur("heads", lambda i: 2 ** i))
    windows = per_stage("windows", cur("window", lambda i: 4))
    blocks = per_stage("blocks", cur("blocks", lambda i: 1))
    stages = [StageConfig(p, w, h, s, b) for p, w, h, s, b in zip(patches, widths, heads, windows, blocks)]
    peg = _flag(bb_vals["peg"]) if "peg" in bb_vals else bb.peg
    backbone = BackboneConfig(stages=stages, peg=peg)

    pfa = cfg.model.pfa
    use_stage = pfa.use_stage if len(pfa.use_stage) == n else (True,) * n
    if "pfa.stages" in pairs:
        use_stage = _mask(pairs.pop("pfa.stages"), n, "pfa.stages")
    fused = int(pairs.pop("pfa.width", pfa.fused_width))
    pfa = PfaConfig(fused_width=fused, use_stage=use_stage)

    mdc = cfg.model.mdc
    columns = mdc.columns
    if "mdc.columns" in pairs:
        columns = _mask(pairs.pop("mdc.columns"), len(mdc.specs), "mdc.columns")
    shortcut = _flag(pairs.pop("mdc.shortcut")) if "mdc.shortcut" in pairs else mdc.use_shortcut
    stacking = pairs.pop("mdc.stacking", mdc.stacking)
    specs = mdc.specs
    if "mdc.dilations" in pairs:
        dil = _ints(pairs.pop("mdc.dilations"))
        if len(dil) != len(specs):
            raise ConfigError("mdc.dilations needs one value per column")
        specs = tuple(dataclasses.replace(s, dilation=d) for s, d in zip(specs, dil))
    mdc = MdcConfig(columns=columns, use_shortcut=shortcut, stacking=stacking, specs=specs)

    model = ModelConfig(backbone=backbone, pfa=pfa, mdc=mdc,
                        seed=int(pairs.pop("model.seed", cfg.model.seed)))

    def section(obj, prefix):
        kwargs = {}
        for f in dataclasses.fields(obj):
            key = f"{prefix}.{f.name}"
            if key in pairs:
                raw = pairs.pop(key)
                cur_val = getattr(obj, f.name)
                if isinstance(cur_val, str):
                    kwargs[f.name] = raw
                elif cur_val is None:
                    kwargs[f.name] = None if raw == "None" else float(raw)
                else:
                    kwargs[f.name] = type(cur_val)(raw)
        return dataclasses.replace(obj, **kwargs)

    loss = section(cfg.loss, "loss")
    optim = section(cfg.optim, "optim")
    synth = section(cfg.synth, "synth")
    if pairs:
        raise ConfigError(f"unknown config keys {sorted(pairs)}")
    return RunConfig(model=model, loss=loss, optim=optim, synth=synth)


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    return from_pairs(parse_pairs(Path(path).read_text()))


def _fmt_mask(mask) -> str:
    return ",".join(str(i + 1) for i, m in enumerate(mask) if m) or "none"


def dump_config(cfg: RunConfig) -> str:
    bb = cfg.model.backbone
    lines = [
        f"backbone.stages = {len(bb.stages)}",
        "backbone.patches = " + ",".join(str(s.patch) for s in bb.stages),
        "backbone.widths = " + ",".join(str(s.width) for s in bb.stages),
        "backbone.heads = " + ",".join(str(s.heads) for s in bb.stages),
        "backbone.windows = " + ",".join(str(s.window) for s in bb.stages),
        "backbone.blocks = " + ",".join(str(s.blocks) for s in bb.stages),
        f"backbone.peg = {'on' if bb.peg else 'off'}",
        f"pfa.width = {cfg.model.pfa.fused_width}",
        f"pfa.stages = {_fmt_mask(cfg.model.pfa.use_stage)}",
        f"mdc.columns = {_fmt_mask(cfg.model.mdc.columns)}",
        f"mdc.shortcut = {'on' if cfg.model.mdc.use_shortcut else 'off'}",
        f"mdc.stacking = {cfg.model.mdc.stacking}",
        "mdc.dilations = " + ",".join(str(s.dilation) for s in cfg.model.mdc.specs),
        f"model.seed = {cfg.model.seed}",
    ]
    for prefix, obj in (("loss", cfg.loss), ("optim", cfg.optim), ("synth", cfg.synth)):
        for f in dataclasses.fields(obj):
            lines.append(f"{prefix}.{f.name} = {getattr(obj, f.name)!r}".replace("'", ""))
    return "\n".join(lines) + "\n"
