"""Training objectives on predicted density maps.

All per-sample losses take ``pred`` as a Tensor holding one density map (any
shape; every element is a pixel) and return a scalar Tensor.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .config import LossWeights
from .density import DensityMap, PointSet, adaptive_density, dot_map
from .tensor import Tensor


class DegenerateInputError(ValueError):
    """A distribution with zero total mass was given to an OT/TV loss."""


@dataclass
class Target:
    count: float
    dot: np.ndarray  # h x w
    smooth: np.ndarray  # h x w

    @classmethod
    def from_points(cls, ps: PointSet, scale: int = 8) -> "Target":
        return cls(float(len(ps)), dot_map(ps, scale).values, adaptive_density(ps, scale).values)


@dataclass
class LossReport:
    total: Tensor
    components: dict[str, float]
    weights: dict[str, float]
    extras: dict[str, float] = field(default_factory=dict)

    def recombined(self) -> float:
        return sum(self.weights[k] * v for k, v in self.components.items())


def _as_array(x) -> np.ndarray:
    if isinstance(x, DensityMap):
        return x.values
    if isinstance(x, Tensor):
        return x.data
    return np.asarray(x, dtype=np.float64)


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(_as_array(x).astype(dtype))


def count_l1(pred: Tensor, gt_count: float) -> Tensor:
    return (pred.sum() - float(gt_count)).abs()


def smooth_l1(p: Tensor, g: float, beta: float = 1.0) -> Tensor:
    diff = abs(float(p.data) - float(g))
    if diff < beta:
        return (p - float(g)) ** 2 * (0.5 / beta)
    return (p - float(g)).abs() - 0.5 * beta


def l2_density(pred: Tensor, gt_smooth) -> Tensor:
    gt = _as_array(gt_smooth).reshape(pred.shape).astype(pred.dtype)
    return ((pred - gt) ** 2).mean()


def tv_loss(pred: Tensor, gt_dot) -> Tensor:
    """Count-scaled L1 distance between the two normalized maps, halved."""
    gt = _as_array(gt_dot).reshape(pred.shape)
    gt_count = float(gt.sum())
    p_sum = float(pred.data.sum())
    if gt_count <= 0 or p_sum <= 0:
        raise DegenerateInputError("tv_loss needs positive mass in both maps")
    diff = pred / pred.sum() - (gt / gt_count).astype(pred.dtype)
    return diff.abs().sum() * (0.5 * gt_count)


def _pixel_centers(h: int, w: int) -> np.ndarray:
    rows, cols = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    return np.stack([rows.ravel(), cols.ravel()], axis=1).astype(np.float64) + 0.5


@dataclass
class SinkhornResult:
    cost: Tensor
    plan: np.ndarray  # support_a x support_b
    a: np.ndarray
    b: np.ndarray
    iterations: int
    marginal_violation: float


def sinkhorn(pred, gt, eps: float = 0.01, iters: int = 100, tol: float = 1e-6,
             map_shape: tuple[int, int] | None = None) -> SinkhornResult:
    """Entropic OT between two maps, log-domain Sinkhorn, differentiable by unrolling.

    Both maps are normalized to unit mass; pixels with zero mass are dropped
    from the problem. The cost is squared distance between pixel centers over
    the squared map diagonal. Iteration stops early once the row-marginal L1
    violation is at most ``tol``.
    """
    dtype = pred.dtype if isinstance(pred, Tensor) else np.float64
    pa, pb = _as_tensor(pred, dtype), _as_tensor(gt, dtype)
    if map_shape is None:
        map_shape = pa.shape[-2:] if pa.ndim >= 2 else (1, pa.size)
    h, w = map_shape
    fa, fb = pa.reshape(-1), pb.reshape(-1)
    if fa.size != h * w or fb.size != h * w:
        raise T.DimensionError("sinkhorn maps must share one h x w grid")
    ma, mb = float(fa.data.sum()), float(fb.data.sum())
    if ma <= 0 or mb <= 0:
        raise DegenerateInputError("sinkhorn needs positive mass in both maps")
    ia = np.flatnonzero(fa.data > 0)
    ib = np.flatnonzero(fb.data > 0)
    a = fa[ia] / fa.sum()
    b = fb[ib] / fb.sum()

    xy = _pixel_centers(h, w)
    C = ((xy[ia, None, :] - xy[None, ib, :]) ** 2).sum(-1) / float(h * h + w * w)
    C = C.astype(dtype)
    C_eps = C / eps
    log_a, log_b = a.log(), b.log()
    la = log_a.reshape(-1, 1)
    lb = log_b.reshape(1, -1)

    f = Tensor(np.zeros((len(ia), 1), dtype=dtype))
    g = Tensor(np.zeros((1, len(ib)), dtype=dtype))
    violation = np.inf
    it = 0
    inv = 1.0 / eps
    for it in range(1, iters + 1):
        f = T.logsumexp(lb + g * inv - C_eps, axis=1).reshape(-1, 1) * (-eps)
        g = T.logsumexp(la + f * inv - C_eps, axis=0).reshape(1, -1) * (-eps)
        # columns are exact after the g update; check the rows
        logp = la.data + lb.data + (f.data + g.data) * inv - C_eps
        violation = float(np.abs(np.exp(logp).sum(axis=1) - a.data).sum())
        if violation <= tol:
            break
    plan = (la + lb + (f + g) * inv - C_eps).exp()
    cost = (plan * C).sum()
    return SinkhornResult(cost, plan.data, a.data, b.data, it, violation)


def sinkhorn_ot(pred, gt, eps: float = 0.01, iters: int = 100, tol: float = 1e-6) -> Tensor:
    return sinkhorn(pred, gt, eps, iters, tol).cost


def _ot_term(pred: Tensor, target: Target, w: LossWeights) -> tuple[Tensor | None, float]:
    if target.count <= 0 or float(pred.data.sum()) <= 0:
        return None, 0.0
    res = sinkhorn(pred, target.dot.reshape(pred.shape), w.sinkhorn_eps, w.sinkhorn_iters, w.sinkhorn_tol)
    n = len(res.a) * len(res.b)
    return res.cost, w.sinkhorn_eps * float(np.log(max(n, 1)))


def _target(gt) -> Target:
    if isinstance(gt, Target):
        return gt
    return Target.from_points(gt)


def _combine(parts: dict[str, Tensor | None], weights: dict[str, float], extras=None) -> LossReport:
    total = None
    comps = {}
    for name, val in parts.items():
        comps[name] = 0.0 if val is None else float(val.data)
        if val is None or weights[name] == 0:
            continue
        term = val * weights[name] if weights[name] != 1 else val
        total = term if total is None else total + term
    if total is None:
        total = Tensor(np.zeros(()))
    return LossReport(total, comps, weights, extras or {})


def loss_full(pred: Tensor, gt: Target | PointSet, w: LossWeights) -> LossReport:
    """Count L1 + lambda1 * OT(dot map) + lambda2 * L2(smoothed map)."""
    t = _target(gt)
    ot, bias = _ot_term(pred, t, w)
    parts = {"count": count_l1(pred, t.count), "ot": ot, "l2": l2_density(pred, t.smooth)}
    weights = {"count": 1.0, "ot": w.lambda1, "l2": w.l2_weight}
    return _combine(parts, weights, {"ot_bias_bound": bias})


def loss_dm(pred: Tensor, gt: Target | PointSet, w: LossWeights) -> LossReport:
    """Count L1 + lambda1 * OT + lambda2 * TV, both against the dot map."""
    t = _target(gt)
    ot, bias = _ot_term(pred, t, w)
    tv = tv_loss(pred, t.dot) if t.count > 0 and float(pred.data.sum()) > 0 else None
    parts = {"count": count_l1(pred, t.count), "ot": ot, "tv": tv}
    weights = {"count": 1.0, "ot": w.lambda1, "tv": w.l2_weight}
    return _combine(parts, weights, {"ot_bias_bound": bias})


def loss_weak(pred: Tensor, gt_count: float | Target | PointSet, w: LossWeights) -> LossReport:
    """Smooth L1 between the predicted and true counts."""
    if isinstance(gt_count, Target):
        gt_count = gt_count.count
    elif isinstance(gt_count, PointSet):
        gt_count = float(len(gt_count))
    parts = {"count": smooth_l1(pred.sum(), gt_count, w.smooth_l1_beta)}
    return _combine(parts, {"count": 1.0})


LOSSES = {"full": loss_full, "dm": loss_dm, "weak": loss_weak}


def batch_loss(pred: Tensor, targets: list[Target], w: LossWeights) -> LossReport:
    """Mean over the batch of the configured per-sample loss; pred is B x 1 x h x w."""
    fn = LOSSES[w.kind]
    reports = [fn(pred[i, 0], t, w) for i, t in enumerate(targets)]
    n = float(len(reports))
    total = reports[0].total
    for r in reports[1:]:
        total = total + r.total
    comps = {k: sum(r.components[k] for r in reports) / n for k in reports[0].components}
    extras = {k: sum(r.extras[k] for r in reports) / n for k in reports[0].extras}
    return LossReport(total * (1.0 / n), comps, reports[0].weights, extras)
