import numpy as np
import pytest

from crowdcount.tensor import Tensor


def numerical_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar f at x (float64)."""
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f(x)
        flat[i] = old - h
        fm = f(x)
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def gradcheck(fn, *arrays, h: float = 1e-5, projection_seed: int = 0) -> float:
    """Max relative error between autodiff and central differences over every input.

    ``fn`` maps Tensors to a Tensor; it is reduced to a scalar by a fixed random
    projection so non-scalar ops are checked in every output direction.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    proj = {}

    def scalar(out: Tensor) -> Tensor:
        if out.size == 1:
            return out.sum()
        if "w" not in proj:
            proj["w"] = np.random.default_rng(projection_seed).standard_normal(out.shape)
        return (out * proj["w"]).sum()

    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    scalar(fn(*tensors)).backward()
    worst = 0.0
    for k, a in enumerate(arrays):
        def f(v, k=k):
            args = [Tensor(arrays[j] if j != k else v) for j in range(len(arrays))]
            return float(scalar(fn(*args)).data)
        num = numerical_grad(f, a.copy(), h)
        ana = tensors[k].grad if tensors[k].grad is not None else np.zeros_like(a)
        worst = max(worst, rel_err(ana, num))
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def randomize(module, rng, scale: float = 0.5) -> None:
    """Overwrite every parameter with N(0, scale^2) draws, keeping dtype."""
    for _, p in module.named_parameters():
        p.data = (rng.standard_normal(p.shape) * scale).astype(p.dtype)


def zero_params(module) -> None:
    for _, p in module.named_parameters():
        p.data = np.zeros_like(p.data)
