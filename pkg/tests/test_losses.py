import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import gradcheck
from crowdcount.config import LossWeights
from crowdcount.density import PointSet, adaptive_density
from crowdcount.losses import (
    DegenerateInputError, Target, batch_loss, count_l1, l2_density, loss_dm, loss_full, loss_weak,
    sinkhorn, sinkhorn_ot, smooth_l1, tv_loss,
)
from crowdcount.tensor import Tensor

SEEDS = range(20)
# fixed iteration count: early stopping makes the loss piecewise in its input
FIXED = LossWeights(sinkhorn_tol=0.0, sinkhorn_iters=60)


def exact_ot_1d(a, b, n):
    """Exact squared-distance OT on a 1-D grid by monotone quantile matching."""
    a, b = a / a.sum(), b / b.sum()
    i = j = 0
    ra, rb = a[0], b[0]
    cost = 0.0
    while True:
        m = min(ra, rb)
        cost += m * ((i - j) ** 2) / (1.0 + n * n)
        ra -= m
        rb -= m
        if ra <= 1e-15:
            i += 1
            if i == n:
                break
            ra = a[i]
        if rb <= 1e-15:
            j += 1
            if j == n:
                break
            rb = b[j]
    return cost


def positive_map(r, shape=(3, 4)):
    return r.uniform(0.2, 1.5, shape)


def scene_target(r, n=6, size=32):
    pts = np.column_stack([r.uniform(0, size, n), r.uniform(0, size, n)])
    return Target.from_points(PointSet(pts, size, size))


# ---- count L1 -----------------------------------------------------------------

def test_count_l1_values():
    assert float(count_l1(Tensor(np.full((2, 5), 1.0)), 10).data) == 0.0
    assert float(count_l1(Tensor(np.full((1, 7), 1.0)), 10).data) == 3.0


def test_count_l1_grad_is_sign(rng):
    p = Tensor(rng.uniform(0, 1, (3, 3)), requires_grad=True)
    count_l1(p, 100.0).backward()
    np.testing.assert_array_equal(p.grad, -1.0)


@pytest.mark.parametrize("seed", SEEDS)
def test_count_l1_fd(seed):
    r = np.random.default_rng(seed)
    g = float(r.uniform(0, 20)) + 0.37
    assert gradcheck(lambda p: count_l1(p, g), r.uniform(0, 2, (3, 4))) < 1e-4


# ---- smooth L1 ----------------------------------------------------------------

def test_smooth_l1_values():
    assert float(smooth_l1(Tensor(4.0), 4.0).data) == 0.0
    assert float(smooth_l1(Tensor(4.5), 4.0).data) == pytest.approx(0.125)
    assert float(smooth_l1(Tensor(1.0), 4.0).data) == pytest.approx(2.5)
    # continuous at the seam
    assert float(smooth_l1(Tensor(2.0), 0.0, beta=2.0).data) == pytest.approx(1.0)
    assert float(smooth_l1(Tensor(2.0 - 1e-9), 0.0, beta=2.0).data) == pytest.approx(1.0)


@pytest.mark.parametrize("seed", SEEDS)
def test_smooth_l1_fd(seed):
    r = np.random.default_rng(seed)
    beta = float(r.uniform(0.5, 2.0))
    g = float(r.uniform(-3, 3))
    gap = float(r.choice([0.3, 2.5])) * beta * float(r.choice([-1, 1]))
    assert gradcheck(lambda p: smooth_l1(p, g, beta), g + gap) < 1e-4


# ---- L2 -----------------------------------------------------------------------

def test_l2_values(rng):
    g = rng.uniform(0, 1, (4, 4))
    assert float(l2_density(Tensor(g), g).data) == 0.0
    assert float(l2_density(Tensor(g + 1), g).data) == pytest.approx(1.0)


def test_l2_grad_formula(rng):
    p, g = rng.standard_normal((3, 5)), rng.standard_normal((3, 5))
    t = Tensor(p, requires_grad=True)
    l2_density(t, g).backward()
    np.testing.assert_allclose(t.grad, 2 * (p - g) / p.size, atol=1e-15)


@pytest.mark.parametrize("seed", SEEDS)
def test_l2_fd(seed):
    r = np.random.default_rng(seed)
    g = r.standard_normal((4, 3))
    assert gradcheck(lambda p: l2_density(p, g), r.standard_normal((4, 3))) < 1e-4


# ---- TV -----------------------------------------------------------------------

def test_tv_values(rng):
    g = rng.uniform(0.1, 1, (4, 4))
    assert float(tv_loss(Tensor(g), g).data) == pytest.approx(0.0, abs=1e-12)
    assert float(tv_loss(Tensor(5 * g), g).data) == pytest.approx(0.0, abs=1e-12)
    a, b = np.zeros((2, 2)), np.zeros((2, 2))
    a[0, 0], b[1, 1] = 1.0, 1.0
    assert float(tv_loss(Tensor(a), b).data) == pytest.approx(1.0)


def test_tv_scale_invariance(rng):
    p, g = rng.uniform(0.1, 1, (4, 4)), rng.uniform(0.1, 1, (4, 4))
    base = float(tv_loss(Tensor(p), g).data)
    assert float(tv_loss(Tensor(3.7 * p), g).data) == pytest.approx(base, rel=1e-12)
    # scaling the target rescales by the count factor only
    assert float(tv_loss(Tensor(p), 2 * g).data) == pytest.approx(2 * base, rel=1e-12)


def test_tv_degenerate():
    with pytest.raises(DegenerateInputError):
        tv_loss(Tensor(np.zeros((2, 2))), np.ones((2, 2)))


@pytest.mark.parametrize("seed", SEEDS)
def test_tv_fd(seed):
    r = np.random.default_rng(seed)
    g, p = positive_map(r), positive_map(r)
    while np.abs(p / p.sum() - g / g.sum()).min() < 1e-3:  # stay off the |.| kink
        p = positive_map(r)
    assert gradcheck(lambda q: tv_loss(q, g), p) < 1e-4


# ---- Sinkhorn OT --------------------------------------------------------------

def test_identical_point_masses_cost_zero():
    a = np.zeros((4, 4))
    a[2, 1] = 3.0
    assert abs(float(sinkhorn_ot(a, a).data)) <= 1e-8


def test_one_dimensional_two_mass_case():
    n = 9
    a, b = np.zeros((1, n)), np.zeros((1, n))
    a[0, [1, 6]] = 1.0
    b[0, [3, 4]] = 1.0
    res = sinkhorn(a, b, eps=1e-3, iters=3000, tol=1e-9)
    exact = exact_ot_1d(a[0], b[0], n)
    assert exact == pytest.approx(0.5 * (4 + 4) / 82)
    assert float(res.cost.data) == pytest.approx(exact, abs=1e-3)


@pytest.mark.parametrize("seed", range(10))
def test_one_dimensional_random_strips(seed):
    r = np.random.default_rng(seed)
    n = 12
    a = r.uniform(0, 1, n) * (r.random(n) < 0.6)
    b = r.uniform(0, 1, n) * (r.random(n) < 0.6)
    a[r.integers(n)] += 0.5
    b[r.integers(n)] += 0.5
    res = sinkhorn(a.reshape(1, 1, 1, n), b.reshape(1, 1, 1, n), eps=1e-3, iters=3000, tol=1e-9)
    assert float(res.cost.data) == pytest.approx(exact_ot_1d(a, b, n), abs=1e-3)


def test_plan_marginals_at_convergence(rng):
    a, b = positive_map(rng, (5, 5)), positive_map(rng, (5, 5))
    res = sinkhorn(a, b, eps=0.01, iters=500, tol=1e-7)
    assert res.marginal_violation <= 1e-5
    assert np.abs(res.plan.sum(1) - res.a).sum() <= 1e-5
    assert np.abs(res.plan.sum(0) - res.b).sum() <= 1e-5


def test_sinkhorn_symmetric(rng):
    a, b = positive_map(rng, (4, 5)), positive_map(rng, (4, 5))
    ab = float(sinkhorn_ot(a, b, iters=500, tol=1e-10).data)
    ba = float(sinkhorn_ot(b, a, iters=500, tol=1e-10).data)
    assert ab == pytest.approx(ba, abs=1e-6)


def test_sinkhorn_monotone_as_mass_slides_closer():
    g = np.zeros((1, 16))
    g[0, 15] = 1.0
    costs = []
    for pos in range(0, 16, 3):
        p = np.zeros((1, 16))
        p[0, pos] = 1.0
        costs.append(float(sinkhorn_ot(p, g).data))
    assert all(x >= y for x, y in zip(costs, costs[1:]))
    assert costs[-1] < costs[0]


def test_sinkhorn_degenerate_input():
    with pytest.raises(DegenerateInputError):
        sinkhorn_ot(np.zeros((2, 2)), np.ones((2, 2)))


@pytest.mark.parametrize("seed", SEEDS)
def test_sinkhorn_fd(seed):
    r = np.random.default_rng(seed)
    g = positive_map(r)
    g[r.random(g.shape) < 0.3] = 0.0
    g[0, 0] = 1.0
    assert gradcheck(lambda p: sinkhorn_ot(p, g, eps=0.05, iters=40, tol=0.0), positive_map(r)) < 1e-4


# ---- composites ---------------------------------------------------------------

def test_full_loss_at_its_minimizer(rng):
    t = scene_target(rng, n=8)
    rep = loss_full(Tensor(t.smooth.copy()), t, LossWeights())
    assert rep.components["count"] <= 1e-3 and rep.components["l2"] == 0.0
    bound = rep.extras["ot_bias_bound"]
    assert bound == pytest.approx(0.01 * np.log(np.count_nonzero(t.smooth) * np.count_nonzero(t.dot)))
    # what remains is the small transport between the smoothed and dot maps
    assert float(rep.total.data) <= 1e-3 + 0.01 * (rep.components["ot"])
    assert rep.components["ot"] < 0.05


def test_full_loss_weights_degenerate(rng):
    t = scene_target(rng)
    p = Tensor(rng.uniform(0, 0.1, t.dot.shape))
    rep = loss_full(p, t, LossWeights(lambda1=0.0, lambda2=0.0))
    assert float(rep.total.data) == pytest.approx(float(count_l1(p, t.count).data))


def test_full_loss_recombines_with_defaults(rng):
    t = scene_target(rng)
    rep = loss_full(Tensor(rng.uniform(0, 0.1, t.dot.shape)), t, LossWeights())
    c = rep.components
    assert rep.weights == {"count": 1.0, "ot": 0.01, "l2": 1.0}
    assert float(rep.total.data) == pytest.approx(c["count"] + 0.01 * c["ot"] + 1.0 * c["l2"], abs=1e-6)


def test_dm_loss(rng):
    t = scene_target(rng)
    p = Tensor(rng.uniform(0, 0.1, t.dot.shape))
    rep = loss_dm(p, t, LossWeights(kind="dm"))
    c = rep.components
    assert rep.weights["tv"] == 0.1
    assert float(rep.total.data) == pytest.approx(c["count"] + 0.01 * c["ot"] + 0.1 * c["tv"], abs=1e-6)
    assert loss_dm(Tensor(t.dot * 2), t, LossWeights()).components["tv"] == pytest.approx(0.0, abs=1e-12)
    # shares the count and OT terms with the full objective
    full = loss_full(p, t, LossWeights())
    assert full.components["count"] == c["count"] and full.components["ot"] == c["ot"]


def test_weak_loss(rng):
    p = Tensor(np.full((4, 4), 0.5))
    assert float(loss_weak(p, 8.0, LossWeights()).total.data) == 0.0
    assert float(loss_weak(p, 8.5, LossWeights()).total.data) == pytest.approx(0.125)
    t = Tensor(np.full((4, 4), 0.5), requires_grad=True)
    loss_weak(t, 8.4, LossWeights(smooth_l1_beta=2.0)).total.backward()
    np.testing.assert_allclose(t.grad, (8.0 - 8.4) / 2.0)


def test_zero_count_scene_skips_transport(rng):
    t = Target.from_points(PointSet(np.zeros((0, 2)), 32, 32))
    rep = loss_full(Tensor(rng.uniform(0, 0.1, (4, 4))), t, LossWeights())
    assert rep.components["ot"] == 0.0
    assert float(rep.total.data) == pytest.approx(rep.components["count"] + rep.components["l2"])


@settings(deadline=None, max_examples=25)
@given(st.integers(0, 2**31 - 1), st.sampled_from(["full", "dm", "weak"]))
def test_losses_nonnegative(seed, kind):
    r = np.random.default_rng(seed)
    t = scene_target(r, n=int(r.integers(0, 6)))
    w = LossWeights(kind=kind)
    p = Tensor(r.uniform(0, 0.3, t.dot.shape) * (r.random(t.dot.shape) < 0.7))
    rep = {"full": loss_full, "dm": loss_dm, "weak": loss_weak}[kind](p, t, w)
    assert float(rep.total.data) >= -1e-12
    assert all(v >= -1e-12 for v in rep.components.values())


@pytest.mark.parametrize("seed", SEEDS)
def test_full_loss_fd(seed):
    r = np.random.default_rng(seed)
    t = scene_target(r, n=3, size=24)
    assert gradcheck(lambda p: loss_full(p, t, FIXED).total, positive_map(r, (3, 3))) < 1e-4


@pytest.mark.parametrize("seed", SEEDS)
def test_dm_loss_fd(seed):
    r = np.random.default_rng(seed)
    t = scene_target(r, n=3, size=24)
    w = LossWeights(kind="dm", sinkhorn_tol=0.0, sinkhorn_iters=60)
    assert gradcheck(lambda p: loss_dm(p, t, w).total, positive_map(r, (3, 3))) < 1e-4


@pytest.mark.parametrize("seed", SEEDS)
def test_weak_loss_fd(seed):
    r = np.random.default_rng(seed)
    p = positive_map(r, (3, 3))
    g = float(p.sum()) + float(r.choice([-0.4, 3.0]))
    assert gradcheck(lambda q: loss_weak(q, g, LossWeights()).total, p) < 1e-4


def test_batch_loss_is_mean(rng):
    ts = [scene_target(rng) for _ in range(3)]
    pred = Tensor(rng.uniform(0, 0.1, (3, 1, 4, 4)))
    rep = batch_loss(pred, ts, LossWeights())
    singles = [float(loss_full(pred[i, 0], t, LossWeights()).total.data) for i, t in enumerate(ts)]
    assert float(rep.total.data) == pytest.approx(np.mean(singles))
