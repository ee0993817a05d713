import numpy as np
import pytest

from flowseg import (
    FlowField,
    HardMaskStack,
    MotionModelKind,
    MotionPrior,
    OracleCapacityError,
    SoftMaskStack,
    default_prior,
    lattice,
    model_flow,
    nll,
    nll_affine,
    nll_affine_grad_masks,
    nll_grad_masks,
    nll_oracle,
    nll_simple_mean,
    nll_translation,
    nll_translation_preweight,
    region_stats,
    softmax_masks,
)

from helpers import rand_flow, rand_hard, rand_lattice, rand_prior, rand_soft


def rel_diff(a, b):
    return abs(a - b) / max(1.0, abs(a), abs(b))


# ---------------------------------------------------------------------------
# Oracle equivalence
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("kind,tol", [("affine", 1e-6), ("translation", 1e-9)])
def test_closed_form_matches_oracle(kind, tol):
    rng = np.random.default_rng(101 if kind == "affine" else 202)
    for trial in range(30):
        lat = rand_lattice(rng)
        k = int(rng.integers(1, 5))
        masks = rand_hard(rng, k, lat.n)
        flow = rand_flow(rng, lat)
        prior = default_prior(kind) if trial % 2 == 0 else rand_prior(rng, kind)
        fast = nll(flow, masks, lat, prior)
        slow = nll_oracle(flow, masks, lat, prior)
        assert rel_diff(fast, slow) <= tol


def test_oracle_rejects_oversized_regions():
    lat = lattice(50, 50)
    masks = HardMaskStack(np.zeros(lat.n, dtype=np.int64), k=1)
    flow = rand_flow(np.random.default_rng(0), lat)
    with pytest.raises(OracleCapacityError):
        nll_oracle(flow, masks, lat, default_prior("affine"))


def test_oracle_requires_hard_masks():
    lat = lattice(4, 4)
    rng = np.random.default_rng(0)
    with pytest.raises(TypeError):
        nll_oracle(rand_flow(rng, lat), rand_soft(rng, 2, lat.n), lat,
                   default_prior("affine"))


# ---------------------------------------------------------------------------
# Dual translation form
# ---------------------------------------------------------------------------


def test_translation_dual_form_identity_on_hard_masks():
    rng = np.random.default_rng(5)
    for _ in range(100):
        lat = rand_lattice(rng, 4, 12)
        masks = rand_hard(rng, int(rng.integers(1, 5)), lat.n)
        flow = rand_flow(rng, lat)
        prior = rand_prior(rng, "translation")
        soft = SoftMaskStack(masks.weights())
        a = nll_translation(flow, soft, lat, prior)
        b = nll_translation_preweight(flow, soft, lat, prior)
        assert rel_diff(a, b) <= 1e-9


# ---------------------------------------------------------------------------
# Structural invariants
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("kind", ["affine", "translation"])
def test_appending_empty_region_is_neutral(kind):
    rng = np.random.default_rng(17)
    lat = lattice(8, 9)
    flow = rand_flow(rng, lat)
    prior = rand_prior(rng, kind)
    soft = rand_soft(rng, 3, lat.n)
    padded = SoftMaskStack(np.vstack([soft.weights, np.zeros(lat.n)]))
    base = nll(flow, soft, lat, prior)
    assert rel_diff(base, nll(flow, padded, lat, prior)) <= 1e-12

    hard = rand_hard(rng, 3, lat.n)
    hard_padded = HardMaskStack(hard.labels, k=4)
    base = nll(flow, hard, lat, prior)
    assert rel_diff(base, nll(flow, hard_padded, lat, prior)) <= 1e-12


@pytest.mark.parametrize("kind", ["affine", "translation"])
def test_label_permutation_invariance(kind):
    rng = np.random.default_rng(23)
    lat = lattice(7, 11)
    flow = rand_flow(rng, lat)
    prior = rand_prior(rng, kind)
    soft = rand_soft(rng, 4, lat.n)
    base = nll(flow, soft, lat, prior)
    for _ in range(5):
        perm = rng.permutation(4)
        shuffled = SoftMaskStack(soft.weights[perm])
        assert rel_diff(base, nll(flow, shuffled, lat, prior)) <= 1e-11


def test_centered_flow_sufficiency_affine():
    # The NLL reads the flow only through the residual against the prior-mean
    # motion at region-centered coordinates, so moving the linear part of mu
    # while shifting the flow by the same motion (evaluated at each region's
    # centered coordinates) must not change the value.
    rng = np.random.default_rng(31)
    lat = lattice(10, 12)
    flow = rand_flow(rng, lat)
    masks = rand_hard(rng, 3, lat.n)
    prior = rand_prior(rng, "affine")
    mu2 = prior.mu + rng.normal(0.0, 0.3, 6)
    prior2 = MotionPrior(prior.kind, mu2, prior.cov, prior.noise_var)

    u2 = flow.u.copy()
    v2 = flow.v.copy()
    w = masks.weights()
    d = mu2 - prior.mu
    for k in range(masks.k):
        wk = w[k]
        nk = wk.sum()
        if nk == 0:
            continue
        xc = wk @ lat.x / nk
        yc = wk @ lat.y / nk
        xh = (lat.x - xc)[wk > 0]
        yh = (lat.y - yc)[wk > 0]
        u2[wk > 0] += d[0] * xh + d[1] * yh + d[2]
        v2[wk > 0] += d[3] * xh + d[4] * yh + d[5]
    flow2 = FlowField(u2, v2, lat)
    a = nll_affine(flow, masks, lat, prior)
    b = nll_affine(flow2, masks, lat, prior2)
    assert rel_diff(a, b) <= 1e-10


def test_centered_flow_sufficiency_translation():
    rng = np.random.default_rng(37)
    lat = lattice(9, 9)
    flow = rand_flow(rng, lat)
    masks = rand_hard(rng, 3, lat.n)
    prior = rand_prior(rng, "translation")
    mu2 = prior.mu + rng.normal(0.0, 2.0, 2)
    prior2 = MotionPrior(prior.kind, mu2, prior.cov, prior.noise_var)
    d = mu2 - prior.mu
    flow2 = FlowField(flow.u + d[0], flow.v + d[1], lat)
    a = nll_translation(flow, masks, lat, prior)
    b = nll_translation(flow2, masks, lat, prior2)
    assert rel_diff(a, b) <= 1e-10


def test_log_det_penalty_grows_with_prior_variance():
    # On a flow exactly at the prior mean the quadratic term is zero, so the
    # NLL differences across tau^2 isolate the log-det penalty
    # sum_k log(1 + n_k tau^2 / sigma^2), which strictly increases in tau^2:
    # a wider prior spreads the marginal thinner over the observed flow.
    rng = np.random.default_rng(41)
    lat = lattice(8, 8)
    masks = rand_hard(rng, 3, lat.n)
    mu = np.array([1.5, -0.5])
    flow = model_flow(mu, lat, MotionModelKind.TRANSLATION)
    values = []
    for tau2 in (0.1, 0.5, 1.0, 5.0, 20.0):
        prior = MotionPrior(
            MotionModelKind.TRANSLATION, mu, tau2 * np.eye(2), 0.5
        )
        values.append(nll_translation(flow, masks, lat, prior))
    assert all(a < b for a, b in zip(values, values[1:]))


def test_soft_masks_converge_to_hard_value():
    rng = np.random.default_rng(43)
    lat = lattice(6, 6)
    flow = rand_flow(rng, lat)
    prior = default_prior("affine")
    logits = rng.normal(0.0, 2.0, (3, lat.n))
    hard = HardMaskStack(np.argmax(logits, axis=0).astype(np.int64), k=3)
    target = nll_affine(flow, hard, lat, prior)
    gaps = []
    for temp in (1.0, 0.1, 0.01):
        soft = softmax_masks(logits / temp)
        gaps.append(abs(nll_affine(flow, soft, lat, prior) - target))
    assert gaps[0] > gaps[1] > gaps[2]
    assert gaps[2] <= 1e-3 * max(1.0, abs(target))


# ---------------------------------------------------------------------------
# Gradients and baselines
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("kind", ["affine", "translation"])
def test_mask_gradient_matches_finite_differences(kind):
    rng = np.random.default_rng(47)
    lat = lattice(5, 5)
    flow = rand_flow(rng, lat)
    prior = rand_prior(rng, kind)
    soft = rand_soft(rng, 3, lat.n)
    value, grad = nll_grad_masks(flow, soft, lat, prior)
    assert value == pytest.approx(nll(flow, soft, lat, prior), rel=1e-12)
    h = 1e-6
    w = soft.weights
    for _ in range(15):
        i = int(rng.integers(0, w.shape[0]))
        j = int(rng.integers(0, w.shape[1]))
        wp = w.copy()
        wm = w.copy()
        wp[i, j] += h
        wm[i, j] -= h
        fp = nll(flow, SoftMaskStack(wp, validate=False), lat, prior)
        fm = nll(flow, SoftMaskStack(wm, validate=False), lat, prior)
        fd = (fp - fm) / (2.0 * h)
        assert grad[i, j] == pytest.approx(fd, rel=1e-4, abs=1e-6)


def test_simple_mean_baseline_matches_direct_computation():
    # The baseline residual subtracts the per-pixel blend of region means
    # sum_k ubar_k m_ki, not each region's own mean.
    rng = np.random.default_rng(53)
    lat = lattice(6, 7)
    flow = rand_flow(rng, lat)
    soft = rand_soft(rng, 3, lat.n)
    sigma2 = 0.7
    w = soft.weights
    nk = w.sum(axis=1)
    ub = w @ flow.u / nk
    vb = w @ flow.v / nk
    ru = flow.u - ub @ w
    rv = flow.v - vb @ w
    expect = lat.n * np.log(2 * np.pi * sigma2) + (ru @ ru + rv @ rv) / (2 * sigma2)
    got = nll_simple_mean(flow, soft, sigma2)
    assert got == pytest.approx(expect, rel=1e-10)


def test_simple_mean_zero_quadratic_cases():
    lat = lattice(6, 6)
    labels = (lat.x >= 3).astype(np.int64)
    masks = HardMaskStack(labels, k=2)
    u = np.where(labels == 0, 2.0, -1.0)
    v = np.where(labels == 0, 0.5, 3.0)
    flow = FlowField(u, v, lat)
    sigma2 = 0.5
    assert nll_simple_mean(flow, masks, sigma2) == pytest.approx(
        lat.n * np.log(2 * np.pi * sigma2), rel=1e-12
    )
    one = HardMaskStack(np.zeros(lat.n, dtype=np.int64), k=1)
    const = FlowField(np.full(lat.n, 4.2), np.full(lat.n, -1.3), lat)
    assert nll_simple_mean(const, one, sigma2) == pytest.approx(
        lat.n * np.log(2 * np.pi * sigma2), rel=1e-12
    )


def test_simple_mean_is_translation_limit_of_weak_prior():
    rng = np.random.default_rng(67)
    lat = lattice(7, 7)
    flow = rand_flow(rng, lat)
    masks = rand_hard(rng, 3, lat.n)
    sigma2 = 0.5
    base = nll_simple_mean(flow, masks, sigma2)
    nk = masks.weights().sum(axis=1)
    gaps = []
    for tau2 in (1e4, 1e8):
        prior = MotionPrior(
            MotionModelKind.TRANSLATION, np.zeros(2), tau2 * np.eye(2), sigma2
        )
        log_det = np.log1p(nk / (sigma2 / tau2)).sum()
        gaps.append(abs(nll_translation(flow, masks, lat, prior) - log_det - base))
    assert gaps[1] < gaps[0]
    assert gaps[1] <= 1e-3


def test_region_stats_match_plain_moments():
    rng = np.random.default_rng(59)
    lat = lattice(8, 8)
    flow = rand_flow(rng, lat)
    prior = default_prior("translation")
    w = (rng.random(lat.n) < 0.4).astype(np.float64)
    stats = region_stats(flow, w, lat, prior)
    nk = w.sum()
    assert stats.n_k == pytest.approx(nk)
    assert stats.centroid[0] == pytest.approx(w @ lat.x / nk)
    assert stats.centroid[1] == pytest.approx(w @ lat.y / nk)


def test_nll_rejects_raw_arrays():
    lat = lattice(4, 4)
    flow = rand_flow(np.random.default_rng(0), lat)
    with pytest.raises(TypeError):
        nll(flow, np.full((2, lat.n), 0.5), lat, default_prior("affine"))


def test_affine_grad_value_agrees_with_nll():
    rng = np.random.default_rng(61)
    lat = lattice(6, 6)
    flow = rand_flow(rng, lat)
    soft = rand_soft(rng, 4, lat.n)
    prior = rand_prior(rng, "affine")
    value, grad = nll_affine_grad_masks(flow, soft, lat, prior)
    assert grad.shape == soft.weights.shape
    assert value == pytest.approx(nll_affine(flow, soft, lat, prior), rel=1e-12)
