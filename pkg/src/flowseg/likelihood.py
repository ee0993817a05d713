"""Negative log-likelihood of flow under region-wise rigid-motion priors.

The marginal model per region k is N(f_k; mean-motion, P_k Sigma P_k' +
sigma^2 I) with P_k the motion design matrix on the region's pixels. The
efficient forms below reduce every region to a handful of weighted moments:
the 2n_k x 2n_k covariance never materializes. Conventions shared by all
routes (and required for them to agree):

- coordinates are centered on the region's weighted centroid;
- flow is centered by the prior-mean motion evaluated at the centered
  coordinates (for translation the mean motion is constant);
- weighted inner products a'b = sum_i a_i b_i w_i with w the mask slice;
- a region with weight mass below 1e-8 contributes exactly zero.

nll_oracle materializes the dense covariance per region and is the ground
truth the closed forms are tested against; it is O(n_k^3) per region and
guarded to small regions.
"""

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

from .core import HardMaskStack, SoftMaskStack
from .errors import IllConditionedError, OracleCapacityError
from .motion import MotionModelKind

EMPTY_REGION_MASS = 1e-8
ORACLE_MAX_REGION = 2000


@dataclass(frozen=True)
class RegionStats:
    """Weighted sufficient statistics of one region.

    gram is the 3x3 centered coordinate moment matrix [[x'x, x'y, x'1],
    [x'y, y'y, y'1], [x'1, y'1, n]]; with exact centering the off-corner
    entries are zero and gram[2][2] = n_k. h and r hold the centered flow
    against (x_hat, y_hat, 1) for the u and v components; ff = F'F.
    """

    n_k: float
    centroid: tuple
    gram: np.ndarray
    h: np.ndarray
    r: np.ndarray
    ff: float


@dataclass(frozen=True)
class RegionLikelihoodParts:
    """Per-region pieces of the NLL: n_k log(2 pi sigma^2) + log_det_ratio/2
    + quad/(2 sigma^2), where quad = F'F minus the prior-weighted correction."""

    log_det_ratio: float
    quad: float
    nll: float


def _weights_of(masks):
    if isinstance(masks, HardMaskStack):
        return masks.weights()
    if isinstance(masks, SoftMaskStack):
        return masks.weights
    raise TypeError("masks must be a SoftMaskStack or HardMaskStack")


def _centered_flow_residual(flow, lat, prior):
    """Flow minus the prior-mean motion at raw coordinates.

    Adding back the per-region centroid shift (cu, cv) converts these to the
    residuals at centered coordinates, which is done moment-side.
    """
    mu = prior.mu
    if prior.kind is MotionModelKind.TRANSLATION:
        return flow.u - mu[0], flow.v - mu[1]
    ut = flow.u - ((mu[0] - 1.0) * lat.x + mu[1] * lat.y + mu[2])
    vt = flow.v - (mu[3] * lat.x + (mu[4] - 1.0) * lat.y + mu[5])
    return ut, vt


def _feature_matrix(flow, lat, prior):
    """(n, 13) per-pixel features whose weighted sums are all raw moments."""
    x, y = lat.x, lat.y
    ut, vt = _centered_flow_residual(flow, lat, prior)
    cols = (
        np.ones(lat.n),
        x,
        y,
        x * x,
        x * y,
        y * y,
        ut,
        ut * x,
        ut * y,
        vt,
        vt * x,
        vt * y,
        ut * ut + vt * vt,
    )
    return np.stack(cols, axis=1)


def _raw_moments(flow, weights, lat, prior):
    return weights @ _feature_matrix(flow, lat, prior)


def _centered_from_raw(moments, prior):
    """Convert (K, 13) raw moments into the centered per-region quantities.

    Returns a dict of (K,)-shaped arrays plus (K, 3) h/r and (K, 3, 3) gram.
    """
    s0, sx, sy, sxx, sxy, syy, su, sux, suy, sv, svx, svy, sff = moments.T
    active = s0 >= EMPTY_REGION_MASS
    s0s = np.where(active, s0, 1.0)
    xc = sx / s0s
    yc = sy / s0s
    mu = prior.mu
    if prior.kind is MotionModelKind.TRANSLATION:
        ma, mb, mc, md = 0.0, 0.0, 0.0, 0.0
    else:
        ma, mb, mc, md = mu[0] - 1.0, mu[1], mu[3], mu[4] - 1.0
    cu = ma * xc + mb * yc
    cv = mc * xc + md * yc
    vxx = sxx - sx * xc
    vxy = sxy - sx * yc
    vyy = syy - sy * yc
    k = moments.shape[0]
    gram = np.zeros((k, 3, 3))
    gram[:, 0, 0] = vxx
    gram[:, 0, 1] = gram[:, 1, 0] = vxy
    gram[:, 1, 1] = vyy
    gram[:, 2, 2] = s0
    h = np.stack([sux - xc * su, suy - yc * su, su + s0 * cu], axis=1)
    r = np.stack([svx - xc * sv, svy - yc * sv, sv + s0 * cv], axis=1)
    ff = sff + 2.0 * cu * su + 2.0 * cv * sv + (cu * cu + cv * cv) * s0
    return {
        "active": active, "s0": s0, "s0s": s0s, "xc": xc, "yc": yc,
        "cu": cu, "cv": cv, "gram": gram, "h": h, "r": r, "ff": ff,
        "coef": (ma, mb, mc, md),
    }


def region_stats(flow, soft_mask_k, lat, prior):
    """Sufficient statistics of a single region given its mask slice."""
    w = np.asarray(soft_mask_k, dtype=np.float64).reshape(1, -1)
    if w.shape[1] != lat.n:
        raise ValueError("mask slice must be a flat length-%d vector" % lat.n)
    cen = _centered_from_raw(_raw_moments(flow, w, lat, prior), prior)
    if not cen["active"][0]:
        return RegionStats(0.0, (0.0, 0.0), np.zeros((3, 3)), np.zeros(3), np.zeros(3), 0.0)
    return RegionStats(
        float(cen["s0"][0]),
        (float(cen["xc"][0]), float(cen["yc"][0])),
        cen["gram"][0],
        cen["h"][0],
        cen["r"][0],
        float(cen["ff"][0]),
    )


def _det3(m):
    """Determinant of a (..., 3, 3) stack by cofactor expansion."""
    return (
        m[..., 0, 0] * (m[..., 1, 1] * m[..., 2, 2] - m[..., 1, 2] * m[..., 2, 1])
        - m[..., 0, 1] * (m[..., 1, 0] * m[..., 2, 2] - m[..., 1, 2] * m[..., 2, 0])
        + m[..., 0, 2] * (m[..., 1, 0] * m[..., 2, 1] - m[..., 1, 1] * m[..., 2, 0])
    )


def _inv3(m):
    """Closed-form inverse and determinant of a (..., 3, 3) stack.

    Division by the determinant is unguarded; callers must check det > 0.
    """
    det = _det3(m)
    adj = np.empty_like(m)
    adj[..., 0, 0] = m[..., 1, 1] * m[..., 2, 2] - m[..., 1, 2] * m[..., 2, 1]
    adj[..., 0, 1] = m[..., 0, 2] * m[..., 2, 1] - m[..., 0, 1] * m[..., 2, 2]
    adj[..., 0, 2] = m[..., 0, 1] * m[..., 1, 2] - m[..., 0, 2] * m[..., 1, 1]
    adj[..., 1, 0] = m[..., 1, 2] * m[..., 2, 0] - m[..., 1, 0] * m[..., 2, 2]
    adj[..., 1, 1] = m[..., 0, 0] * m[..., 2, 2] - m[..., 0, 2] * m[..., 2, 0]
    adj[..., 1, 2] = m[..., 0, 2] * m[..., 1, 0] - m[..., 0, 0] * m[..., 1, 2]
    adj[..., 2, 0] = m[..., 1, 0] * m[..., 2, 1] - m[..., 1, 1] * m[..., 2, 0]
    adj[..., 2, 1] = m[..., 0, 1] * m[..., 2, 0] - m[..., 0, 0] * m[..., 2, 1]
    adj[..., 2, 2] = m[..., 0, 0] * m[..., 1, 1] - m[..., 0, 1] * m[..., 1, 0]
    safe = np.where(det == 0.0, 1.0, det)
    return adj / safe[..., None, None], det


def _check_spd(active, det_e, det_schur):
    bad = active & ((det_e <= 0.0) | (det_schur <= 0.0))
    if bad.any():
        region = int(np.argmax(bad))
        raise IllConditionedError(
            "region %d produced a numerically non-SPD system" % region, region=region
        )


def _affine_region_terms(cen, prior, with_grad=False):
    """log-det ratios, quadratic pieces, and optionally gradient seeds.

    Works on the centered quantities of _centered_from_raw. The 6x6 system
    S = [[E, beta], [gamma, H]] (E = gram/s^2 + alpha, H = gram/s^2 + delta)
    is handled through its 3x3 blocks: det S = det(E) det(H - gamma E^-1
    beta), and the block inverse [[A, B], [C, D]] gives the quadratic
    correction q = z' S^-1 z for z = (h, r).
    """
    lam = prior.precision
    alpha, beta = lam[:3, :3], lam[:3, 3:]
    gamma, delta = lam[3:, :3], lam[3:, 3:]
    s2 = prior.noise_var
    gram = cen["gram"]
    e_blk = gram / s2 + alpha
    h_blk = gram / s2 + delta
    j_blk, det_e = _inv3(e_blk)
    schur = h_blk - (gamma @ j_blk) @ beta
    d_blk, det_schur = _inv3(schur)
    _check_spd(cen["active"], det_e, det_schur)
    b_blk = -(j_blk @ beta) @ d_blk
    a_blk = j_blk - (b_blk @ gamma) @ j_blk
    h, r = cen["h"], cen["r"]
    g1 = np.einsum("kij,kj->ki", a_blk, h) + np.einsum("kij,kj->ki", b_blk, r)
    # C = B' for symmetric S, so g2 = C h + D r = B' h + D r.
    g2 = np.einsum("kji,kj->ki", b_blk, h) + np.einsum("kij,kj->ki", d_blk, r)
    quad_corr = (h * g1).sum(axis=1) + (r * g2).sum(axis=1)
    log_det_ratio = np.where(
        cen["active"], np.log(np.where(cen["active"], det_e, 1.0))
        + np.log(np.where(cen["active"], det_schur, 1.0)) + prior.log_det_cov, 0.0
    )
    out = {"log_det_ratio": log_det_ratio, "quad_corr": quad_corr}
    if with_grad:
        out["g1"], out["g2"] = g1, g2
        out["trace_blocks"] = a_blk + d_blk
    return out


def _affine_value(flow, weights, lat, prior, with_parts=False):
    moments = _raw_moments(flow, weights, lat, prior)
    cen = _centered_from_raw(moments, prior)
    terms = _affine_region_terms(cen, prior)
    s2 = prior.noise_var
    quad = np.where(cen["active"], cen["ff"] - terms["quad_corr"] / s2, 0.0)
    region = np.where(
        cen["active"], 0.5 * terms["log_det_ratio"] + quad / (2.0 * s2), 0.0
    )
    # The n log(2 pi s^2) term is a constant of the lattice: mask weights sum
    # to one per pixel, so it never depends on how mass is split.
    value = float(lat.n * np.log(2.0 * np.pi * s2) + region.sum())
    if not with_parts:
        return value
    share = cen["s0"] * np.log(2.0 * np.pi * s2)
    parts = [
        RegionLikelihoodParts(float(l), float(q), float(c))
        for l, q, c in zip(terms["log_det_ratio"], quad, share + region)
    ]
    return value, parts


def nll_affine(flow, soft_masks, lat, prior):
    """Negative log-likelihood of the flow under the affine prior."""
    if prior.kind is not MotionModelKind.AFFINE:
        raise ValueError("nll_affine requires an affine prior")
    return _affine_value(flow, _weights_of(soft_masks), lat, prior)


def affine_region_parts(flow, soft_masks, lat, prior):
    """Per-region NLL decomposition under the affine prior."""
    if prior.kind is not MotionModelKind.AFFINE:
        raise ValueError("affine_region_parts requires an affine prior")
    _, parts = _affine_value(flow, _weights_of(soft_masks), lat, prior, with_parts=True)
    return parts


def nll_affine_grad_masks(flow, soft_masks, lat, prior):
    """Value and exact gradient of nll_affine with respect to the mask weights.

    The NLL depends on the weights only through 13 weighted raw moments per
    region, so the gradient is assembled by reverse accumulation through the
    centered quantities and contracted back against the per-pixel features.
    """
    if prior.kind is not MotionModelKind.AFFINE:
        raise ValueError("nll_affine_grad_masks requires an affine prior")
    weights = _weights_of(soft_masks)
    phi = _feature_matrix(flow, lat, prior)
    moments = weights @ phi
    cen = _centered_from_raw(moments, prior)
    terms = _affine_region_terms(cen, prior, with_grad=True)
    s2 = prior.noise_var
    active = cen["active"]
    quad = np.where(active, cen["ff"] - terms["quad_corr"] / s2, 0.0)
    region = np.where(
        active, 0.5 * terms["log_det_ratio"] + quad / (2.0 * s2), 0.0
    )
    value = float(lat.n * np.log(2.0 * np.pi * s2) + region.sum())

    s0, sx, sy = moments[:, 0], moments[:, 1], moments[:, 2]
    su, sv = moments[:, 6], moments[:, 9]
    s0s, xc, yc = cen["s0s"], cen["xc"], cen["yc"]
    cu, cv = cen["cu"], cen["cv"]
    ma, mb, mc, md = cen["coef"]
    g1, g2 = terms["g1"], terms["g2"]

    ff_bar = 1.0 / (2.0 * s2)
    q_bar = -1.0 / (2.0 * s2 * s2)
    # d(log det S)/dM = (A + D)/s^2 and dq/dM = -(g1 g1' + g2 g2')/s^2,
    # entering through both diagonal blocks of S.
    m_bar = 0.5 * terms["trace_blocks"] / s2 + q_bar * (
        -(g1[:, :, None] * g1[:, None, :] + g2[:, :, None] * g2[:, None, :]) / s2
    )
    vxx_bar = m_bar[:, 0, 0]
    vxy_bar = m_bar[:, 0, 1] + m_bar[:, 1, 0]
    vyy_bar = m_bar[:, 1, 1]
    n_bar = m_bar[:, 2, 2]

    h_bar = 2.0 * q_bar * g1
    r_bar = 2.0 * q_bar * g2

    sff_bar = np.full_like(s0, ff_bar)
    cu_bar = ff_bar * (2.0 * su + 2.0 * cu * s0)
    cv_bar = ff_bar * (2.0 * sv + 2.0 * cv * s0)
    su_bar = ff_bar * 2.0 * cu
    sv_bar = ff_bar * 2.0 * cv
    n_bar = n_bar + ff_bar * (cu * cu + cv * cv)

    sux_bar = h_bar[:, 0]
    suy_bar = h_bar[:, 1]
    xc_bar = -h_bar[:, 0] * su
    yc_bar = -h_bar[:, 1] * su
    su_bar = su_bar - h_bar[:, 0] * xc - h_bar[:, 1] * yc + h_bar[:, 2]
    n_bar = n_bar + h_bar[:, 2] * cu
    cu_bar = cu_bar + h_bar[:, 2] * s0

    svx_bar = r_bar[:, 0]
    svy_bar = r_bar[:, 1]
    xc_bar = xc_bar - r_bar[:, 0] * sv
    yc_bar = yc_bar - r_bar[:, 1] * sv
    sv_bar = sv_bar - r_bar[:, 0] * xc - r_bar[:, 1] * yc + r_bar[:, 2]
    n_bar = n_bar + r_bar[:, 2] * cv
    cv_bar = cv_bar + r_bar[:, 2] * s0

    xc_bar = xc_bar + ma * cu_bar + mc * cv_bar
    yc_bar = yc_bar + mb * cu_bar + md * cv_bar

    sxx_bar = vxx_bar
    sxy_bar = vxy_bar
    syy_bar = vyy_bar
    sx_bar = -2.0 * xc * vxx_bar - yc * vxy_bar
    sy_bar = -xc * vxy_bar - 2.0 * yc * vyy_bar
    s0_bar = xc * xc * vxx_bar + xc * yc * vxy_bar + yc * yc * vyy_bar

    sx_bar = sx_bar + xc_bar / s0s
    sy_bar = sy_bar + yc_bar / s0s
    s0_bar = s0_bar - (xc_bar * xc + yc_bar * yc) / s0s
    s0_bar = s0_bar + n_bar

    moment_bars = np.stack(
        [s0_bar, sx_bar, sy_bar, sxx_bar, sxy_bar, syy_bar,
         su_bar, sux_bar, suy_bar, sv_bar, svx_bar, svy_bar, sff_bar],
        axis=1,
    )
    moment_bars[~active] = 0.0
    grad = moment_bars @ phi.T
    return value, grad


def _translation_terms(flow, weights, lat, prior):
    uh, vh = _centered_flow_residual(flow, lat, prior)
    rho = prior.noise_var / prior.tau2
    nk = weights.sum(axis=1)
    su = weights @ uh
    sv = weights @ vh
    active = nk >= EMPTY_REGION_MASS
    nks = np.where(active, nk, 1.0)
    ubar = np.where(active, su / nks, 0.0)
    vbar = np.where(active, sv / nks, 0.0)
    wk = 1.0 - np.sqrt(rho / (nk + rho))
    return uh, vh, rho, nk, nks, active, ubar, vbar, wk


def nll_translation(flow, soft_masks, lat, prior):
    """Closed-form translation NLL in the weighted per-pixel residual form.

    The residual subtracts each region's discounted mean flow ubar_k * w_k
    with w_k = 1 - sqrt(rho/(n_k + rho)), rho = sigma^2/tau^2; for one-hot
    masks this is identical to the moment form (nll_translation_preweight).
    """
    if prior.kind is not MotionModelKind.TRANSLATION:
        raise ValueError("nll_translation requires a translation prior")
    weights = _weights_of(soft_masks)
    uh, vh, rho, nk, _, active, ubar, vbar, wk = _translation_terms(
        flow, weights, lat, prior
    )
    ak = np.where(active, ubar * wk, 0.0)
    bk = np.where(active, vbar * wk, 0.0)
    ru = uh - ak @ weights
    rv = vh - bk @ weights
    s2 = prior.noise_var
    return float(
        lat.n * np.log(2.0 * np.pi * s2)
        + np.log1p(nk / rho).sum()
        + (ru @ ru + rv @ rv) / (2.0 * s2)
    )


def nll_translation_preweight(flow, soft_masks, lat, prior):
    """Translation NLL in the per-region moment form (no residual weights).

    Provably equal to nll_translation for one-hot masks; kept as the second
    route of the dual-form identity check.
    """
    if prior.kind is not MotionModelKind.TRANSLATION:
        raise ValueError("nll_translation_preweight requires a translation prior")
    weights = _weights_of(soft_masks)
    uh, vh, rho, nk, nks, active, ubar, vbar, _ = _translation_terms(
        flow, weights, lat, prior
    )
    s2 = prior.noise_var
    ff = weights @ (uh * uh + vh * vh)
    corr = np.where(active, nk * nk * (ubar * ubar + vbar * vbar) / (nk + rho), 0.0)
    quad = (ff - corr).sum()
    return float(
        lat.n * np.log(2.0 * np.pi * s2) + np.log1p(nk / rho).sum() + quad / (2.0 * s2)
    )


def nll_translation_grad_masks(flow, soft_masks, lat, prior):
    """Value and exact gradient of nll_translation w.r.t. the mask weights."""
    if prior.kind is not MotionModelKind.TRANSLATION:
        raise ValueError("nll_translation_grad_masks requires a translation prior")
    weights = _weights_of(soft_masks)
    uh, vh, rho, nk, nks, active, ubar, vbar, wk = _translation_terms(
        flow, weights, lat, prior
    )
    ak = np.where(active, ubar * wk, 0.0)
    bk = np.where(active, vbar * wk, 0.0)
    ru = uh - ak @ weights
    rv = vh - bk @ weights
    s2 = prior.noise_var
    value = float(
        lat.n * np.log(2.0 * np.pi * s2)
        + np.log1p(nk / rho).sum()
        + (ru @ ru + rv @ rv) / (2.0 * s2)
    )
    pu = weights @ ru
    pv = weights @ rv
    # d a_k / d W_ki = w_k (u_i - ubar_k)/n_k + ubar_k (1 - w_k)/(2 (n_k + rho))
    wn = np.where(active, wk / nks, 0.0)
    cfac = wn - (1.0 - wk) / (2.0 * (nk + rho))
    col = 1.0 / (nk + rho) + (pu * ubar + pv * vbar) * cfac / s2
    grad = col[:, None] - (
        ak[:, None] * ru[None, :]
        + bk[:, None] * rv[None, :]
        + (pu * wn)[:, None] * uh[None, :]
        + (pv * wn)[:, None] * vh[None, :]
    ) / s2
    grad[~active] = 1.0 / rho
    return value, grad


def nll_simple_mean(flow, soft_masks, sigma2):
    """No-prior baseline: Gaussian around each region's plain mean flow."""
    weights = _weights_of(soft_masks)
    nk = weights.sum(axis=1)
    active = nk >= EMPTY_REGION_MASS
    nks = np.where(active, nk, 1.0)
    ubar = np.where(active, (weights @ flow.u) / nks, 0.0)
    vbar = np.where(active, (weights @ flow.v) / nks, 0.0)
    ru = flow.u - ubar @ weights
    rv = flow.v - vbar @ weights
    n = weights.shape[1]
    return float(
        n * np.log(2.0 * np.pi * sigma2) + (ru @ ru + rv @ rv) / (2.0 * sigma2)
    )


def nll(flow, masks, lat, prior):
    """Dispatch to the closed form matching the prior kind."""
    if prior.kind is MotionModelKind.TRANSLATION:
        return nll_translation(flow, masks, lat, prior)
    return nll_affine(flow, masks, lat, prior)


def nll_grad_masks(flow, masks, lat, prior):
    """Dispatch value+gradient to the form matching the prior kind."""
    if prior.kind is MotionModelKind.TRANSLATION:
        return nll_translation_grad_masks(flow, masks, lat, prior)
    return nll_affine_grad_masks(flow, masks, lat, prior)


def _oracle_design(xh, yh, kind):
    nk = xh.shape[0]
    if kind is MotionModelKind.TRANSLATION:
        p = np.zeros((2 * nk, 2))
        p[:nk, 0] = 1.0
        p[nk:, 1] = 1.0
        return p
    g = np.stack([xh, yh, np.ones(nk)], axis=1)
    p = np.zeros((2 * nk, 6))
    p[:nk, :3] = g
    p[nk:, 3:] = g
    return p


def nll_oracle(flow, hard_masks, lat, prior):
    """Brute-force NLL from the explicit 2n_k x 2n_k covariance per region.

    Hard masks only. Shares the centering conventions of the closed forms;
    regions larger than ORACLE_MAX_REGION pixels raise OracleCapacityError.
    """
    if not isinstance(hard_masks, HardMaskStack):
        raise TypeError("nll_oracle requires a HardMaskStack")
    labels = hard_masks.labels
    mu = prior.mu
    total = 0.0
    for k in range(hard_masks.k):
        idx = np.flatnonzero(labels == k)
        nk = idx.size
        if nk == 0:
            continue
        if nk > ORACLE_MAX_REGION:
            raise OracleCapacityError(
                "region %d has %d pixels (oracle cap %d)" % (k, nk, ORACLE_MAX_REGION)
            )
        x = lat.x[idx]
        y = lat.y[idx]
        xh = x - x.mean()
        yh = y - y.mean()
        if prior.kind is MotionModelKind.TRANSLATION:
            uh = flow.u[idx] - mu[0]
            vh = flow.v[idx] - mu[1]
        else:
            uh = flow.u[idx] - ((mu[0] - 1.0) * xh + mu[1] * yh + mu[2])
            vh = flow.v[idx] - (mu[3] * xh + (mu[4] - 1.0) * yh + mu[5])
        p = _oracle_design(xh, yh, prior.kind)
        cov = p @ prior.cov @ p.T + prior.noise_var * np.eye(2 * nk)
        try:
            chol = np.linalg.cholesky(cov)
        except np.linalg.LinAlgError:
            raise IllConditionedError(
                "oracle covariance for region %d is not SPD" % k, region=k
            ) from None
        f = np.concatenate([uh, vh])
        z = solve_triangular(chol, f, lower=True)
        log_det = 2.0 * np.log(np.diag(chol)).sum() + 2 * nk * np.log(2.0 * np.pi)
        total += 0.5 * (log_det + z @ z)
    return float(total)
