"""Parametric 2D motion models and their Gaussian priors.

Two model families: translation (2 parameters) and affine (6 parameters,
laid out as x' = t1*x + t2*y + t3, y' = t4*x + t5*y + t6). The affine
no-motion point is (1, 0, 0, 0, 1, 0). Includes ordinary least-squares
fitting of theta to a region's flow and a data-driven estimator for the
prior covariance built from flow discontinuities.
"""

import enum
import json
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy import ndimage

from .core import FlowField, Lattice
from .errors import EstimationFailedError, RankDeficiencyError


class MotionModelKind(enum.Enum):
    TRANSLATION = "translation"
    AFFINE = "affine"

    @property
    def d(self):
        return 2 if self is MotionModelKind.TRANSLATION else 6

    @classmethod
    def parse(cls, name):
        try:
            return cls(str(name).lower())
        except ValueError:
            raise ValueError("unknown motion model kind %r" % (name,)) from None


NO_MOTION_AFFINE = np.array([1.0, 0.0, 0.0, 0.0, 1.0, 0.0])
NO_MOTION_TRANSLATION = np.zeros(2)


def no_motion(kind):
    """The parameter vector whose induced flow is identically zero."""
    if kind is MotionModelKind.TRANSLATION:
        return NO_MOTION_TRANSLATION.copy()
    return NO_MOTION_AFFINE.copy()


@dataclass(frozen=True)
class MotionPrior:
    """Gaussian prior over motion parameters plus the residual noise variance.

    cov must be symmetric positive-definite; for the translation kind it must
    be isotropic (tau^2 * I), matching the closed-form likelihood.
    """

    kind: MotionModelKind
    mu: np.ndarray
    cov: np.ndarray
    noise_var: float

    def __post_init__(self):
        d = self.kind.d
        mu = np.ascontiguousarray(self.mu, dtype=np.float64)
        cov = np.ascontiguousarray(self.cov, dtype=np.float64)
        if mu.shape != (d,):
            raise ValueError("mu must have length %d for %s" % (d, self.kind.value))
        if cov.shape != (d, d):
            raise ValueError("cov must be %dx%d for %s" % (d, d, self.kind.value))
        if np.abs(cov - cov.T).max() > 1e-12:
            raise ValueError("cov must be symmetric within 1e-12")
        if not self.noise_var > 0:
            raise ValueError("noise_var must be positive")
        try:
            np.linalg.cholesky(cov)
        except np.linalg.LinAlgError:
            raise ValueError("cov must be positive-definite") from None
        if self.kind is MotionModelKind.TRANSLATION:
            if abs(cov[0, 1]) > 1e-12 or abs(cov[0, 0] - cov[1, 1]) > 1e-12:
                raise ValueError("translation cov must be isotropic tau^2 * I")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "cov", cov)
        object.__setattr__(self, "noise_var", float(self.noise_var))

    @cached_property
    def precision(self):
        return np.linalg.inv(self.cov)

    @cached_property
    def log_det_cov(self):
        chol = np.linalg.cholesky(self.cov)
        return 2.0 * float(np.log(np.diag(chol)).sum())

    @property
    def tau2(self):
        if self.kind is not MotionModelKind.TRANSLATION:
            raise ValueError("tau2 is defined for the translation kind only")
        return float(self.cov[0, 0])


DEFAULT_AFFINE_COV = np.diag([0.005, 0.05, 15.0, 0.05, 0.005, 15.0])
DEFAULT_NOISE_VAR = 0.5
DEFAULT_TAU2 = 0.5


def default_prior(kind):
    """Default prior: centered on the no-motion point with stock covariance."""
    kind = MotionModelKind(kind)
    if kind is MotionModelKind.TRANSLATION:
        return MotionPrior(
            kind, NO_MOTION_TRANSLATION.copy(), DEFAULT_TAU2 * np.eye(2), DEFAULT_NOISE_VAR
        )
    return MotionPrior(
        kind, NO_MOTION_AFFINE.copy(), DEFAULT_AFFINE_COV.copy(), DEFAULT_NOISE_VAR
    )


def _coords(lattice_or_coords):
    if isinstance(lattice_or_coords, Lattice):
        return lattice_or_coords.x, lattice_or_coords.y
    x, y = lattice_or_coords
    return np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)


def apply_motion(theta, lattice_or_coords, kind):
    """Displace coordinates by the parametric motion map; returns (x', y')."""
    theta = np.asarray(theta, dtype=np.float64)
    if theta.shape != (kind.d,):
        raise ValueError("theta must have length %d for %s" % (kind.d, kind.value))
    x, y = _coords(lattice_or_coords)
    if kind is MotionModelKind.TRANSLATION:
        return x + theta[0], y + theta[1]
    xn = theta[0] * x + theta[1] * y + theta[2]
    yn = theta[3] * x + theta[4] * y + theta[5]
    return xn, yn


def model_flow(theta, lat, kind):
    """Noiseless flow induced by theta on the whole lattice."""
    xn, yn = apply_motion(theta, lat, kind)
    return FlowField(xn - lat.x, yn - lat.y, lat)


def least_squares_theta(flow, region_mask, lat, kind):
    """Ordinary least squares of a region's flow on the motion design matrix.

    region_mask may be boolean or nonnegative weights. Returns (theta_hat,
    residual_rms) with residual_rms the per-component RMS over the region.
    Raises RankDeficiencyError when the normal matrix is singular.
    """
    w = np.asarray(region_mask, dtype=np.float64)
    if w.shape != (lat.n,):
        raise ValueError("region_mask must be a flat length-%d vector" % lat.n)
    nk = w.sum()
    if nk <= 0:
        raise RankDeficiencyError("empty region")
    u, v, x, y = flow.u, flow.v, lat.x, lat.y

    if kind is MotionModelKind.TRANSLATION:
        t1 = float(w @ u / nk)
        t2 = float(w @ v / nk)
        sse = float(w @ (u - t1) ** 2 + w @ (v - t2) ** 2)
        return np.array([t1, t2]), float(np.sqrt(sse / (2.0 * nk)))

    xc = float(w @ x / nk)
    yc = float(w @ y / nk)
    xh = x - xc
    yh = y - yc
    sxx = float(w @ (xh * xh))
    sxy = float(w @ (xh * yh))
    syy = float(w @ (yh * yh))
    det2 = sxx * syy - sxy * sxy
    if det2 <= 1e-12 * max(sxx * syy, 1.0):
        raise RankDeficiencyError(
            "degenerate coordinate spread (normal matrix singular)"
        )

    theta = np.empty(6)
    sse = 0.0
    # Solve each flow row against targets u + x = t1*x + t2*y + t3 (same for v)
    # in centered coordinates, where the 3x3 normal matrix is block diagonal.
    for row, t in enumerate((u + x, v + y)):
        tbar = float(w @ t / nk)
        th = t - tbar
        b1 = float(w @ (th * xh))
        b2 = float(w @ (th * yh))
        a = (syy * b1 - sxy * b2) / det2
        b = (sxx * b2 - sxy * b1) / det2
        theta[3 * row] = a
        theta[3 * row + 1] = b
        theta[3 * row + 2] = tbar - a * xc - b * yc
        resid = th - a * xh - b * yh
        sse += float(w @ (resid * resid))
    return theta, float(np.sqrt(sse / (2.0 * nk)))


FOUR_CONNECTED = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)
EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)


@dataclass(frozen=True)
class CovarianceEstimationConfig:
    """Knobs for the flow-discontinuity covariance estimation recipe."""

    fg_threshold: float = 0.25
    edge_percentile: float = 90.0
    min_region_pixels: int = 100
    residual_percentile: float = 90.0
    connectivity: int = 4
    spd_epsilon: float = 1e-6

    @property
    def structure(self):
        return FOUR_CONNECTED if self.connectivity == 4 else EIGHT_CONNECTED


def _candidate_thetas(flow, lat, kind, config):
    """Per-component least-squares estimates from one flow field."""
    h, w = lat.height, lat.width
    mag = np.hypot(flow.u, flow.v).reshape(h, w)
    fg = mag > config.fg_threshold
    if not fg.any():
        return []
    gx = ndimage.sobel(mag, axis=1)
    gy = ndimage.sobel(mag, axis=0)
    edge = np.hypot(gx, gy)
    cut = np.percentile(edge[fg], config.edge_percentile)
    cand = fg & ~(edge > cut)
    labels, count = ndimage.label(cand, structure=config.structure)
    out = []
    flat = labels.ravel()
    for comp in range(1, count + 1):
        mask = flat == comp
        if mask.sum() <= config.min_region_pixels:
            continue
        try:
            theta, rms = least_squares_theta(flow, mask.astype(np.float64), lat, kind)
        except RankDeficiencyError:
            continue
        out.append((theta, rms))
    return out


def estimate_prior_covariance(sequences, kind, config=None):
    """Estimate the prior covariance from flow discontinuities.

    Flow edges (Sobel) split the moving foreground into candidate regions;
    each sufficiently large region contributes a least-squares theta, the
    worst-residual tail is dropped, and the sample covariance is taken over
    the kept estimates plus one no-motion value per processed flow field
    (accounting for stationary content). The result is symmetrized and given
    a small diagonal boost so Cholesky always succeeds.

    sequences: iterable whose elements either expose .forward_flows and
    .lattice or are themselves iterables of FlowField.
    """
    if config is None:
        config = CovarianceEstimationConfig()
    kind = MotionModelKind(kind)
    estimates = []
    n_fields = 0
    for seq in sequences:
        flows = seq.forward_flows if hasattr(seq, "forward_flows") else list(seq)
        for flow in flows:
            n_fields += 1
            estimates.extend(_candidate_thetas(flow, flow.lattice, kind, config))
    if not estimates:
        raise EstimationFailedError(
            "no candidate regions larger than %d pixels" % config.min_region_pixels
        )
    rms = np.array([r for _, r in estimates])
    cut = np.percentile(rms, config.residual_percentile)
    kept = [theta for (theta, r) in estimates if r <= cut]
    if not kept:
        raise EstimationFailedError("all candidate regions exceeded the residual cut")
    rest = no_motion(kind)
    samples = np.vstack(kept + [rest] * n_fields)
    cov = np.cov(samples, rowvar=False, ddof=1)
    cov = np.atleast_2d(cov)
    if kind is MotionModelKind.TRANSLATION:
        cov = (np.trace(cov) / 2.0) * np.eye(2)
    cov = 0.5 * (cov + cov.T) + config.spd_epsilon * np.eye(kind.d)
    return MotionPrior(kind, no_motion(kind), cov, DEFAULT_NOISE_VAR)


def prior_to_json(prior):
    """Serialize a MotionPrior to the interchange dict."""
    return {
        "kind": prior.kind.value,
        "mu": prior.mu.tolist(),
        "cov": prior.cov.tolist(),
        "noise_var": prior.noise_var,
    }


def prior_from_json(doc):
    """Parse the interchange dict (row-major cov) back into a MotionPrior."""
    try:
        kind = MotionModelKind.parse(doc["kind"])
        mu = np.asarray(doc["mu"], dtype=np.float64)
        cov = np.asarray(doc["cov"], dtype=np.float64)
        noise_var = float(doc["noise_var"])
    except (KeyError, TypeError) as exc:
        raise ValueError("malformed prior document: %s" % exc) from None
    return MotionPrior(kind, mu, cov, noise_var)


def save_prior(prior, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(prior_to_json(prior), fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_prior(path):
    with open(path, "r", encoding="utf-8") as fh:
        return prior_from_json(json.load(fh))
