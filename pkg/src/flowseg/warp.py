"""Photometric-weighted mask consistency between adjacent frames.

Warping uses the pull convention throughout: the warp of a quantity X by a
flow field f is (f X)(p) = X(p + f(p)), sampled bilinearly with out-of-bounds
queries clamped to the border. A frame pair therefore contributes two terms,
each pulling the partner frame's image and masks onto the segmented frame's
grid through that frame's flow:

    L = w(I1, f1 I2) * d(P1, f1 P2) + w(I2, b2 I1) * d(P2, b2 P1)

with w a per-pixel photometric agreement weight in [0, 1] and d the
symmetrized per-pixel KL between mask distributions, averaged over pixels
after weighting. Pulling masks by the matching flow aligns them exactly on
rigid scenes, which is what makes the weight/divergence pairing meaningful.
"""

from dataclasses import dataclass

import numpy as np

from .core import FlowField, SoftMaskStack


@dataclass(frozen=True)
class Frame:
    """An RGB image as 3 flat channel rows in [0, 1] on a lattice."""

    channels: np.ndarray
    lattice: object

    def __post_init__(self):
        ch = np.asarray(self.channels, dtype=np.float64)
        if ch.ndim != 2 or ch.shape[0] != 3 or ch.shape[1] != self.lattice.n:
            raise ValueError("channels must have shape (3, n) on the lattice")
        object.__setattr__(self, "channels", np.clip(ch, 0.0, 1.0))

    @classmethod
    def from_image(cls, image, lat):
        """Build from an (H, W, 3) array; uint8 images are scaled by 1/255."""
        arr = np.asarray(image)
        if arr.shape != (lat.height, lat.width, 3):
            raise ValueError("image must have shape (H, W, 3) matching the lattice")
        if arr.dtype == np.uint8:
            arr = arr.astype(np.float64) / 255.0
        return cls(arr.reshape(-1, 3).T.astype(np.float64), lat)


@dataclass(frozen=True)
class WarpPair:
    """Forward flow (frame 1 -> 2) and backward flow (frame 2 -> 1)."""

    forward_flow: FlowField
    backward_flow: FlowField

    def __post_init__(self):
        a, b = self.forward_flow.lattice, self.backward_flow.lattice
        if (a.height, a.width) != (b.height, b.width):
            raise ValueError("forward and backward flows must share a lattice")


def _corners(lat, qx, qy):
    """Clamped bilinear corner indices and weights for continuous queries."""
    qx = np.clip(qx, 0.0, lat.width - 1.0)
    qy = np.clip(qy, 0.0, lat.height - 1.0)
    x0 = np.floor(qx).astype(np.int64)
    y0 = np.floor(qy).astype(np.int64)
    x1 = np.minimum(x0 + 1, lat.width - 1)
    y1 = np.minimum(y0 + 1, lat.height - 1)
    fx = qx - x0
    fy = qy - y0
    idx = (
        y0 * lat.width + x0,
        y0 * lat.width + x1,
        y1 * lat.width + x0,
        y1 * lat.width + x1,
    )
    wts = ((1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy)
    return idx, wts


def bilinear_sample(field, lat, qx, qy):
    """Sample a flat field (leading dims free, last dim n) at query points."""
    field = np.asarray(field, dtype=np.float64)
    idx, wts = _corners(lat, np.asarray(qx, dtype=np.float64), np.asarray(qy, dtype=np.float64))
    out = np.zeros(field.shape[:-1] + np.shape(qx), dtype=np.float64)
    for i, w in zip(idx, wts):
        out += w * field[..., i]
    return out


def _scatter_adjoint(grad_out, lat, qx, qy):
    """Adjoint of bilinear_sample: scatter output gradients to source pixels."""
    idx, wts = _corners(lat, qx, qy)
    acc = np.zeros(grad_out.shape[:-1] + (lat.n,), dtype=np.float64)
    flat = acc.reshape(-1, lat.n)
    g = grad_out.reshape(-1, grad_out.shape[-1])
    for i, w in zip(idx, wts):
        np.add.at(flat.T, i, (g * w).T)
    return acc


def warp_by_flow(quantity, flow):
    """Pull a Frame or SoftMaskStack along a flow; masks are renormalized."""
    lat = flow.lattice
    qx = lat.x + flow.u
    qy = lat.y + flow.v
    if isinstance(quantity, Frame):
        return Frame(bilinear_sample(quantity.channels, lat, qx, qy), lat)
    if isinstance(quantity, SoftMaskStack):
        warped = bilinear_sample(quantity.weights, lat, qx, qy)
        return SoftMaskStack(warped / warped.sum(axis=0), validate=False)
    raise TypeError("quantity must be a Frame or SoftMaskStack")


def _photometric_weight(frame_a, warped_b):
    err = np.abs(frame_a.channels - warped_b).mean(axis=0)
    peak = err.max() if err.size else 0.0
    if peak <= 0.0:
        return np.ones_like(err)
    return 1.0 - err / peak


def _floor_renorm(weights, prob_floor):
    clipped = np.maximum(weights, prob_floor)
    total = clipped.sum(axis=0)
    return clipped / total, total


def _renorm_backprop(grad_hat, p_hat, total, raw, prob_floor):
    grad_raw = (grad_hat - (grad_hat * p_hat).sum(axis=0)) / total
    return np.where(raw > prob_floor, grad_raw, 0.0)


def _term(frame_a, masks_a, frame_b, masks_b, flow, prob_floor, want_grads):
    """One direction: pull frame/masks b onto a's grid through a's flow."""
    lat = flow.lattice
    qx = lat.x + flow.u
    qy = lat.y + flow.v
    warped_img = bilinear_sample(frame_b.channels, lat, qx, qy)
    weight = _photometric_weight(frame_a, warped_img)
    warped_raw = bilinear_sample(masks_b.weights, lat, qx, qy)
    # Both sides run the identical normalize-floor-renormalize pipeline.
    # Column sums are already 1 up to rounding (bilinear weights are convex),
    # so the normalizations are no-ops along simplex-preserving directions and
    # their gradients pass through; doing them on both sides makes equal
    # inputs yield bitwise-equal p and q, hence an exactly zero term.
    warped = warped_raw / warped_raw.sum(axis=0)
    direct = masks_a.weights / masks_a.weights.sum(axis=0)
    p, p_tot = _floor_renorm(direct, prob_floor)
    q, q_tot = _floor_renorm(warped, prob_floor)
    logp, logq = np.log(p), np.log(q)
    div = 0.5 * ((p * (logp - logq)).sum(axis=0) + (q * (logq - logp)).sum(axis=0))
    n = lat.n
    value = float((weight * div).sum() / n)
    if not want_grads:
        return value, None, None
    scale = weight / n
    dp_hat = 0.5 * scale * (logp - logq + 1.0 - q / p)
    dq_hat = 0.5 * scale * (logq - logp + 1.0 - p / q)
    grad_a = _renorm_backprop(dp_hat, p, p_tot, direct, prob_floor)
    dwarped = _renorm_backprop(dq_hat, q, q_tot, warped, prob_floor)
    grad_b = _scatter_adjoint(dwarped, lat, qx, qy)
    return value, grad_a, grad_b


def warp_loss(frame1, frame2, pair, masks1, masks2, prob_floor=1e-8):
    """Photometric-weighted symmetric mask divergence across a frame pair."""
    t1, _, _ = _term(frame1, masks1, frame2, masks2, pair.forward_flow, prob_floor, False)
    t2, _, _ = _term(frame2, masks2, frame1, masks1, pair.backward_flow, prob_floor, False)
    return t1 + t2


def warp_loss_grad_masks(frame1, frame2, pair, masks1, masks2, prob_floor=1e-8):
    """warp_loss value and gradients w.r.t. both raw mask weight arrays."""
    t1, g1a, g1b = _term(frame1, masks1, frame2, masks2, pair.forward_flow, prob_floor, True)
    t2, g2a, g2b = _term(frame2, masks2, frame1, masks1, pair.backward_flow, prob_floor, True)
    return t1 + t2, g1a + g2b, g1b + g2a
