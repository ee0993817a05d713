"""Shared raster and assignment types.

Rasters live on a row-major pixel lattice with x increasing rightward and y
increasing downward, both in raw pixel units. Per-pixel quantities are stored
as flat length-n vectors (n = height * width); K-way assignments as (k, n)
arrays. All likelihood math is float64.
"""

from dataclasses import dataclass, field

import numpy as np

SIMPLEX_ATOL = 1e-6


@dataclass(frozen=True)
class Lattice:
    """Row-major pixel grid with precomputed coordinate vectors."""

    height: int
    width: int
    x: np.ndarray = field(repr=False, compare=False, default=None)
    y: np.ndarray = field(repr=False, compare=False, default=None)

    def __post_init__(self):
        if self.height < 1 or self.width < 1:
            raise ValueError(
                "lattice dimensions must be >= 1, got %dx%d" % (self.height, self.width)
            )
        xs = np.tile(np.arange(self.width, dtype=np.float64), self.height)
        ys = np.repeat(np.arange(self.height, dtype=np.float64), self.width)
        object.__setattr__(self, "x", xs)
        object.__setattr__(self, "y", ys)

    @property
    def n(self):
        return self.height * self.width

    def index_of(self, x, y):
        """Flat index of integer pixel coordinates (x, y)."""
        return int(y) * self.width + int(x)


def lattice(height, width):
    """Build the row-major pixel lattice for a height x width image."""
    return Lattice(int(height), int(width))


@dataclass(frozen=True)
class FlowField:
    """Per-pixel 2D displacement (pixels/frame): u along x, v along y."""

    u: np.ndarray
    v: np.ndarray
    lattice: Lattice

    def __post_init__(self):
        u = np.ascontiguousarray(self.u, dtype=np.float64)
        v = np.ascontiguousarray(self.v, dtype=np.float64)
        if u.shape != (self.lattice.n,) or v.shape != (self.lattice.n,):
            raise ValueError(
                "flow components must be flat length-%d vectors" % self.lattice.n
            )
        if not (np.isfinite(u).all() and np.isfinite(v).all()):
            raise ValueError("flow contains non-finite entries")
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "v", v)


class SoftMaskStack:
    """K-way per-pixel assignment weights, each pixel summing to 1."""

    __slots__ = ("k", "weights")

    def __init__(self, weights, validate=True):
        weights = np.ascontiguousarray(weights, dtype=np.float64)
        if weights.ndim != 2 or weights.shape[0] < 1:
            raise ValueError("weights must be a (k, n) array with k >= 1")
        if validate:
            if weights.min(initial=0.0) < -SIMPLEX_ATOL or weights.max(initial=0.0) > 1.0 + SIMPLEX_ATOL:
                raise ValueError("weights must lie in [0, 1]")
            col = weights.sum(axis=0)
            if np.abs(col - 1.0).max() > SIMPLEX_ATOL:
                raise ValueError("per-pixel weights must sum to 1 within %g" % SIMPLEX_ATOL)
        self.weights = weights
        self.k = weights.shape[0]

    @property
    def n(self):
        return self.weights.shape[1]


class HardMaskStack:
    """One-hot K-way assignment stored as per-pixel integer labels."""

    __slots__ = ("k", "labels")

    def __init__(self, labels, k=None):
        labels = np.ascontiguousarray(labels)
        if labels.ndim != 1:
            raise ValueError("labels must be a flat vector")
        if not np.issubdtype(labels.dtype, np.integer):
            raise ValueError("labels must be integers")
        labels = labels.astype(np.int64)
        if k is None:
            k = int(labels.max(initial=0)) + 1
        k = int(k)
        if labels.size and (labels.min() < 0 or labels.max() >= k):
            raise ValueError("labels must lie in [0, k)")
        self.labels = labels
        self.k = k

    @property
    def n(self):
        return self.labels.shape[0]

    def weights(self):
        """Expand to a one-hot (k, n) float64 weight array."""
        out = np.zeros((self.k, self.n), dtype=np.float64)
        out[self.labels, np.arange(self.n)] = 1.0
        return out


def softmax_masks(logits):
    """Per-pixel softmax over the K axis of a (k, n) logits array.

    Numerically stabilized by max-subtraction; the output always satisfies
    the simplex invariant exactly up to rounding.
    """
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 2:
        raise ValueError("logits must be a (k, n) array")
    if not np.isfinite(logits).all():
        raise ValueError("logits must be finite")
    shifted = logits - logits.max(axis=0, keepdims=True)
    np.exp(shifted, out=shifted)
    shifted /= shifted.sum(axis=0, keepdims=True)
    return SoftMaskStack(shifted, validate=False)


def harden(soft_masks):
    """Per-pixel argmax of a SoftMaskStack; ties break to the lowest index."""
    labels = np.argmax(soft_masks.weights, axis=0)
    return HardMaskStack(labels.astype(np.int64), k=soft_masks.k)
