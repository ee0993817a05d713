"""Segmentation metrics: foreground ARI, Hungarian-matched mIoU, and the
connected-component post-processing applied to decoded masks.

The assignment solver is the O(s^3) potentials method on a zero-padded
square matrix. Padding is always one-sided (only rows or only columns are
dummies), so every perfect matching of the padded problem restricts to a
matching of exactly min(P, G) real pairs whose dummy contribution is zero;
minimizing the padded total is therefore equivalent to minimizing the real
total over all forced-size matchings, even with negative costs.
"""

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .core import HardMaskStack
from .errors import UndefinedMetricError


@dataclass(frozen=True)
class ContingencyTable:
    """Pred x gt label co-occurrence counts over the evaluated pixels."""

    counts: np.ndarray
    row_sums: np.ndarray
    col_sums: np.ndarray
    total: int

    @classmethod
    def from_labels(cls, pred, gt):
        pred = np.asarray(pred)
        gt = np.asarray(gt)
        if pred.shape != gt.shape:
            raise ValueError("label arrays must have equal length")
        pu, pi = np.unique(pred, return_inverse=True)
        gu, gi = np.unique(gt, return_inverse=True)
        counts = np.bincount(pi * gu.size + gi, minlength=pu.size * gu.size)
        counts = counts.reshape(pu.size, gu.size)
        return cls(counts, counts.sum(axis=1), counts.sum(axis=0), int(counts.sum()))


def _pairs(x):
    x = x.astype(np.float64)
    return (x * (x - 1.0) / 2.0).sum()


def fg_ari(pred_labels, gt_labels, gt_background_label=0):
    """Adjusted Rand Index restricted to gt foreground pixels.

    Both-sides-single-cluster (vanishing denominator) returns 1.0.
    """
    pred_labels = np.asarray(pred_labels)
    gt_labels = np.asarray(gt_labels)
    fg = gt_labels != gt_background_label
    if not fg.any():
        raise UndefinedMetricError("ground truth has no foreground pixels")
    table = ContingencyTable.from_labels(pred_labels[fg], gt_labels[fg])
    sum_ij = _pairs(table.counts)
    sum_a = _pairs(table.row_sums)
    sum_b = _pairs(table.col_sums)
    all_pairs = table.total * (table.total - 1.0) / 2.0
    if all_pairs == 0.0:
        return 1.0
    expected = sum_a * sum_b / all_pairs
    maximum = 0.5 * (sum_a + sum_b)
    denom = maximum - expected
    if denom == 0.0:
        return 1.0
    return float((sum_ij - expected) / denom)


@dataclass(frozen=True)
class Assignment:
    """A min-cost matching: (row, col) pairs sorted by row, and its cost."""

    pairs: tuple
    total_cost: float


def _solve_square(a):
    """Minimum-cost perfect matching on a square matrix (potentials method).

    Returns (col_of_row, total_cost). Indices are 1-based internally.
    """
    n = a.shape[0]
    inf = np.inf
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    p = np.zeros(n + 1, dtype=np.int64)
    way = np.zeros(n + 1, dtype=np.int64)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(n + 1, inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            delta = inf
            j1 = -1
            for j in range(1, n + 1):
                if used[j]:
                    continue
                cur = a[i0 - 1, j - 1] - u[i0] - v[j]
                if cur < minv[j]:
                    minv[j] = cur
                    way[j] = j0
                if minv[j] < delta:
                    delta = minv[j]
                    j1 = j
            for j in range(n + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    col_of_row = np.zeros(n, dtype=np.int64)
    for j in range(1, n + 1):
        if p[j]:
            col_of_row[p[j] - 1] = j - 1
    total = float(sum(a[i, col_of_row[i]] for i in range(n)))
    return col_of_row, total


def _padded_opt(cost, rows, cols):
    """Optimal real-pair cost matching the given rows/cols (zero padding)."""
    if len(rows) == 0 or len(cols) == 0:
        return 0.0
    s = max(len(rows), len(cols))
    a = np.zeros((s, s))
    a[: len(rows), : len(cols)] = cost[np.ix_(rows, cols)]
    return _solve_square(a)[1]


def hungarian(cost_matrix):
    """Minimum-cost matching of size min(P, G) with a deterministic
    tie-break: the lexicographically smallest (row, col) pair list among all
    optimal matchings."""
    cost = np.asarray(cost_matrix, dtype=np.float64)
    if cost.ndim != 2 or cost.size == 0:
        raise ValueError("cost matrix must be 2-dimensional and non-empty")
    if not np.isfinite(cost).all():
        raise ValueError("cost matrix must be finite")
    n_rows, n_cols = cost.shape

    def close(x, y):
        return abs(x - y) <= 1e-9 * max(1.0, abs(x), abs(y))

    rows_left = list(range(n_rows))
    cols_left = list(range(n_cols))
    rem_opt = _padded_opt(cost, rows_left, cols_left)
    pairs = []
    total = 0.0
    for r in range(n_rows):
        rows_left.remove(r)
        chosen = None
        # Matching r to any column is lexicographically smaller than leaving
        # it out, so scan columns in order and keep the first that preserves
        # optimality; drop r only if no column does.
        for c in cols_left:
            sub = cost[r, c] + _padded_opt(cost, rows_left, [x for x in cols_left if x != c])
            if close(sub, rem_opt):
                chosen = c
                break
        if chosen is None:
            rem_opt_skip = _padded_opt(cost, rows_left, cols_left)
            if not close(rem_opt_skip, rem_opt):
                raise AssertionError("assignment tie-break lost optimality")
            continue
        cols_left.remove(chosen)
        pairs.append((r, chosen))
        total += cost[r, chosen]
        rem_opt = rem_opt - cost[r, chosen]
    return Assignment(tuple(pairs), float(total))


def miou_hungarian(pred_labels, gt_labels, fg_only=False, gt_background_label=0):
    """Mean IoU of the optimal segment matching over max(#pred, #gt).

    Background counts as a segment on both sides; fg_only drops the gt
    background segment (pred segments are unchanged) and divides by
    max(#pred, #gt foreground).
    """
    pred_labels = np.asarray(pred_labels)
    gt_labels = np.asarray(gt_labels)
    if pred_labels.shape != gt_labels.shape:
        raise ValueError("label arrays must have equal length")
    pu = np.unique(pred_labels)
    gu = np.unique(gt_labels)
    if fg_only:
        gu = gu[gu != gt_background_label]
        if gu.size == 0:
            raise UndefinedMetricError("ground truth has no foreground segments")
    table = ContingencyTable.from_labels(pred_labels, gt_labels)
    gu_all = np.unique(gt_labels)
    keep = np.isin(gu_all, gu)
    inter = table.counts[:, keep].astype(np.float64)
    p_sizes = table.row_sums.astype(np.float64)[:, None]
    g_sizes = table.col_sums.astype(np.float64)[None, keep]
    union = p_sizes + g_sizes - inter
    iou = inter / union
    assignment = hungarian(1.0 - iou)
    matched = sum(iou[r, c] for r, c in assignment.pairs)
    return float(matched / max(pu.size, gu.size))


def postprocess_connected_components(hard_masks, lat, k_keep, min_area_frac=0.001,
                                     connectivity=4):
    """Split labels into connected components, keep the k_keep largest,
    discard sub-threshold specks, and merge everything else into the largest
    component overall. Output labels are assigned by size rank."""
    if not (0.0 < min_area_frac < 1.0):
        raise ValueError("min_area_frac must be in (0, 1)")
    if k_keep < 1:
        raise ValueError("k_keep must be >= 1")
    labels2d = hard_masks.labels.reshape(lat.height, lat.width)
    structure = ndimage.generate_binary_structure(2, 1 if connectivity == 4 else 2)
    components = []
    for value in np.unique(labels2d):
        comp, n_comp = ndimage.label(labels2d == value, structure=structure)
        flat = comp.reshape(-1)
        for c in range(1, n_comp + 1):
            idx = np.flatnonzero(flat == c)
            components.append((int(idx.size), int(value), int(idx[0]), idx))
    components.sort(key=lambda t: (-t[0], t[1], t[2]))
    min_area = min_area_frac * lat.n
    out = np.zeros(lat.n, dtype=np.int64)
    next_label = 0
    for rank, (size, _, _, idx) in enumerate(components):
        if rank < k_keep and size >= min_area:
            out[idx] = next_label
            next_label += 1
        else:
            out[idx] = 0  # rank 0 is the largest component overall
    return HardMaskStack(out, k=max(next_label, 1))
