"""Random-instance builders and reference metric implementations shared
across the test modules."""

import itertools

import numpy as np

from flowseg import (
    FlowField,
    HardMaskStack,
    MotionModelKind,
    MotionPrior,
    lattice,
    softmax_masks,
)


def rand_flow(rng, lat, scale=2.0):
    return FlowField(
        rng.normal(0.0, scale, lat.n), rng.normal(0.0, scale, lat.n), lat
    )


def rand_hard(rng, k, n):
    return HardMaskStack(rng.integers(0, k, size=n).astype(np.int64), k=k)


def rand_soft(rng, k, n, scale=1.0):
    return softmax_masks(rng.normal(0.0, scale, (k, n)))


def rand_spd(rng, d, jitter=0.1):
    a = rng.normal(0.0, 1.0, (d, d))
    return a @ a.T + jitter * np.eye(d)


def rand_prior(rng, kind):
    kind = MotionModelKind(kind)
    noise_var = float(rng.uniform(0.2, 2.0))
    if kind is MotionModelKind.TRANSLATION:
        tau2 = float(rng.uniform(0.1, 5.0))
        return MotionPrior(kind, rng.normal(0.0, 1.0, 2), tau2 * np.eye(2), noise_var)
    return MotionPrior(kind, rng.normal(0.0, 0.5, 6), rand_spd(rng, 6), noise_var)


def rand_lattice(rng, lo=4, hi=16):
    return lattice(int(rng.integers(lo, hi + 1)), int(rng.integers(lo, hi + 1)))


def ari_by_pair_enumeration(pred, gt):
    """ARI from explicit pair counts over every pixel pair."""
    n = len(gt)
    n11 = n00 = n10 = n01 = 0
    for i in range(n):
        for j in range(i + 1, n):
            sp = pred[i] == pred[j]
            sg = gt[i] == gt[j]
            if sp and sg:
                n11 += 1
            elif sp:
                n10 += 1
            elif sg:
                n01 += 1
            else:
                n00 += 1
    denom = (n11 + n10) * (n10 + n00) + (n11 + n01) * (n01 + n00)
    if denom == 0:
        return 1.0
    return 2.0 * (n11 * n00 - n10 * n01) / denom


def brute_force_assignment(cost):
    """Exhaustive minimum-cost matching of size min(P, G) with the
    lexicographically smallest pair list among ties."""
    n_rows, n_cols = cost.shape
    best_cost = None
    best_pairs = None
    if n_rows <= n_cols:
        for cols in itertools.permutations(range(n_cols), n_rows):
            total = sum(cost[r, c] for r, c in enumerate(cols))
            pairs = tuple(enumerate(cols))
            if best_cost is None or total < best_cost - 1e-12:
                best_cost, best_pairs = total, pairs
            elif abs(total - best_cost) <= 1e-12 and pairs < best_pairs:
                best_pairs = pairs
    else:
        for rows in itertools.permutations(range(n_rows), n_cols):
            total = sum(cost[r, c] for c, r in enumerate(rows))
            pairs = tuple(sorted((r, c) for c, r in enumerate(rows)))
            if best_cost is None or total < best_cost - 1e-12:
                best_cost, best_pairs = total, pairs
            elif abs(total - best_cost) <= 1e-12 and pairs < best_pairs:
                best_pairs = pairs
    return best_pairs, best_cost


def miou_by_enumeration(pred, gt):
    """Hungarian mIoU via explicit assignment enumeration."""
    pu = np.unique(pred)
    gu = np.unique(gt)
    iou = np.zeros((pu.size, gu.size))
    for a, p in enumerate(pu):
        for b, g in enumerate(gu):
            inter = np.sum((pred == p) & (gt == g))
            union = np.sum((pred == p) | (gt == g))
            iou[a, b] = inter / union
    best = 0.0
    if pu.size <= gu.size:
        for cols in itertools.permutations(range(gu.size), pu.size):
            best = max(best, sum(iou[r, c] for r, c in enumerate(cols)))
    else:
        for rows in itertools.permutations(range(pu.size), gu.size):
            best = max(best, sum(iou[r, c] for c, r in enumerate(rows)))
    return best / max(pu.size, gu.size)
