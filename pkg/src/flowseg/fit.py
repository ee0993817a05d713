"""Direct per-frame mask fitting: gradient descent on the relaxed objective.

Instead of training a network, logits are optimized per frame with Adam.
With the warp term enabled, a second logit tensor is fitted to the partner
frame (supervised by the pair's other flow) using the same seed and noise
streams, and the two are coupled through the mask-consistency loss; the
returned logits and report describe the primary frame. Running the same
seed with identical frames and zero flows reproduces the warp-off result
bit for bit, because the consistency term and its gradients are then
exactly zero and both logit tensors follow identical trajectories.
"""

import dataclasses
import time
from dataclasses import dataclass

import numpy as np

from .core import harden, softmax_masks
from .errors import DivergenceError, NumericalError
from .likelihood import nll
from .metrics import postprocess_connected_components
from .objective import (
    GumbelRng,
    ObjectiveConfig,
    derive_seed,
    loss_value_and_grad,
    softmax_backprop,
)
from .warp import warp_loss_grad_masks


@dataclass(frozen=True)
class FitConfig:
    k: int
    iters: int = 800
    step_size: float = 0.05
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    init_scale: float = 0.01
    grad_clip: float = 10.0
    seed: int = 0
    objective: ObjectiveConfig = None
    use_warp: bool = False

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.iters < 1:
            raise ValueError("iters must be >= 1")
        if self.step_size <= 0.0:
            raise ValueError("step_size must be positive")

    def resolved_objective(self):
        """Default objective anneals beta over the first half of the run."""
        if self.objective is not None:
            return self.objective
        return ObjectiveConfig(beta_anneal_iters=max(1, self.iters // 2))


@dataclass
class FitReport:
    final_loss: float
    trajectory: np.ndarray
    wall_time: float
    iterations: int
    raw_masks: object
    masks: object


class _Adam:
    def __init__(self, shape, config):
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.t = 0
        self.cfg = config

    def step(self, params, grad):
        cfg = self.cfg
        norm = float(np.sqrt((grad * grad).sum()))
        if norm > cfg.grad_clip:
            grad = grad * (cfg.grad_clip / norm)
        self.t += 1
        self.m = cfg.adam_beta1 * self.m + (1.0 - cfg.adam_beta1) * grad
        self.v = cfg.adam_beta2 * self.v + (1.0 - cfg.adam_beta2) * grad * grad
        m_hat = self.m / (1.0 - cfg.adam_beta1 ** self.t)
        v_hat = self.v / (1.0 - cfg.adam_beta2 ** self.t)
        params -= cfg.step_size * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)


def fit_masks(flow, lat, prior, config, frames=None, warp_pair=None):
    """Optimize mask logits for one frame; returns (logits, FitReport)."""
    start = time.perf_counter()
    obj_cfg = config.resolved_objective()
    use_warp = config.use_warp
    if use_warp and (frames is None or warp_pair is None):
        raise ValueError("use_warp requires frames and a warp_pair")

    shape = (config.k, lat.n)
    rng1 = GumbelRng(config.seed)
    logits1 = rng1.normal(shape, config.init_scale)
    adam1 = _Adam(shape, config)
    if use_warp:
        frame1, frame2 = frames
        flow2 = warp_pair.backward_flow
        rng2 = GumbelRng(config.seed)
        logits2 = rng2.normal(shape, config.init_scale)
        adam2 = _Adam(shape, config)

    trajectory = np.empty(config.iters)
    for it in range(config.iters):
        value1, grad1 = loss_value_and_grad(
            logits1, flow, lat, prior, obj_cfg, it, rng1
        )
        total = value1
        if use_warp:
            value2, grad2 = loss_value_and_grad(
                logits2, flow2, lat, prior, obj_cfg, it, rng2
            )
            probs1 = softmax_masks(logits1)
            probs2 = softmax_masks(logits2)
            warp_value, dm1, dm2 = warp_loss_grad_masks(
                frame1, frame2, warp_pair, probs1, probs2, obj_cfg.prob_floor
            )
            # Skipping exact-zero updates keeps the zero-flow/identical-frame
            # case bit-identical to a warp-off run.
            if warp_value != 0.0 or dm1.any() or dm2.any():
                grad1 = grad1 + softmax_backprop(probs1.weights, dm1)
                grad2 = grad2 + softmax_backprop(probs2.weights, dm2)
                total = value1 + warp_value
            if not np.isfinite(value2):
                raise DivergenceError(
                    "partner-frame loss became non-finite", iteration=it
                )
        if not np.isfinite(total):
            raise DivergenceError("loss became non-finite", iteration=it)
        trajectory[it] = total
        adam1.step(logits1, grad1)
        if use_warp:
            adam2.step(logits2, grad2)

    raw = harden(softmax_masks(logits1))
    post = postprocess_connected_components(raw, lat, k_keep=config.k)
    report = FitReport(
        final_loss=float(trajectory[-1]),
        trajectory=trajectory,
        wall_time=time.perf_counter() - start,
        iterations=config.iters,
        raw_masks=raw,
        masks=post,
    )
    return logits1, report


def fit_masks_restarts(flow, lat, prior, config, n_restarts,
                       frames=None, warp_pair=None):
    """Run independently seeded fits, keep the best decoded partition.

    Each restart is a full fit_masks run with a child seed derived from
    config.seed and the restart index. Candidates are ranked by the plain
    negative log-likelihood of their post-processed hard masks, which
    scores the partition alone; the running loss is a poor ranking key
    because it also reflects how far the confidence phase progressed.
    """
    if n_restarts < 1:
        raise ValueError("n_restarts must be >= 1")
    best = None
    for r in range(n_restarts):
        cfg = dataclasses.replace(config, seed=derive_seed(config.seed, r))
        logits, report = fit_masks(flow, lat, prior, cfg, frames, warp_pair)
        try:
            score = nll(flow, report.masks, lat, prior)
        except NumericalError:
            continue
        if best is None or score < best[0]:
            best = (score, logits, report)
    if best is None:
        raise DivergenceError("no restart produced a scorable partition")
    return best[1], best[2]


def decode(logits, lat, k_keep=None, min_area_frac=0.001):
    """Harden softmaxed logits and apply connected-component cleanup."""
    if k_keep is None:
        k_keep = logits.shape[0]
    raw = harden(softmax_masks(logits))
    return postprocess_connected_components(raw, lat, k_keep, min_area_frac)
