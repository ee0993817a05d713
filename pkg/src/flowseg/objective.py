"""Relaxed segmentation objective: expected flow NLL plus an annealed KL term.

The loss for logits z is (1/N) sum_s NLL(flow, m_hat^(s)) + beta(iter) *
KL(softmax(z) || uniform), with m_hat^(s) Gumbel-softmax samples. beta starts
positive (all regions must explain the flow, spreading mass) and anneals to a
negative value (rewarding confident assignments).

Randomness goes through GumbelRng, a counter-based wrapper around numpy's
Philox generator: every draw starts from an explicit (draw index, stream)
counter block, so clones replay the identical noise sequence regardless of
how many values earlier draws consumed.
"""

from dataclasses import dataclass

import numpy as np
from numpy.random import Generator, Philox

from .core import SoftMaskStack, softmax_masks
from .likelihood import nll, nll_grad_masks

STREAM_GUMBEL = 0
STREAM_INIT = 1


@dataclass(frozen=True)
class ObjectiveConfig:
    n_samples: int = 3
    gs_temperature: float = 1.0
    beta_start: float = 0.1
    beta_end: float = -0.1
    beta_anneal_iters: int = 5000
    prob_floor: float = 1e-8

    def __post_init__(self):
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")
        if self.gs_temperature <= 0.0:
            raise ValueError("gs_temperature must be positive")
        if self.beta_anneal_iters < 1:
            raise ValueError("beta_anneal_iters must be >= 1")
        if self.prob_floor <= 0.0:
            raise ValueError("prob_floor must be positive")


class GumbelRng:
    """Replayable noise source with independent named streams.

    Each draw seeds a fresh Philox generator at counter block
    [0, draw_index, stream, 0]; the low word is left for the generator's
    internal block consumption, so distinct draws can never overlap. clone()
    copies the counters, letting a caller re-evaluate a loss under the exact
    noise a gradient saw. zero_noise is a test hook that freezes Gumbel
    noise at 0 while keeping the counter discipline.
    """

    def __init__(self, seed, zero_noise=False):
        self.seed = int(seed)
        self.zero_noise = bool(zero_noise)
        self._draws = {STREAM_GUMBEL: 0, STREAM_INIT: 0}

    def _generator(self, stream):
        key = [self.seed & 0xFFFFFFFFFFFFFFFF, (self.seed >> 64) & 0xFFFFFFFFFFFFFFFF]
        draw = self._draws[stream]
        self._draws[stream] = draw + 1
        return Generator(Philox(counter=[0, draw, stream, 0], key=key))

    def gumbel(self, shape):
        gen = self._generator(STREAM_GUMBEL)
        if self.zero_noise:
            return np.zeros(shape)
        u = gen.random(shape)
        u = np.clip(u, 1e-300, 1.0 - 1e-16)
        return -np.log(-np.log(u))

    def normal(self, shape, scale=1.0):
        return scale * self._generator(STREAM_INIT).standard_normal(shape)

    def clone(self):
        other = GumbelRng(self.seed, zero_noise=self.zero_noise)
        other._draws = dict(self._draws)
        return other


def derive_seed(master, index):
    """Deterministic 64-bit child seed for an indexed unit of work."""
    ss = np.random.SeedSequence((int(master), int(index)))
    return int(ss.generate_state(1, np.uint64)[0])


def gumbel_softmax_sample(logits, temperature, rng):
    """Draw one relaxed one-hot mask stack from the logits."""
    if temperature <= 0.0:
        raise ValueError("temperature must be positive")
    g = rng.gumbel(logits.shape)
    return softmax_masks((logits + g) / temperature)


def _floored(probs, prob_floor):
    clipped = np.maximum(probs, prob_floor)
    return clipped, clipped.sum(axis=0)


def kl_to_uniform(probs, prob_floor=1e-8):
    """Sum over pixels of KL(p || uniform) = log K - H(p).

    probs may be a SoftMaskStack or a (k, n) array; values are floored at
    prob_floor and renormalized so one-hot inputs stay finite.
    """
    if isinstance(probs, SoftMaskStack):
        probs = probs.weights
    k = probs.shape[0]
    clipped, total = _floored(probs, prob_floor)
    p = clipped / total
    entropy = -(p * np.log(p)).sum(axis=0)
    return float((np.log(k) - entropy).sum())


def kl_to_uniform_grad(probs, prob_floor=1e-8):
    """Value and gradient of kl_to_uniform w.r.t. the raw probabilities.

    The floor is a max(), so entries at the floor get zero gradient.
    """
    if isinstance(probs, SoftMaskStack):
        probs = probs.weights
    k = probs.shape[0]
    clipped, total = _floored(probs, prob_floor)
    p = clipped / total
    logp = np.log(p)
    entropy = -(p * logp).sum(axis=0)
    value = float((np.log(k) - entropy).sum())
    grad = (logp - (p * logp).sum(axis=0)) / total
    grad = np.where(probs > prob_floor, grad, 0.0)
    return value, grad


def softmax_backprop(p, dp):
    """Pull a gradient on softmax outputs back to the logits: columns of p
    are simplex points, dz = p * (dp - sum_k dp_k p_k)."""
    return p * (dp - (dp * p).sum(axis=0))


def beta_at(iteration, config):
    """Linear anneal from beta_start to beta_end over beta_anneal_iters."""
    if iteration < 0:
        raise ValueError("iteration must be >= 0")
    t = min(iteration / config.beta_anneal_iters, 1.0)
    return config.beta_start + (config.beta_end - config.beta_start) * t


def _loss_and_grad(logits, flow, lat, prior, config, iteration, rng, want_grad):
    k = logits.shape[0]
    temp = config.gs_temperature
    nll_total = 0.0
    grad = np.zeros_like(logits) if want_grad else None
    for _ in range(config.n_samples):
        g = rng.gumbel(logits.shape)
        sample = softmax_masks((logits + g) / temp)
        if want_grad:
            value, dmask = nll_grad_masks(flow, sample, lat, prior)
            grad += softmax_backprop(sample.weights, dmask) / temp
        else:
            value = nll(flow, sample, lat, prior)
        nll_total += value
    nll_mean = nll_total / config.n_samples
    beta = beta_at(iteration, config)
    probs = softmax_masks(logits)
    if want_grad:
        grad /= config.n_samples
        kl, dkl = kl_to_uniform_grad(probs.weights, config.prob_floor)
        grad += beta * softmax_backprop(probs.weights, dkl)
    else:
        kl = kl_to_uniform(probs.weights, config.prob_floor)
    loss = nll_mean + beta * kl
    if want_grad:
        return loss, grad
    return loss


def loss_beta(logits, flow, lat, prior, config, iteration, rng):
    """The full relaxed objective value for one draw of sampling noise."""
    return _loss_and_grad(logits, flow, lat, prior, config, iteration, rng, False)


def loss_value_and_grad(logits, flow, lat, prior, config, iteration, rng):
    """Value and exact logits gradient under one draw of sampling noise.

    Replaying the same rng state through loss_beta yields the value this
    gradient differentiates.
    """
    return _loss_and_grad(logits, flow, lat, prior, config, iteration, rng, True)


def loss_grad(logits, flow, lat, prior, config, iteration, rng):
    """Exact gradient of loss_beta with respect to the logits."""
    return loss_value_and_grad(logits, flow, lat, prior, config, iteration, rng)[1]
