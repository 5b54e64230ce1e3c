"""Softmax policy over architectures and its REINFORCE update."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .searchspace import CELL_TYPES, AlphaTable, Genotype


def softmax_probs(a):
    a = np.asarray(a, dtype=np.float64)
    z = np.exp(a - a.max())
    return z / z.sum()


def policy_probs(alpha):
    return {ct: [softmax_probs(a) for a in alpha.values[ct]] for ct in CELL_TYPES}


def sample_genotype(alpha, rng):
    """One independent categorical draw per edge, every edge listed explicitly."""
    cells = {}
    for ct in CELL_TYPES:
        chosen = {}
        for edge, names, a in zip(alpha.edges, alpha.ops[ct], alpha.values[ct]):
            cdf = np.cumsum(softmax_probs(a))
            k = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
            chosen[edge] = names[min(k, len(names) - 1)]
        cells[ct] = chosen
    return Genotype(cells["normal"], cells["reduction"])


def _chosen_index(genotype, ct, edge, names):
    op = genotype.op(ct, edge)
    try:
        return names.index(op)
    except ValueError:
        raise ValueError(f"{ct} edge {edge}: {op!r} is not a candidate of {names}") from None


def log_prob(genotype, alpha):
    """Log-probability of ``genotype`` under the factorized per-edge policy."""
    total = 0.0
    for ct in CELL_TYPES:
        for edge, names, a in zip(alpha.edges, alpha.ops[ct], alpha.values[ct]):
            a = np.asarray(a, dtype=np.float64)
            m = a.max()
            lse = m + np.log(np.exp(a - m).sum())
            total += a[_chosen_index(genotype, ct, edge, names)] - lse
    return float(total)


def score_gradient(genotype, alpha):
    """d log pi(genotype) / d alpha, per edge: onehot(choice) - softmax(alpha)."""
    out = {}
    for ct in CELL_TYPES:
        grads = []
        for edge, names, a in zip(alpha.edges, alpha.ops[ct], alpha.values[ct]):
            g = -softmax_probs(a)
            g[_chosen_index(genotype, ct, edge, names)] += 1.0
            grads.append(g)
        out[ct] = grads
    return out


@dataclass
class BaselineState:
    value: float = 0.0
    decay: float = 0.9
    initialized: bool = False

    def __post_init__(self):
        if not 0 <= self.decay < 1:
            raise ValueError(f"baseline decay must lie in [0, 1), got {self.decay}")

    def update(self, batch_mean_reward):
        if not np.isfinite(batch_mean_reward):
            raise ValueError(f"non-finite reward {batch_mean_reward}")
        if not self.initialized:
            self.value = float(batch_mean_reward)
            self.initialized = True
        else:
            self.value = self.decay * self.value + (1 - self.decay) * float(batch_mean_reward)
        return self.value


def baseline_update(baseline, batch_mean_reward):
    return baseline.update(batch_mean_reward)


@dataclass
class SampleBatch:
    genotypes: list = field(default_factory=list)
    rewards: list = field(default_factory=list)
    log_probs: list = field(default_factory=list)

    def __post_init__(self):
        if not (len(self.genotypes) == len(self.rewards) == len(self.log_probs)):
            raise ValueError("genotypes, rewards and log_probs must have equal length")

    def __len__(self):
        return len(self.genotypes)


def reinforce_update(batch, baseline, alpha, lr_alpha, use_baseline=True):
    """One gradient-ascent step on ``alpha`` from a batch of scored samples.

    The advantage of sample m is ``R_m - b``. Before the baseline has seen a
    reward, ``b`` is the batch mean. With ``use_baseline=False``, ``b = 0``.
    Returns the applied gradient estimate (per cell type, per edge).
    """
    m = len(batch)
    if m == 0:
        raise ValueError("reinforce_update needs at least one sample")
    rewards = np.asarray(batch.rewards, dtype=np.float64)
    if not use_baseline:
        b = 0.0
    elif baseline.initialized:
        b = baseline.value
    else:
        b = float(rewards.mean())
    grad = {ct: [np.zeros_like(a) for a in alpha.values[ct]] for ct in CELL_TYPES}
    for g, r in zip(batch.genotypes, rewards):
        adv = r - b
        if adv == 0:
            continue
        score = score_gradient(g, alpha)
        for ct in CELL_TYPES:
            for acc, s in zip(grad[ct], score[ct]):
                acc += adv * s
    for ct in CELL_TYPES:
        for a, gsum in zip(alpha.values[ct], grad[ct]):
            gsum /= m
            a += lr_alpha * gsum
    if use_baseline:
        baseline.update(float(rewards.mean()))
    return grad
