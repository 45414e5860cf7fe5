"""Group-relative policy optimization on per-token log-probabilities.

Everything here works on plain arrays of log-probs so the loss and its
gradient with respect to the current policy's log-probs are exact. The old
and reference log-probs are constants.

Loss over a batch of K sampled sequences with N tokens in total::

    L = (1/N) * sum_{i,t} [ -min(r A_i, clip(r, 1-eps, 1+eps) A_i) + beta * kl_{i,t} ]

with ``r = exp(logp_new - logp_old)`` and ``kl = exp(d) - d - 1`` where
``d = logp_ref - logp_new``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np


@dataclass
class GRPOConfig:
    clip_eps: float = 0.2
    kl_beta: float = 0.04
    group_size: int = 8
    micro_chunk: int = 4
    advantage_std_floor: float = 1e-4

    def __post_init__(self):
        if not 0.0 < self.clip_eps < 1.0:
            raise ValueError(f"clip_eps must be in (0, 1), got {self.clip_eps}")
        if self.kl_beta < 0:
            raise ValueError(f"kl_beta must be >= 0, got {self.kl_beta}")
        if self.group_size < 2:
            raise ValueError(f"group_size must be >= 2, got {self.group_size}")
        if self.micro_chunk < 1:
            raise ValueError(f"micro_chunk must be >= 1, got {self.micro_chunk}")
        if self.advantage_std_floor <= 0:
            raise ValueError("advantage_std_floor must be positive")


@dataclass
class RolloutGroup:
    """G sampled sequences for one prompt, with rewards and per-token log-probs.

    ``logp_new`` defaults to ``logp_old`` (on-policy). ``advantages`` is
    filled by :func:`group_advantages` when not given.
    """

    sequences: list[np.ndarray]
    rewards: np.ndarray
    logp_old: list[np.ndarray]
    logp_ref: list[np.ndarray]
    logp_new: Optional[list[np.ndarray]] = None
    advantages: Optional[np.ndarray] = None
    prompt_id: Optional[int] = None
    texts: list[str] = field(default_factory=list)
    breakdowns: list = field(default_factory=list)

    def __post_init__(self):
        self.sequences = [np.asarray(s) for s in self.sequences]
        self.rewards = np.asarray(self.rewards, dtype=float)
        self.logp_old = [np.asarray(x, dtype=float) for x in self.logp_old]
        self.logp_ref = [np.asarray(x, dtype=float) for x in self.logp_ref]
        if self.logp_new is None:
            self.logp_new = [x.copy() for x in self.logp_old]
        else:
            self.logp_new = [np.asarray(x, dtype=float) for x in self.logp_new]
        g = len(self.sequences)
        if g < 2:
            raise ValueError(f"a group needs at least 2 samples, got {g}")
        if not (len(self.rewards) == len(self.logp_old) == len(self.logp_ref) == len(self.logp_new) == g):
            raise ValueError("rewards and log-prob lists must have one entry per sequence")
        for seq, *lps in zip(self.sequences, self.logp_old, self.logp_ref, self.logp_new):
            if len(seq) < 1:
                raise ValueError("every sequence needs at least one token")
            if any(lp.shape != (len(seq),) for lp in lps):
                raise ValueError("log-prob arrays must match sequence lengths")

    @property
    def group_size(self) -> int:
        return len(self.sequences)

    @property
    def lengths(self) -> list[int]:
        return [len(s) for s in self.sequences]


def group_advantages(rewards, std_floor: float = 1e-4) -> np.ndarray:
    """``(R - mean) / max(std, floor)`` with the population std; equal rewards give zeros."""
    rewards = np.asarray(rewards, dtype=float)
    if rewards.ndim != 1 or len(rewards) < 2:
        raise ValueError("advantages need a group of at least 2 rewards")
    centered = rewards - rewards.mean()
    if np.all(rewards == rewards[0]):
        return np.zeros_like(rewards)
    return centered / max(float(rewards.std()), std_floor)


def clipped_surrogate(ratio, advantage, eps: float):
    return np.minimum(ratio * advantage, np.clip(ratio, 1.0 - eps, 1.0 + eps) * advantage)


def token_ratio(logp_new, logp_old):
    return np.exp(np.asarray(logp_new, dtype=float) - np.asarray(logp_old, dtype=float))


def kl_token(logp_ref, logp_new):
    """Nonnegative per-token KL estimate ``exp(d) - d - 1`` with ``d = ref - new``."""
    delta = np.asarray(logp_ref, dtype=float) - np.asarray(logp_new, dtype=float)
    return np.expm1(delta) - delta


def sft_loss(logp_gt_tokens, reduction: str = "sum") -> float:
    """Negative log-likelihood of a ground-truth sequence ("sum" or per-token "mean")."""
    lp = np.asarray(logp_gt_tokens, dtype=float)
    if lp.size == 0:
        raise ValueError("sft_loss needs at least one token")
    if reduction == "sum":
        return float(-lp.sum())
    if reduction == "mean":
        return float(-lp.mean())
    raise ValueError(f"unknown reduction {reduction!r}")


@dataclass
class TokenTerms:
    """Flattened per-token pieces of the GRPO objective for a set of samples."""

    loss: np.ndarray        # per-token loss before normalization
    grad: np.ndarray        # d loss / d logp_new, per token, before normalization
    ratio: np.ndarray
    kl: np.ndarray
    clipped: np.ndarray     # True where the clipped branch is active and binding


def token_terms(logp_new, logp_old, logp_ref, advantages, cfg: GRPOConfig) -> TokenTerms:
    logp_new = np.asarray(logp_new, dtype=float)
    adv = np.asarray(advantages, dtype=float)
    ratio = token_ratio(logp_new, logp_old)
    lo, hi = 1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps
    unclipped = ratio * adv
    clipped = np.clip(ratio, lo, hi) * adv
    surrogate = np.minimum(unclipped, clipped)
    # gradient flows through r only where the unclipped term is the minimum
    binding = clipped < unclipped
    d_surrogate = np.where(binding, 0.0, unclipped)

    delta = np.asarray(logp_ref, dtype=float) - logp_new
    kl = np.expm1(delta) - delta
    d_kl = -np.expm1(delta)

    beta = cfg.kl_beta
    loss = -surrogate + beta * kl if beta else -surrogate
    grad = -d_surrogate + beta * d_kl if beta else -d_surrogate
    return TokenTerms(loss=loss, grad=grad, ratio=ratio, kl=kl, clipped=binding)


GroupLike = Union[RolloutGroup, Sequence[RolloutGroup]]


def _as_groups(groups: GroupLike) -> list[RolloutGroup]:
    return [groups] if isinstance(groups, RolloutGroup) else list(groups)


def _samples(groups: GroupLike, cfg: GRPOConfig):
    """Flatten groups into per-sample tuples (logp_new, logp_old, logp_ref, advantage)."""
    out = []
    for g in _as_groups(groups):
        adv = g.advantages
        if adv is None:
            adv = group_advantages(g.rewards, cfg.advantage_std_floor)
        for k in range(g.group_size):
            out.append((g.logp_new[k], g.logp_old[k], g.logp_ref[k], float(adv[k])))
    return out


def _chunk_sum(samples, idx, cfg: GRPOConfig):
    new = np.concatenate([samples[k][0] for k in idx])
    old = np.concatenate([samples[k][1] for k in idx])
    ref = np.concatenate([samples[k][2] for k in idx])
    adv = np.concatenate([np.full(len(samples[k][0]), samples[k][3]) for k in idx])
    terms = token_terms(new, old, ref, adv, cfg)
    return float(terms.loss.sum()), terms.grad


def grpo_loss(groups: GroupLike, cfg: GRPOConfig) -> tuple[float, list[np.ndarray]]:
    """Token-mean GRPO loss and its gradient w.r.t. every sample's ``logp_new``.

    ``groups`` may be one group or a batch of groups; gradients come back as one
    array per sample in flattening order.
    """
    samples = _samples(groups, cfg)
    n_tokens = sum(len(s[0]) for s in samples)
    total, grad = _chunk_sum(samples, range(len(samples)), cfg)
    inv = 1.0 / n_tokens
    splits = np.cumsum([len(s[0]) for s in samples])[:-1]
    return total * inv, [g * inv for g in np.split(grad, splits)]


def partition_indices(k: int, micro_chunk: int) -> list[list[int]]:
    """Contiguous chunks of at most ``micro_chunk`` sample indices."""
    if micro_chunk < 1:
        raise ValueError("micro_chunk must be >= 1")
    return [list(range(s, min(s + micro_chunk, k))) for s in range(0, k, micro_chunk)]


def chunked_loss(groups: GroupLike, cfg: GRPOConfig,
                 partition: Optional[Sequence[Sequence[int]]] = None) -> tuple[float, list[np.ndarray]]:
    """Same value and gradients as :func:`grpo_loss`, accumulated chunk by chunk.

    Sample indices ``0..K-1`` are split into disjoint chunks ``C_m`` (by default
    of size ``cfg.micro_chunk``). Each chunk contributes ``(|C_m|/K) * L_m``
    where ``L_m = K / (|C_m| N) * sum_{k in C_m} sum_t loss_kt``, so the
    accumulated objective is the token mean over all N tokens. Only one chunk's
    token arrays are alive at a time.
    """
    samples = _samples(groups, cfg)
    k_total = len(samples)
    if partition is None:
        partition = partition_indices(k_total, cfg.micro_chunk)
    flat = sorted(i for chunk in partition for i in chunk)
    if flat != list(range(k_total)):
        raise ValueError("partition must cover every sample index exactly once")
    n_tokens = sum(len(s[0]) for s in samples)

    loss = 0.0
    grads: list[Optional[np.ndarray]] = [None] * k_total
    for chunk in partition:
        if not chunk:
            continue
        size = len(chunk)
        weight = size / k_total
        scale = k_total / (size * n_tokens)
        chunk_sum, chunk_grad = _chunk_sum(samples, chunk, cfg)
        loss += weight * (scale * chunk_sum)
        offset = 0
        for k in chunk:
            t = len(samples[k][0])
            grads[k] = weight * scale * chunk_grad[offset:offset + t]
            offset += t
    return loss, grads
