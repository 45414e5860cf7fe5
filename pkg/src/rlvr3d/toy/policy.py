"""Per-prompt categorical sequence policy with exact logit gradients.

Each prompt owns a logit table of shape (positions, vocab); positions are
sampled independently, so ``d logp(y_t) / d logits[t] = onehot(y_t) - softmax``.
Vocabulary sizes can differ per position and per prompt; unused entries are
masked out.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from ..evaluation import MetricReport, eval_detection, eval_grounding, eval_reasoning
from ..grpo import GRPOConfig, RolloutGroup, chunked_loss, group_advantages, token_terms
from ..parsing import TaskKind
from .tasks import SyntheticTask, parse_or_none


class CategoricalSeqPolicy:
    def __init__(self, vocab_sizes: Sequence[Sequence[int]], logits: Optional[np.ndarray] = None):
        self.vocab_sizes = [list(map(int, v)) for v in vocab_sizes]
        n = len(self.vocab_sizes)
        n_pos = max(len(v) for v in self.vocab_sizes)
        n_voc = max(max(v) for v in self.vocab_sizes)
        self.lengths = np.array([len(v) for v in self.vocab_sizes])
        self.mask = np.zeros((n, n_pos, n_voc), dtype=bool)
        for p, sizes in enumerate(self.vocab_sizes):
            for t, size in enumerate(sizes):
                self.mask[p, t, :size] = True
        if logits is None:
            logits = np.zeros(self.mask.shape)
        self.logits = np.array(logits, dtype=float)
        if self.logits.shape != self.mask.shape:
            raise ValueError(f"logits shape {self.logits.shape} != {self.mask.shape}")

    @classmethod
    def for_task(cls, task: SyntheticTask) -> "CategoricalSeqPolicy":
        return cls([ep.vocab for ep in task.episodes])

    @property
    def n_prompts(self) -> int:
        return len(self.vocab_sizes)

    def copy(self) -> "CategoricalSeqPolicy":
        return CategoricalSeqPolicy(self.vocab_sizes, self.logits.copy())

    def log_probs(self, prompt: int) -> np.ndarray:
        """(T, V) log-softmax table for one prompt; masked entries are -inf."""
        t = self.lengths[prompt]
        z = np.where(self.mask[prompt, :t], self.logits[prompt, :t], -np.inf)
        z = z - z.max(axis=1, keepdims=True)
        return z - np.log(np.exp(z).sum(axis=1, keepdims=True))

    def probs(self, prompt: int) -> np.ndarray:
        return np.exp(self.log_probs(prompt))

    def sample(self, prompt: int, n: int, rng) -> np.ndarray:
        """``n`` ancestral samples, shape (n, T), by inverse-CDF on uniform draws."""
        rng = np.random.default_rng(rng)
        probs = self.probs(prompt)
        cdf = np.cumsum(probs, axis=1)
        u = rng.random((n, probs.shape[0]))
        tokens = (u[:, :, None] >= cdf[None, :, :]).sum(axis=2)
        sizes = np.array(self.vocab_sizes[prompt])
        return np.minimum(tokens, sizes - 1)

    def sequence_logp(self, prompt: int, tokens: np.ndarray) -> np.ndarray:
        lp = self.log_probs(prompt)
        tokens = np.atleast_2d(tokens)
        return lp[np.arange(lp.shape[0])[None, :], tokens]

    def greedy(self, prompt: int) -> np.ndarray:
        return np.argmax(self.log_probs(prompt), axis=1)

    def logit_grad(self, prompt: int, tokens: np.ndarray, token_grads: np.ndarray) -> np.ndarray:
        """Chain ``dL/dlogp(y_t)`` of each sample into ``dL/dlogits[prompt]``."""
        tokens = np.atleast_2d(tokens)
        token_grads = np.atleast_2d(token_grads)
        probs = self.probs(prompt)
        t = probs.shape[0]
        grad = np.zeros(self.logits.shape[1:])
        grad[:t] -= token_grads.sum(axis=0)[:, None] * probs
        rows = np.broadcast_to(np.arange(t), tokens.shape)
        np.add.at(grad, (rows, tokens), token_grads)
        return grad


def sample_group(policy: CategoricalSeqPolicy, task: SyntheticTask, prompt: int, group_size: int,
                 rng, reference: Optional[CategoricalSeqPolicy] = None) -> RolloutGroup:
    """Sample, render and score ``group_size`` responses for one prompt.

    Old log-probs come from ``policy`` (the sampler); reference log-probs from
    ``reference`` (``policy`` itself when not given).
    """
    if group_size < 2:
        raise ValueError("group_size must be >= 2")
    tokens = policy.sample(prompt, group_size, rng)
    logp_old = policy.sequence_logp(prompt, tokens)
    logp_ref = (reference or policy).sequence_logp(prompt, tokens)
    texts, breakdowns = [], []
    for seq in tokens:
        text, breakdown = task.score_tokens(prompt, seq)
        texts.append(text)
        breakdowns.append(breakdown)
    return RolloutGroup(
        sequences=list(tokens),
        rewards=[b.total for b in breakdowns],
        logp_old=list(logp_old),
        logp_ref=list(logp_ref),
        prompt_id=prompt,
        texts=texts,
        breakdowns=breakdowns,
    )


def _apply_token_grads(policy, groups, grads, lr):
    updates: dict[int, np.ndarray] = {}
    k = 0
    for g in groups:
        tok = np.stack(g.sequences)
        gr = np.stack(grads[k:k + g.group_size])
        k += g.group_size
        step = policy.logit_grad(g.prompt_id, tok, gr)
        updates[g.prompt_id] = updates.get(g.prompt_id, 0.0) + step
    for p, step in updates.items():
        policy.logits[p] -= lr * step


def grpo_step(policy: CategoricalSeqPolicy, task: SyntheticTask, prompts: Sequence[int], cfg: GRPOConfig,
              lr: float, rng, reference: Optional[CategoricalSeqPolicy] = None,
              n_updates: int = 1) -> tuple[CategoricalSeqPolicy, dict]:
    """Sample one group per prompt, then take ``n_updates`` descent steps on the chunked loss.

    The policy is updated in place and returned with step metrics.
    """
    rng = np.random.default_rng(rng)
    groups = [sample_group(policy, task, p, cfg.group_size, rng, reference) for p in prompts]
    for g in groups:
        g.advantages = group_advantages(g.rewards, cfg.advantage_std_floor)

    clip_hits = kl_sum = 0.0
    n_tokens = sum(sum(g.lengths) for g in groups)
    loss = 0.0
    for _ in range(n_updates):
        for g in groups:
            tok = np.stack(g.sequences)
            g.logp_new = list(policy.sequence_logp(g.prompt_id, tok))
        loss, grads = chunked_loss(groups, cfg)
        _apply_token_grads(policy, groups, grads, lr)

    # diagnostics at the sampling point of the final update
    for g in groups:
        adv = np.repeat(g.advantages, g.lengths)
        terms = token_terms(np.concatenate(g.logp_new), np.concatenate(g.logp_old),
                            np.concatenate(g.logp_ref), adv, cfg)
        clip_hits += float(terms.clipped.sum())
        kl_sum += float(terms.kl.sum())

    breakdowns = [b for g in groups for b in g.breakdowns]
    components: dict[str, float] = {}
    for b in breakdowns:
        for name, value in b.components.items():
            components[name] = components.get(name, 0.0) + value
    metrics = {
        "loss": float(loss),
        "mean_reward": float(np.mean([b.total for b in breakdowns])),
        "format": float(np.mean([b.format for b in breakdowns])),
        "components": {k: v / len(breakdowns) for k, v in components.items()},
        "kl": kl_sum / n_tokens,
        "clip_fraction": clip_hits / n_tokens,
    }
    return policy, metrics


def sft_step(policy: CategoricalSeqPolicy, batch: Sequence[tuple[int, np.ndarray]], lr: float) -> float:
    """One descent step on the mean per-sequence negative log-likelihood; returns the loss."""
    loss = 0.0
    grads: dict[int, np.ndarray] = {}
    for prompt, target in batch:
        target = np.asarray(target)
        loss -= float(policy.sequence_logp(prompt, target).sum())
        # d(-sum logp)/dlogits = softmax - onehot
        g = policy.logit_grad(prompt, target, -np.ones((1, len(target))))
        grads[prompt] = grads.get(prompt, 0.0) + g
    n = len(batch)
    for prompt, g in grads.items():
        policy.logits[prompt] -= lr * g / n
    return loss / n


def decode_all(policy: CategoricalSeqPolicy, task: SyntheticTask, greedy: bool = True, rng=None,
               prompts: Optional[Sequence[int]] = None) -> dict[str, object]:
    """Decode and parse one response per episode; returns payloads keyed by episode id."""
    rng = np.random.default_rng(rng)
    prompts = range(len(task)) if prompts is None else prompts
    out = {}
    for p in prompts:
        tokens = policy.greedy(p) if greedy else policy.sample(p, 1, rng)[0]
        text, _ = task.score_tokens(p, tokens)
        out[task.episodes[p].episode_id] = parse_or_none(text, task.kind)
    return out


def evaluate(policy: CategoricalSeqPolicy, task: SyntheticTask, greedy: bool = True, rng=None,
             prompts: Optional[Sequence[int]] = None) -> MetricReport:
    preds = decode_all(policy, task, greedy, rng, prompts)
    eps = {ep.episode_id: ep for ep in task.episodes}
    gts = {k: eps[k].gt for k in preds}
    if task.kind is TaskKind.DETECTION:
        return eval_detection(preds, gts, task.tau_f1)
    if task.kind is TaskKind.GROUNDING:
        return eval_grounding(preds, gts, task.scenes)
    return eval_reasoning(preds, gts)


HEADLINE = {"detection": "f1", "grounding": "acc@0.25", "reasoning": "accuracy"}


def headline_metric(report: MetricReport) -> float:
    return report.metrics[HEADLINE[report.task]]
