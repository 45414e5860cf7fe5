"""Two-stage SFT warm-up then GRPO fine-tuning, as a scikit-learn style estimator."""

from __future__ import annotations

import logging
import time
from typing import Callable, Optional

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from ..evaluation import MetricReport
from ..grpo import GRPOConfig
from ..parsing import TaskKind
from .policy import CategoricalSeqPolicy, decode_all, evaluate, grpo_step, headline_metric, sft_step
from .tasks import SyntheticTask

log = logging.getLogger(__name__)


def check_task(task) -> SyntheticTask:
    if not isinstance(task, SyntheticTask):
        raise TypeError(f"expected a SyntheticTask, got {type(task).__name__}")
    if len(task) < 1:
        raise ValueError("task has no episodes")
    return task


class ToyGRPO(BaseEstimator):
    """SFT on a fraction of the episodes, then GRPO on all of them.

    ``fit`` leaves ``policy_`` (final), ``warm_policy_`` (after SFT),
    ``warm_report_`` / ``report_`` (greedy evaluations) and ``history_`` (one
    metrics dict per step, SFT steps first).

    Parameters mirror the ``train-toy`` CLI flags. ``kl_beta=None`` picks 0.04
    for detection and grounding and 0 for reasoning. ``batch_size`` prompts are
    drawn per GRPO step by walking seeded permutations of the episodes.
    """

    def __init__(self, sft_steps=500, sft_fraction=0.2, sft_lr=20.0, grpo_steps=2000,
                 batch_size=16, group_size=8, clip_eps=0.2, kl_beta=None, micro_chunk=4,
                 lr=200.0, n_updates=1, eval_every=0, seed=0):
        self.sft_steps = sft_steps
        self.sft_fraction = sft_fraction
        self.sft_lr = sft_lr
        self.grpo_steps = grpo_steps
        self.batch_size = batch_size
        self.group_size = group_size
        self.clip_eps = clip_eps
        self.kl_beta = kl_beta
        self.micro_chunk = micro_chunk
        self.lr = lr
        self.n_updates = n_updates
        self.eval_every = eval_every
        self.seed = seed

    def _config(self, task: SyntheticTask) -> GRPOConfig:
        beta = self.kl_beta
        if beta is None:
            beta = 0.0 if task.kind is TaskKind.REASONING else 0.04
        return GRPOConfig(clip_eps=self.clip_eps, kl_beta=beta,
                          group_size=self.group_size, micro_chunk=self.micro_chunk)

    def resolve_config(self, task) -> GRPOConfig:
        """Validate hyperparameters and build the GRPO config for ``task``."""
        if not 0.0 <= self.sft_fraction <= 1.0:
            raise ValueError("sft_fraction must lie in [0, 1]")
        if self.sft_steps < 0 or self.grpo_steps < 0:
            raise ValueError("step counts must be nonnegative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lr < 0 or self.sft_lr < 0:
            raise ValueError("learning rates must be nonnegative")
        return self._config(task)

    def fit(self, task: SyntheticTask, y=None, callback: Optional[Callable[[dict], None]] = None):
        task = check_task(task)
        cfg = self.resolve_config(task)
        # separate streams: SFT subset choice, prompt order, rollouts
        ss = np.random.SeedSequence(self.seed)
        subset_rng, order_rng, rollout_rng = (np.random.default_rng(s) for s in ss.spawn(3))
        n = len(task)
        policy = CategoricalSeqPolicy.for_task(task)
        self.history_: list[dict] = []

        def record(entry):
            self.history_.append(entry)
            if callback is not None:
                callback(entry)

        n_sft = int(round(self.sft_fraction * n))
        self.sft_prompts_ = np.sort(subset_rng.permutation(n)[:n_sft])
        batch = [(int(p), task.encode(int(p))) for p in self.sft_prompts_]
        t0 = time.perf_counter()
        for step in range(self.sft_steps if batch else 0):
            loss = sft_step(policy, batch, self.sft_lr)
            record({"phase": "sft", "step": step, "sft_loss": loss})
        self.warm_policy_ = policy.copy()
        self.warm_report_ = evaluate(policy, task)
        log.info("sft done in %.1fs: %s", time.perf_counter() - t0, self.warm_report_.metrics)

        reference = policy.copy()
        order: list[int] = []
        for step in range(self.grpo_steps):
            prompts = []
            while len(prompts) < min(self.batch_size, n):
                if not order:
                    order = order_rng.permutation(n).tolist()
                prompts.append(order.pop())
            policy, metrics = grpo_step(policy, task, prompts, cfg, self.lr, rollout_rng,
                                        reference=reference, n_updates=self.n_updates)
            entry = {"phase": "grpo", "step": step, **metrics}
            if self.eval_every and (step + 1) % self.eval_every == 0:
                entry["eval"] = evaluate(policy, task).metrics
            record(entry)
        self.policy_ = policy
        self.report_ = evaluate(policy, task)
        log.info("grpo done in %.1fs: %s", time.perf_counter() - t0, self.report_.metrics)
        return self

    def _check_fitted(self):
        if not hasattr(self, "policy_"):
            raise NotFittedError("ToyGRPO is not fitted yet; call fit() first")

    def predict(self, task: SyntheticTask) -> dict[str, object]:
        """Greedy-decoded payloads keyed by episode id (None when unparseable)."""
        self._check_fitted()
        return decode_all(self.policy_, check_task(task))

    def evaluate(self, task: SyntheticTask) -> MetricReport:
        self._check_fitted()
        return evaluate(self.policy_, check_task(task))

    def score(self, task: SyntheticTask, y=None) -> float:
        """Headline metric: detection F1, grounding Acc@0.25, reasoning accuracy."""
        return headline_metric(self.evaluate(task))
