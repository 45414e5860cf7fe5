"""Benchmark-style metrics over whole corpora.

Detection: class-aware greedy matching per episode at IoU > tau, with TP/FP/FN
summed over the corpus (micro averaging) and per class. Grounding: accuracy at
IoU > 0.25 and > 0.5 after carrying each prediction into the aligned global
frame. Reasoning: exact match for multiple choice, MRA for numeric answers.

Conventions for empty denominators: precision 0 when nothing was predicted,
recall 0 when there was nothing to find, F1 0 when P + R = 0.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import asdict, dataclass, field
from typing import Mapping, Optional, Sequence, Union

from .parsing import ChoiceAnswer, DetectionAnswer, GroundingAnswer, NumericAnswer
from .rewards import (
    FrameOutOfRange,
    GroundingTarget,
    MatchResult,
    SceneMeta,
    TAU_F1,
    accuracy_reward,
    aligned_prediction,
    as_objects,
    match_f1,
)
from .geometry import iou3d

REPORT_SCHEMA_VERSION = 1
GROUNDING_THRESHOLDS = (0.25, 0.5)


class EpisodeMismatch(ValueError):
    pass


@dataclass
class ClassCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0

    def add(self, tp: int = 0, fp: int = 0, fn: int = 0):
        self.tp += tp
        self.fp += fp
        self.fn += fn

    @property
    def precision(self) -> float:
        return self.tp / (self.tp + self.fp) if self.tp + self.fp else 0.0

    @property
    def recall(self) -> float:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else 0.0

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        return 2 * p * r / (p + r) if p + r else 0.0

    def summary(self) -> dict:
        return {"tp": self.tp, "fp": self.fp, "fn": self.fn,
                "precision": self.precision, "recall": self.recall, "f1": self.f1}


@dataclass
class MetricReport:
    task: str
    episode_count: int
    metrics: dict[str, float] = field(default_factory=dict)
    counts: dict[str, int] = field(default_factory=dict)
    per_class: dict[str, dict] = field(default_factory=dict)
    flagged: list[str] = field(default_factory=list)

    def __getitem__(self, key: str) -> float:
        return self.metrics[key]

    def to_dict(self) -> dict:
        out = asdict(self)
        out["schema_version"] = REPORT_SCHEMA_VERSION
        return out


Corpus = Union[Mapping[str, object], Sequence[object]]


def _align(preds: Corpus, gts: Corpus) -> list[tuple[str, object, object]]:
    """Pair predictions with ground truths by episode id (or position for lists)."""
    if isinstance(preds, Mapping) != isinstance(gts, Mapping):
        raise EpisodeMismatch("preds and gts must both be mappings or both be sequences")
    if isinstance(gts, Mapping):
        if set(preds) != set(gts):
            missing = sorted(set(gts) - set(preds))[:5]
            extra = sorted(set(preds) - set(gts))[:5]
            raise EpisodeMismatch(f"episode ids differ (missing {missing}, extra {extra})")
        return [(str(k), preds[k], gts[k]) for k in sorted(gts, key=str)]
    if len(preds) != len(gts):
        raise EpisodeMismatch(f"{len(preds)} predictions for {len(gts)} episodes")
    return [(str(i), p, g) for i, (p, g) in enumerate(zip(preds, gts))]


def _detection_objects(item):
    if item is None:
        return []
    if isinstance(item, DetectionAnswer):
        return as_objects(item.objects)
    return as_objects(item)


def detection_counts(preds, gts, tau: float = TAU_F1) -> tuple[MatchResult, dict[str, ClassCounts]]:
    """Match one episode and split its TP/FP/FN by category."""
    p_objs, g_objs = _detection_objects(preds), _detection_objects(gts)
    match = match_f1(p_objs, g_objs, tau)
    per_class: dict[str, ClassCounts] = defaultdict(ClassCounts)
    matched_p = {i for i, _, _ in match.pairs}
    matched_g = {j for _, j, _ in match.pairs}
    for i, (cat, _) in enumerate(p_objs):
        per_class[cat].add(tp=int(i in matched_p), fp=int(i not in matched_p))
    for j, (cat, _) in enumerate(g_objs):
        if j not in matched_g:
            per_class[cat].add(fn=1)
    return match, per_class


def eval_detection(preds: Corpus, gts: Corpus, tau: float = TAU_F1) -> MetricReport:
    episodes = _align(preds, gts)
    micro = ClassCounts()
    classes: dict[str, ClassCounts] = defaultdict(ClassCounts)
    for _, pred, gt in episodes:
        match, per_class = detection_counts(pred, gt, tau)
        micro.add(match.tp, match.fp, match.fn)
        for cat, counts in per_class.items():
            classes[cat].add(counts.tp, counts.fp, counts.fn)
    per_class = {cat: classes[cat].summary() for cat in sorted(classes)}
    macro_f1 = sum(c["f1"] for c in per_class.values()) / len(per_class) if per_class else 0.0
    metrics = {
        "precision": micro.precision,
        "recall": micro.recall,
        "f1": micro.f1,
        "macro_f1": macro_f1,
    }
    counts = {"tp": micro.tp, "fp": micro.fp, "fn": micro.fn}
    return MetricReport("detection", len(episodes), metrics, counts, per_class)


def eval_grounding(preds: Corpus, gts: Corpus, scenes: Mapping[str, SceneMeta],
                   scene_refs: Optional[Mapping[str, str]] = None) -> MetricReport:
    """Grounding accuracy at IoU thresholds 0.25 and 0.5.

    The scene of an episode is ``gt.scene_id``, overridden by ``scene_refs``.
    Episodes with a missing scene, an out-of-range frame or no parseable
    prediction score IoU 0 and are listed in ``flagged``.
    """
    episodes = _align(preds, gts)
    ious, flagged = [], []
    for key, pred, gt in episodes:
        if not isinstance(gt, GroundingTarget):
            raise TypeError(f"episode {key}: ground truth must be a GroundingTarget")
        scene_id = (scene_refs or {}).get(key, gt.scene_id)
        scene = scenes.get(scene_id) if scene_id is not None else None
        iou = 0.0
        if scene is None:
            flagged.append(f"{key}: missing scene {scene_id!r}")
        elif not isinstance(pred, GroundingAnswer):
            flagged.append(f"{key}: no valid prediction")
        else:
            try:
                iou = iou3d(aligned_prediction(pred, scene), gt.box)
            except FrameOutOfRange as exc:
                flagged.append(f"{key}: {exc}")
        ious.append(iou)
    n = len(ious)
    metrics = {f"acc@{t}": (sum(i > t for i in ious) / n if n else 0.0) for t in GROUNDING_THRESHOLDS}
    metrics["mean_iou"] = sum(ious) / n if n else 0.0
    return MetricReport("grounding", n, metrics, flagged=flagged)


def eval_reasoning(preds: Corpus, gts: Corpus) -> MetricReport:
    episodes = _align(preds, gts)
    scores: dict[str, list[float]] = {"mc": [], "numeric": []}
    flagged = []
    for key, pred, gt in episodes:
        kind = "mc" if isinstance(gt, ChoiceAnswer) else "numeric"
        if not isinstance(gt, (ChoiceAnswer, NumericAnswer)):
            raise TypeError(f"episode {key}: unsupported reasoning ground truth")
        if pred is None:
            flagged.append(f"{key}: no valid prediction")
        elif type(pred) is not type(gt):
            flagged.append(f"{key}: answer type {type(pred).__name__} for {kind} question")
        scores[kind].append(accuracy_reward(pred, gt))
    everything = scores["mc"] + scores["numeric"]
    metrics = {
        "accuracy": sum(everything) / len(everything) if everything else 0.0,
        "mc_accuracy": sum(scores["mc"]) / len(scores["mc"]) if scores["mc"] else 0.0,
        "numeric_mra": sum(scores["numeric"]) / len(scores["numeric"]) if scores["numeric"] else 0.0,
    }
    counts = {"mc": len(scores["mc"]), "numeric": len(scores["numeric"])}
    return MetricReport("reasoning", len(episodes), metrics, counts, flagged=flagged)
