"""Verifiable task rewards for detection, grounding and reasoning.

Every reward is a deterministic function of the response text and the ground
truth. Totals are the unweighted sum of the binary format reward and the task
components, so detection and grounding top out at 3 and reasoning at 2.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Sequence, Union

from .geometry import Box9DoF, RigidTransform, iou3d, transform_box
from .parsing import (
    ChoiceAnswer,
    DetectedObject,
    DetectionAnswer,
    FormatError,
    GroundingAnswer,
    NumericAnswer,
    StructuredResponse,
    TaskKind,
    parse_response,
)

TAU_F1 = 0.25
TAU_FRAME = 5


class FrameOutOfRange(ValueError):
    pass


@dataclass
class RewardBreakdown:
    format: float
    components: dict[str, float] = field(default_factory=dict)

    @property
    def total(self) -> float:
        return self.format + sum(self.components.values())

    def to_dict(self) -> dict:
        return {"format": self.format, "components": dict(self.components), "total": self.total}


@dataclass
class MatchResult:
    tp: int
    fp: int
    fn: int
    pairs: list[tuple[int, int, float]] = field(default_factory=list)


@dataclass(frozen=True)
class SceneMeta:
    """Per-frame camera-to-global extrinsics plus the scene axis alignment."""

    scene_id: str
    extrinsics: tuple[RigidTransform, ...]
    align: RigidTransform

    @property
    def frame_count(self) -> int:
        return len(self.extrinsics)

    def frame_to_aligned(self, frame_index: int) -> RigidTransform:
        if not 0 <= frame_index < self.frame_count:
            raise FrameOutOfRange(f"frame {frame_index} not in [0, {self.frame_count})")
        return self.align @ self.extrinsics[frame_index]

    @classmethod
    def from_record(cls, record: Mapping) -> "SceneMeta":
        extrinsics = tuple(RigidTransform(m) for m in record["extrinsics"])
        if "frame_count" in record and record["frame_count"] != len(extrinsics):
            raise ValueError(
                f"scene {record.get('scene_id')}: frame_count {record['frame_count']} "
                f"!= {len(extrinsics)} extrinsics"
            )
        return cls(str(record["scene_id"]), extrinsics, RigidTransform(record["align"]))

    def to_record(self) -> dict:
        return {
            "scene_id": self.scene_id,
            "frame_count": self.frame_count,
            "extrinsics": [m.to_list() for m in self.extrinsics],
            "align": self.align.to_list(),
        }


@dataclass(frozen=True)
class GroundingTarget:
    """Ground truth for grounding: target frame and box in the aligned global frame."""

    frame_index: int
    box: Box9DoF
    scene_id: Optional[str] = None


ObjectLike = Union[DetectedObject, tuple[str, Box9DoF]]


def as_objects(items: Iterable[ObjectLike]) -> list[tuple[str, Box9DoF]]:
    out = []
    for item in items:
        if isinstance(item, DetectedObject):
            out.append((item.category, item.box))
        else:
            category, box = item
            out.append((category, box))
    return out


def _iou_table(preds, gts) -> list[list[float]]:
    # category-aware: cross-category pairs never overlap
    return [[iou3d(pb, gb) if pc == gc else 0.0 for gc, gb in gts] for pc, pb in preds]


def avg_iou_reward(preds: Sequence[ObjectLike], gts: Sequence[ObjectLike]) -> float:
    """Mean over predictions of the best IoU against a same-category gt box."""
    preds, gts = as_objects(preds), as_objects(gts)
    if not preds:
        return 0.0
    table = _iou_table(preds, gts)
    return sum(max(row, default=0.0) for row in table) / len(preds)


def match_f1(preds: Sequence[ObjectLike], gts: Sequence[ObjectLike], tau: float = TAU_F1,
             ious: Optional[Sequence[Sequence[float]]] = None) -> MatchResult:
    """Greedy one-to-one matching by descending IoU, keeping pairs with IoU > tau.

    Ties break toward the lower prediction index, then the lower gt index.
    """
    if not 0.0 < tau < 1.0:
        raise ValueError(f"tau must lie in (0, 1), got {tau}")
    preds, gts = as_objects(preds), as_objects(gts)
    table = ious if ious is not None else _iou_table(preds, gts)
    candidates = [
        (-table[i][j], i, j)
        for i in range(len(preds)) for j in range(len(gts))
        if table[i][j] > tau
    ]
    candidates.sort()
    used_p, used_g = set(), set()
    pairs = []
    for neg_iou, i, j in candidates:
        if i in used_p or j in used_g:
            continue
        used_p.add(i)
        used_g.add(j)
        pairs.append((i, j, -neg_iou))
    tp = len(pairs)
    return MatchResult(tp=tp, fp=len(preds) - tp, fn=len(gts) - tp, pairs=pairs)


def f1_reward(match: Union[MatchResult, int], fp: Optional[int] = None,
              fn: Optional[int] = None) -> float:
    """``2TP / (2TP + FP + FN)``; accepts a MatchResult or three counts.

    Both sides empty counts as perfect agreement (1.0).
    """
    if isinstance(match, MatchResult):
        tp, fp, fn = match.tp, match.fp, match.fn
    else:
        tp = match
        if fp is None or fn is None:
            raise TypeError("f1_reward(tp, fp, fn) needs all three counts")
    denom = 2 * tp + fp + fn
    if denom == 0:
        return 1.0
    return 2 * tp / denom


def _parsed(response, task: TaskKind, frame_count=None) -> Optional[StructuredResponse]:
    if isinstance(response, StructuredResponse):
        return response
    try:
        return parse_response(response, task, frame_count)
    except FormatError:
        return None


def detection_reward(response, gts: Sequence[ObjectLike], tau_f1: float = TAU_F1) -> RewardBreakdown:
    parsed = _parsed(response, TaskKind.DETECTION)
    if parsed is None or not isinstance(parsed.payload, DetectionAnswer):
        return RewardBreakdown(0.0, {"iou_avg": 0.0, "f1": 0.0})
    preds, gts = as_objects(parsed.payload.objects), as_objects(gts)
    table = _iou_table(preds, gts)
    iou_avg = sum(max(row, default=0.0) for row in table) / len(preds) if preds else 0.0
    f1 = f1_reward(match_f1(preds, gts, tau_f1, ious=table))
    return RewardBreakdown(1.0, {"iou_avg": iou_avg, "f1": f1})


def frame_reward(f_pred: int, f_gt: int, tau_frame: int = TAU_FRAME) -> float:
    if tau_frame < 1:
        raise ValueError("tau_frame must be >= 1")
    return max(0.0, 1.0 - abs(f_pred - f_gt) / tau_frame)


def aligned_prediction(answer: GroundingAnswer, scene: SceneMeta) -> Box9DoF:
    """Predicted local box carried into the aligned global frame."""
    return transform_box(answer.box, scene.frame_to_aligned(answer.frame_index))


def grounding_iou_reward(answer: GroundingAnswer, scene: SceneMeta, gt_box: Box9DoF) -> float:
    try:
        pred = aligned_prediction(answer, scene)
    except FrameOutOfRange:
        return 0.0
    return iou3d(pred, gt_box)


def grounding_reward(response, scene: SceneMeta, gt: GroundingTarget,
                     tau_frame: int = TAU_FRAME) -> RewardBreakdown:
    parsed = _parsed(response, TaskKind.GROUNDING)
    if parsed is None or not isinstance(parsed.payload, GroundingAnswer):
        return RewardBreakdown(0.0, {"frame": 0.0, "iou_grd": 0.0})
    answer = parsed.payload
    return RewardBreakdown(1.0, {
        "frame": frame_reward(answer.frame_index, gt.frame_index, tau_frame),
        "iou_grd": grounding_iou_reward(answer, scene, gt.box),
    })


def mc_reward(pred: Union[ChoiceAnswer, str], gt: Union[ChoiceAnswer, str]) -> float:
    p = pred.choice if isinstance(pred, ChoiceAnswer) else str(pred).strip().upper()
    g = gt.choice if isinstance(gt, ChoiceAnswer) else str(gt).strip().upper()
    return 1.0 if p == g else 0.0


def mra_reward(pred: float, gt: float) -> float:
    """Mean relative accuracy over thresholds 0.50, 0.55, ..., 0.95.

    A threshold ``k/20`` passes when ``|pred - gt| / |gt| < 1 - k/20``; the
    comparison is done multiplied through by 20|gt| so the grid is exact.
    ``gt == 0`` falls back to exact match.
    """
    pred, gt = float(pred), float(gt)
    if gt == 0.0:
        return 1.0 if pred == 0.0 else 0.0
    err = 20.0 * abs(pred - gt)
    passed = sum(1 for k in range(10, 20) if err < (20 - k) * abs(gt))
    return passed / 10


def accuracy_reward(pred: Union[ChoiceAnswer, NumericAnswer, None],
                    gt: Union[ChoiceAnswer, NumericAnswer]) -> float:
    """Dispatch exact match or MRA by the ground-truth question type."""
    if isinstance(gt, ChoiceAnswer):
        return mc_reward(pred, gt) if isinstance(pred, ChoiceAnswer) else 0.0
    if isinstance(gt, NumericAnswer):
        return mra_reward(pred.value, gt.value) if isinstance(pred, NumericAnswer) else 0.0
    raise TypeError(f"unsupported reasoning ground truth {type(gt).__name__}")


def reasoning_reward(response, gt: Union[ChoiceAnswer, NumericAnswer]) -> RewardBreakdown:
    parsed = _parsed(response, TaskKind.REASONING)
    if parsed is None:
        return RewardBreakdown(0.0, {"acc": 0.0})
    return RewardBreakdown(1.0, {"acc": accuracy_reward(parsed.payload, gt)})
