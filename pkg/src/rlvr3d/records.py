"""Episode and scene records: the JSON-lines interchange format.

Episode records carry ``episode_id``, ``task``, ``prompt`` and either a model
``response`` (prediction files) or a ``gt`` payload (ground-truth files);
grounding episodes also name their ``scene_ref``. Scene records carry
``scene_id``, ``frame_count``, ``extrinsics`` (camera to global, one 16-number
row-major matrix per frame) and ``align``. Lengths are meters, angles radians.
Unknown fields are ignored with a warning.
"""

from __future__ import annotations

import logging
from pathlib import Path
from typing import Mapping, Optional, Union

from .io import read_jsonl
from .geometry import Box9DoF
from .parsing import ChoiceAnswer, FormatError, NumericAnswer, Payload, TaskKind, parse_response
from .rewards import (
    TAU_F1,
    TAU_FRAME,
    GroundingTarget,
    RewardBreakdown,
    SceneMeta,
    detection_reward,
    grounding_reward,
    reasoning_reward,
)

log = logging.getLogger(__name__)

EPISODE_FIELDS = frozenset(
    {"episode_id", "task", "prompt", "response", "gt", "scene_ref", "options", "demo", "vocab"})
SCENE_FIELDS = frozenset({"scene_id", "frame_count", "extrinsics", "align"})

PathLike = Union[str, Path]


def gt_to_json(gt) -> dict:
    if isinstance(gt, ChoiceAnswer):
        return {"question_type": "mc", "answer": gt.choice}
    if isinstance(gt, NumericAnswer):
        return {"question_type": "numeric", "answer": gt.value}
    raise TypeError(f"not a reasoning ground truth: {gt!r}")


def gt_from_json(kind, data: dict, scene_ref: Optional[str] = None):
    """Ground truth object from the ``gt`` field of an episode record."""
    kind = TaskKind(kind)
    if kind is TaskKind.DETECTION:
        objects = []
        for o in data["objects"]:
            if not isinstance(o["category"], str):
                raise ValueError("object category must be a string")
            objects.append((o["category"], Box9DoF.from_array(o["bbox_3d"])))
        return objects
    if kind is TaskKind.GROUNDING:
        frame = data["frame_index"]
        if isinstance(frame, bool) or not isinstance(frame, int) or frame < 0:
            raise ValueError("gt frame_index must be a nonnegative integer")
        return GroundingTarget(frame, Box9DoF.from_array(data["bbox_3d"]), scene_ref)
    qtype = data.get("question_type")
    if qtype == "mc":
        return ChoiceAnswer(str(data["answer"]).strip().upper())
    if qtype == "numeric":
        return NumericAnswer(float(data["answer"]))
    raise ValueError(f"unknown question_type {qtype!r}")


def _warn_unknown(record: Mapping, known: frozenset, where: str):
    extra = sorted(set(record) - known)
    if extra:
        log.warning("%s: ignoring unknown fields %s", where, extra)


def _episode_records(path: PathLike, task: TaskKind, need: str):
    seen = set()
    for n, rec in enumerate(read_jsonl(path), 1):
        where = f"{path}:{n}"
        _warn_unknown(rec, EPISODE_FIELDS, where)
        eid = rec.get("episode_id")
        if not isinstance(eid, str) or not eid:
            raise ValueError(f"{where}: episode_id must be a nonempty string")
        if eid in seen:
            raise ValueError(f"{where}: duplicate episode_id {eid!r}")
        seen.add(eid)
        if "task" in rec and rec["task"] != task.value:
            raise ValueError(f"{where}: task {rec['task']!r} but --task is {task.value!r}")
        if need not in rec:
            raise ValueError(f"{where}: missing field {need!r}")
        yield where, eid, rec


def load_scenes(path: PathLike) -> dict[str, SceneMeta]:
    scenes = {}
    for n, rec in enumerate(read_jsonl(path), 1):
        where = f"{path}:{n}"
        _warn_unknown(rec, SCENE_FIELDS, where)
        try:
            scene = SceneMeta.from_record(rec)
        except KeyError as exc:
            raise ValueError(f"{where}: missing field {exc.args[0]!r}") from None
        except ValueError as exc:
            raise ValueError(f"{where}: {exc}") from None
        if scene.scene_id in scenes:
            raise ValueError(f"{where}: duplicate scene_id {scene.scene_id!r}")
        scenes[scene.scene_id] = scene
    return scenes


def load_ground_truth(path: PathLike, task) -> dict[str, object]:
    """Ground truths keyed by episode id, in file order."""
    task = TaskKind(task)
    out = {}
    for where, eid, rec in _episode_records(path, task, "gt"):
        scene_ref = rec.get("scene_ref")
        if task is TaskKind.GROUNDING and not isinstance(scene_ref, str):
            raise ValueError(f"{where}: grounding records need a string scene_ref")
        try:
            out[eid] = gt_from_json(task, rec["gt"], scene_ref)
        except (KeyError, TypeError, ValueError) as exc:
            raise ValueError(f"{where}: bad gt payload ({exc})") from None
    return out


def load_responses(path: PathLike, task) -> dict[str, str]:
    """Raw response strings keyed by episode id, in file order."""
    task = TaskKind(task)
    out = {}
    for where, eid, rec in _episode_records(path, task, "response"):
        if not isinstance(rec["response"], str):
            raise ValueError(f"{where}: response must be a string")
        out[eid] = rec["response"]
    return out


def check_scenes(gts: Mapping[str, object], scenes: Mapping[str, SceneMeta]) -> list[str]:
    """Episode ids whose scene is not present."""
    return [eid for eid, gt in gts.items()
            if isinstance(gt, GroundingTarget) and gt.scene_id not in scenes]


def score_response(task, response: str, gt, scenes: Optional[Mapping[str, SceneMeta]] = None,
                   tau_f1: float = TAU_F1, tau_frame: int = TAU_FRAME) -> RewardBreakdown:
    task = TaskKind(task)
    if task is TaskKind.DETECTION:
        return detection_reward(response, gt, tau_f1)
    if task is TaskKind.GROUNDING:
        scene = (scenes or {}).get(gt.scene_id)
        if scene is None:
            raise ValueError(f"no scene {gt.scene_id!r} for grounding ground truth")
        return grounding_reward(response, scene, gt, tau_frame)
    return reasoning_reward(response, gt)


def parse_predictions(responses: Mapping[str, str], task) -> dict[str, Optional[Payload]]:
    """Parsed payloads keyed by episode id; unparseable responses become None."""
    out = {}
    for eid, text in responses.items():
        try:
            out[eid] = parse_response(text, task).payload
        except FormatError:
            out[eid] = None
    return out
