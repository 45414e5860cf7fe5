"""Synthetic detection, grounding and reasoning episodes on a coarse grid.

Each episode fixes the token layout its responses use. Box tokens are grid
indices: centers sit on cell centers of a cube of side ``extent`` around the
origin, sizes are whole multiples of the cell, yaw is ``k * pi / angle_levels``
and pitch/roll are zero. Ground truths are drawn from the same grid, so an
exact answer (and the maximum reward) is always reachable.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from ..geometry import Box9DoF, RigidTransform, iou3d, rotation_matrix, transform_box
from ..parsing import (
    ChoiceAnswer,
    DetectedObject,
    DetectionAnswer,
    FormatError,
    GroundingAnswer,
    NumericAnswer,
    Payload,
    TaskKind,
    parse_response,
    render_response,
)
from ..records import gt_from_json, gt_to_json
from ..rewards import (
    GroundingTarget,
    RewardBreakdown,
    SceneMeta,
    TAU_F1,
    TAU_FRAME,
    detection_reward,
    grounding_reward,
    reasoning_reward,
)

CATEGORIES = ("chair", "table", "sofa")
CHOICES = "ABCD"
THINK = "grid decode"
BOX_FIELDS = 7  # x, y, z, w, h, d, psi tokens per box


@dataclass(frozen=True)
class GridSpec:
    extent: float = 4.0
    cells: int = 8
    size_levels: int = 4
    angle_levels: int = 8

    @property
    def cell(self) -> float:
        return self.extent / self.cells

    def coord(self, i: int) -> float:
        return -self.extent / 2 + (i + 0.5) * self.cell

    def size(self, i: int) -> float:
        return (i + 1) * self.cell

    def angle(self, i: int) -> float:
        return i * math.pi / self.angle_levels

    def box_vocab(self) -> list[int]:
        c, s, a = self.cells, self.size_levels, self.angle_levels
        return [c, c, c, s, s, s, a]

    def decode_box(self, tok: Sequence[int]) -> Box9DoF:
        x, y, z, w, h, d, a = (int(t) for t in tok)
        return Box9DoF(self.coord(x), self.coord(y), self.coord(z),
                       self.size(w), self.size(h), self.size(d), self.angle(a), 0.0, 0.0)

    def encode_box(self, box: Box9DoF) -> list[int]:
        """Nearest grid tokens for a box (exact for boxes produced by decode_box)."""
        def nearest(value, fn, n):
            return min(range(n), key=lambda i: abs(fn(i) - value))
        c, s, a = self.cells, self.size_levels, self.angle_levels
        psi = box.psi % math.pi
        return [
            nearest(box.center_x, self.coord, c),
            nearest(box.center_y, self.coord, c),
            nearest(box.center_z, self.coord, c),
            nearest(box.size_w, self.size, s),
            nearest(box.size_h, self.size, s),
            nearest(box.size_d, self.size, s),
            nearest(psi, self.angle, a),
        ]

    def to_dict(self) -> dict:
        return {"extent": self.extent, "cells": self.cells,
                "size_levels": self.size_levels, "angle_levels": self.angle_levels}


@dataclass
class Episode:
    episode_id: str
    prompt: str
    gt: object                      # list of (category, box) | GroundingTarget | Choice/NumericAnswer
    demo: Payload                   # exact answer the policy should emit
    vocab: list[int]                # vocabulary size per token position
    scene: Optional[SceneMeta] = None
    options: Optional[list[str]] = None


@dataclass
class SyntheticTask:
    kind: TaskKind
    grid: GridSpec
    episodes: list[Episode]
    max_objects: int = 4
    tau_f1: float = TAU_F1
    tau_frame: int = TAU_FRAME
    _cache: dict = field(default_factory=dict, repr=False)

    def __len__(self) -> int:
        return len(self.episodes)

    @property
    def max_total(self) -> float:
        return 2.0 if self.kind is TaskKind.REASONING else 3.0

    @property
    def scenes(self) -> dict[str, SceneMeta]:
        return {e.scene.scene_id: e.scene for e in self.episodes if e.scene is not None}

    # -- token codec -------------------------------------------------------

    def decode(self, i: int, tokens: Sequence[int]) -> Payload:
        ep = self.episodes[i]
        tokens = [int(t) for t in tokens]
        if self.kind is TaskKind.DETECTION:
            objects = []
            for s in range(self.max_objects):
                slot = tokens[s * (BOX_FIELDS + 1):(s + 1) * (BOX_FIELDS + 1)]
                if slot[0] == 0:
                    continue
                objects.append(DetectedObject(CATEGORIES[slot[0] - 1], self.grid.decode_box(slot[1:])))
            return DetectionAnswer(tuple(objects))
        if self.kind is TaskKind.GROUNDING:
            return GroundingAnswer(tokens[0], self.grid.decode_box(tokens[1:]))
        if len(ep.vocab) == 1:
            return ChoiceAnswer(CHOICES[tokens[0]])
        return NumericAnswer(float(10 * tokens[0] + tokens[1]))

    def encode(self, i: int, payload: Optional[Payload] = None) -> np.ndarray:
        """Token sequence for ``payload`` (default: the episode's demonstration)."""
        ep = self.episodes[i]
        payload = ep.demo if payload is None else payload
        if self.kind is TaskKind.DETECTION:
            tokens = []
            for obj in payload.objects[:self.max_objects]:
                tokens += [CATEGORIES.index(obj.category) + 1] + self.grid.encode_box(obj.box)
            tokens += [0] * (len(ep.vocab) - len(tokens))
        elif self.kind is TaskKind.GROUNDING:
            tokens = [payload.frame_index] + self.grid.encode_box(payload.box)
        elif isinstance(payload, ChoiceAnswer):
            tokens = [CHOICES.index(payload.choice)]
        else:
            v = int(round(payload.value))
            tokens = [v // 10, v % 10]
        return np.array(tokens, dtype=np.int64)

    def render(self, i: int, tokens: Sequence[int]) -> str:
        return render_response(self.decode(i, tokens), THINK)

    # -- rewards ------------------------------------------------------------

    def score(self, i: int, text: str) -> RewardBreakdown:
        ep = self.episodes[i]
        if self.kind is TaskKind.DETECTION:
            return detection_reward(text, ep.gt, self.tau_f1)
        if self.kind is TaskKind.GROUNDING:
            return grounding_reward(text, ep.scene, ep.gt, self.tau_frame)
        return reasoning_reward(text, ep.gt)

    def score_tokens(self, i: int, tokens: Sequence[int]) -> tuple[str, RewardBreakdown]:
        """Render then score through the parser; memoized (scoring is pure)."""
        key = (i, tuple(int(t) for t in tokens))
        hit = self._cache.get(key)
        if hit is None:
            text = self.render(i, tokens)
            hit = self._cache[key] = (text, self.score(i, text))
        return hit

    # -- serialization ---------------------------------------------------

    def gt_record(self, i: int) -> dict:
        ep = self.episodes[i]
        rec = {"episode_id": ep.episode_id, "task": self.kind.value, "prompt": ep.prompt}
        if self.kind is TaskKind.DETECTION:
            rec["gt"] = {"objects": [{"category": c, "bbox_3d": b.to_list()} for c, b in ep.gt]}
        elif self.kind is TaskKind.GROUNDING:
            rec["gt"] = {"frame_index": ep.gt.frame_index, "bbox_3d": ep.gt.box.to_list()}
            rec["scene_ref"] = ep.scene.scene_id
        else:
            rec["gt"] = gt_to_json(ep.gt)
            if ep.options:
                rec["options"] = ep.options
        rec["demo"] = render_response(ep.demo, THINK)
        rec["vocab"] = ep.vocab
        return rec

    def save(self, directory: Union[str, Path]) -> list[Path]:
        from ..io import atomic_write_text, dumps_jsonl

        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        meta = {"task": self.kind.value, "grid": self.grid.to_dict(), "max_objects": self.max_objects,
                "n_episodes": len(self.episodes)}
        written = [directory / "task.json", directory / "episodes.jsonl"]
        atomic_write_text(written[0], json.dumps(meta, indent=2, sort_keys=True) + "\n")
        atomic_write_text(written[1], dumps_jsonl(self.gt_record(i) for i in range(len(self))))
        if self.kind is TaskKind.GROUNDING:
            written.append(directory / "scenes.jsonl")
            atomic_write_text(written[2], dumps_jsonl(e.scene.to_record() for e in self.episodes))
        return written

    @classmethod
    def load(cls, directory: Union[str, Path]) -> "SyntheticTask":
        from ..io import read_jsonl

        directory = Path(directory)
        meta = json.loads((directory / "task.json").read_text())
        kind = TaskKind(meta["task"])
        grid = GridSpec(**meta["grid"])
        scenes = {}
        if kind is TaskKind.GROUNDING:
            scenes = {r["scene_id"]: SceneMeta.from_record(r) for r in read_jsonl(directory / "scenes.jsonl")}
        episodes = []
        for rec in read_jsonl(directory / "episodes.jsonl"):
            gt = gt_from_json(kind, rec["gt"], rec.get("scene_ref"))
            demo = parse_response(rec["demo"], kind).payload
            scene = scenes[rec["scene_ref"]] if kind is TaskKind.GROUNDING else None
            episodes.append(Episode(rec["episode_id"], rec["prompt"], gt, demo,
                                    list(rec["vocab"]), scene, rec.get("options")))
        return cls(kind, grid, episodes, max_objects=meta.get("max_objects", 4))


# -- generation ---------------------------------------------------------------


def _random_grid_box(rng: np.random.Generator, grid: GridSpec, min_size: int = 1) -> list[int]:
    c, s, a = grid.cells, grid.size_levels, grid.angle_levels
    return [int(rng.integers(c)), int(rng.integers(c)), int(rng.integers(c)),
            int(rng.integers(min_size, s)), int(rng.integers(min_size, s)),
            int(rng.integers(min_size, s)), int(rng.integers(a))]


def _random_rigid(rng: np.random.Generator, tilt: float = 0.15, shift: float = 1.0) -> RigidTransform:
    rot = rotation_matrix(rng.uniform(-math.pi, math.pi), rng.uniform(-tilt, tilt), rng.uniform(-tilt, tilt))
    return RigidTransform.from_parts(rot, rng.uniform(-shift, shift, size=3))


def _detection_episodes(rng, n, grid, max_objects):
    vocab = ([len(CATEGORIES) + 1] + grid.box_vocab()) * max_objects
    episodes = []
    for k in range(n):
        objects: list[tuple[str, Box9DoF]] = []
        target = int(rng.integers(1, max_objects + 1))
        while len(objects) < target:
            box = grid.decode_box(_random_grid_box(rng, grid))
            if all(iou3d(box, other) == 0.0 for _, other in objects):
                objects.append((CATEGORIES[int(rng.integers(len(CATEGORIES)))], box))
        names = ", ".join(sorted({c for c, _ in objects}))
        episodes.append(Episode(
            episode_id=f"det-{k:05d}",
            prompt=f"Detect every object in the first-frame coordinates. (scene {k}: {names})",
            gt=objects,
            demo=DetectionAnswer(tuple(DetectedObject(c, b) for c, b in objects)),
            vocab=list(vocab),
        ))
    return episodes


def _grounding_episodes(rng, n, grid, frames):
    episodes = []
    for k in range(n):
        n_frames = int(rng.integers(frames[0], frames[1] + 1))
        scene = SceneMeta(
            scene_id=f"scene-{k:05d}",
            extrinsics=tuple(_random_rigid(rng) for _ in range(n_frames)),
            align=_random_rigid(rng, tilt=0.0),
        )
        f_gt = int(rng.integers(n_frames))
        local = grid.decode_box(_random_grid_box(rng, grid))
        global_box = transform_box(local, scene.frame_to_aligned(f_gt))
        category = CATEGORIES[int(rng.integers(len(CATEGORIES)))]
        episodes.append(Episode(
            episode_id=f"grd-{k:05d}",
            prompt=f"Locate the {category} described in scene {k}.",
            gt=GroundingTarget(f_gt, global_box, scene.scene_id),
            demo=GroundingAnswer(f_gt, local),
            vocab=[n_frames] + grid.box_vocab(),
            scene=scene,
        ))
    return episodes


def _reasoning_episodes(rng, n):
    episodes = []
    for k in range(n):
        if rng.random() < 0.5:
            options = [f"{CATEGORIES[int(rng.integers(3))]} {j}" for j in range(len(CHOICES))]
            answer = ChoiceAnswer(CHOICES[int(rng.integers(len(CHOICES)))])
            episodes.append(Episode(
                episode_id=f"rsn-{k:05d}",
                prompt=f"Which object is nearest to the door in scene {k}?",
                gt=answer, demo=answer, vocab=[len(CHOICES)], options=options,
            ))
        else:
            value = NumericAnswer(float(rng.integers(1, 100)))
            question = "How many chairs" if rng.random() < 0.5 else "What is the room length in dm"
            episodes.append(Episode(
                episode_id=f"rsn-{k:05d}",
                prompt=f"{question} in scene {k}?",
                gt=value, demo=value, vocab=[10, 10],
            ))
    return episodes


def generate_synthetic(task, n_episodes: int, seed: int = 0, grid: Optional[GridSpec] = None,
                       frames: tuple[int, int] = (4, 8), max_objects: int = 4) -> SyntheticTask:
    """Seeded synthetic corpus for one task kind.

    Detection: 1 to ``max_objects`` non-overlapping grid boxes in three
    categories. Grounding: ``frames`` (inclusive range) random rigid
    extrinsics per scene, a target frame and a grid box in that frame; the
    stored ground truth is the box carried into the aligned global frame.
    Reasoning: half four-way multiple choice, half integer answers in 1..99.
    """
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    kind = TaskKind(task)
    grid = grid or GridSpec()
    rng = np.random.default_rng(seed)
    if kind is TaskKind.DETECTION:
        episodes = _detection_episodes(rng, n_episodes, grid, max_objects)
    elif kind is TaskKind.GROUNDING:
        episodes = _grounding_episodes(rng, n_episodes, grid, frames)
    else:
        episodes = _reasoning_episodes(rng, n_episodes)
    return SyntheticTask(kind, grid, episodes, max_objects=max_objects)


def parse_or_none(text: str, kind) -> Optional[Payload]:
    try:
        return parse_response(text, kind).payload
    except FormatError:
        return None


__all__ = [
    "CATEGORIES", "Episode", "GridSpec", "SyntheticTask", "generate_synthetic",
    "gt_from_json", "gt_to_json", "parse_or_none",
]
