"""Parse ``<think>...</think><answer>...</answer>`` responses into typed payloads.

Answer schemas:

* detection: ``{"objects": [{"category": str, "bbox_3d": [9 numbers]}, ...]}``
* grounding: ``{"frame_index": int, "bbox_3d": [9 numbers]}`` (box in the local
  frame of ``frame_index``)
* reasoning: a single letter (multiple choice) or a plain integer/decimal
  literal with an optional sign.
"""

from __future__ import annotations

import enum
import json
import math
import re
from dataclasses import dataclass
from decimal import Decimal
from typing import Optional, Union

from .geometry import Box9DoF, InvalidBox

THINK_OPEN, THINK_CLOSE = "<think>", "</think>"
ANSWER_OPEN, ANSWER_CLOSE = "<answer>", "</answer>"

_CHOICE_RE = re.compile(r"[A-Za-z]")
_NUMBER_RE = re.compile(r"[+-]?(?:\d+(?:\.\d*)?|\.\d+)")


class TaskKind(str, enum.Enum):
    DETECTION = "detection"
    GROUNDING = "grounding"
    REASONING = "reasoning"


class FormatError(ValueError):
    """Response does not follow the tag grammar or the answer schema."""


class MissingThink(FormatError):
    pass


class MissingAnswer(FormatError):
    pass


class WrongOrder(FormatError):
    pass


class SchemaViolation(FormatError):
    pass


@dataclass(frozen=True)
class DetectedObject:
    category: str
    box: Box9DoF


@dataclass(frozen=True)
class DetectionAnswer:
    objects: tuple[DetectedObject, ...] = ()


@dataclass(frozen=True)
class GroundingAnswer:
    frame_index: int
    box: Box9DoF


@dataclass(frozen=True)
class ChoiceAnswer:
    choice: str

    def __post_init__(self):
        if not (len(self.choice) == 1 and "A" <= self.choice <= "Z"):
            raise ValueError(f"choice must be one uppercase letter, got {self.choice!r}")


@dataclass(frozen=True)
class NumericAnswer:
    value: float

    def __post_init__(self):
        if not math.isfinite(self.value):
            raise ValueError("numeric answer must be finite")


Payload = Union[DetectionAnswer, GroundingAnswer, ChoiceAnswer, NumericAnswer]


@dataclass(frozen=True)
class StructuredResponse:
    think_text: str
    answer_text: str
    payload: Payload


def _reject_constant(name):
    raise SchemaViolation(f"non-finite JSON constant {name}")


def _load_json(body: str):
    try:
        return json.loads(body, parse_constant=_reject_constant)
    except SchemaViolation:
        raise
    except (ValueError, RecursionError) as exc:
        raise SchemaViolation(f"answer is not valid JSON: {exc}") from None


def _parse_box(raw) -> Box9DoF:
    if not isinstance(raw, list) or len(raw) != 9:
        raise SchemaViolation("bbox_3d must be a list of 9 numbers")
    for v in raw:
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise SchemaViolation(f"bbox_3d entries must be numbers, got {v!r}")
    try:
        return Box9DoF.from_array(raw)
    except (InvalidBox, OverflowError) as exc:
        raise SchemaViolation(str(exc)) from None


def _parse_detection(body: str) -> DetectionAnswer:
    data = _load_json(body)
    if not isinstance(data, dict) or not isinstance(data.get("objects"), list):
        raise SchemaViolation('detection answer must be {"objects": [...]}')
    objects = []
    for item in data["objects"]:
        if not isinstance(item, dict):
            raise SchemaViolation("each detected object must be a JSON object")
        category = item.get("category")
        if not isinstance(category, str) or not category:
            raise SchemaViolation("object category must be a nonempty string")
        objects.append(DetectedObject(category, _parse_box(item.get("bbox_3d"))))
    return DetectionAnswer(tuple(objects))


def _parse_grounding(body: str, frame_count: Optional[int]) -> GroundingAnswer:
    data = _load_json(body)
    if not isinstance(data, dict):
        raise SchemaViolation('grounding answer must be {"frame_index": int, "bbox_3d": [...]}')
    frame = data.get("frame_index")
    if isinstance(frame, bool) or not isinstance(frame, int) or frame < 0:
        raise SchemaViolation("frame_index must be a nonnegative integer")
    if frame_count is not None and frame >= frame_count:
        raise SchemaViolation(f"frame_index {frame} outside {frame_count} frames")
    return GroundingAnswer(frame, _parse_box(data.get("bbox_3d")))


def _parse_reasoning(body: str) -> Union[ChoiceAnswer, NumericAnswer]:
    body = body.strip()
    if _CHOICE_RE.fullmatch(body):
        return ChoiceAnswer(body.upper())
    if _NUMBER_RE.fullmatch(body):
        value = float(body)
        if not math.isfinite(value):
            raise SchemaViolation("numeric answer overflows")
        return NumericAnswer(value)
    raise SchemaViolation(f"reasoning answer must be a letter or a number, got {body[:40]!r}")


def _split_tags(text: str) -> tuple[str, str]:
    t_open = text.find(THINK_OPEN)
    t_close = text.find(THINK_CLOSE, t_open + len(THINK_OPEN)) if t_open >= 0 else -1
    if t_close < 0:
        raise MissingThink("no <think>...</think> block")
    think = text[t_open + len(THINK_OPEN):t_close]
    rest = t_close + len(THINK_CLOSE)
    a_open = text.find(ANSWER_OPEN, rest)
    a_close = text.find(ANSWER_CLOSE, a_open + len(ANSWER_OPEN)) if a_open >= 0 else -1
    if a_close < 0:
        early = text.find(ANSWER_OPEN, 0, t_open)
        if early >= 0 and text.find(ANSWER_CLOSE, early) >= 0:
            raise WrongOrder("<answer> block precedes <think> block")
        raise MissingAnswer("no <answer>...</answer> block after </think>")
    return think, text[a_open + len(ANSWER_OPEN):a_close]


def parse_response(text, task, frame_count: Optional[int] = None) -> StructuredResponse:
    """Split a response into think/answer text and parse the answer for ``task``.

    Raises one of :class:`MissingThink`, :class:`MissingAnswer`,
    :class:`WrongOrder` or :class:`SchemaViolation`.
    """
    if isinstance(text, (bytes, bytearray)):
        text = bytes(text).decode("utf-8", errors="replace")
    if not isinstance(text, str):
        raise SchemaViolation(f"response must be text, got {type(text).__name__}")
    task = TaskKind(task)
    think, answer = _split_tags(text)
    if task is TaskKind.DETECTION:
        payload = _parse_detection(answer)
    elif task is TaskKind.GROUNDING:
        payload = _parse_grounding(answer, frame_count)
    else:
        payload = _parse_reasoning(answer)
    return StructuredResponse(think, answer, payload)


def format_reward(text, task, frame_count: Optional[int] = None) -> float:
    try:
        parse_response(text, task, frame_count)
    except FormatError:
        return 0.0
    return 1.0


def _format_number(value: float) -> str:
    text = repr(float(value))
    if "e" in text or "E" in text:
        text = format(Decimal(text), "f")
    return text


def _dump_json(data) -> str:
    # angle brackets only occur inside strings; escaping them keeps tags out of the body
    return json.dumps(data).replace("<", "\\u003c").replace(">", "\\u003e")


def payload_to_answer(payload: Payload) -> str:
    """Serialize a payload into the body of an ``<answer>`` block."""
    if isinstance(payload, DetectionAnswer):
        return _dump_json({"objects": [
            {"category": o.category, "bbox_3d": o.box.to_list()} for o in payload.objects
        ]})
    if isinstance(payload, GroundingAnswer):
        return _dump_json({"frame_index": payload.frame_index, "bbox_3d": payload.box.to_list()})
    if isinstance(payload, ChoiceAnswer):
        return payload.choice
    if isinstance(payload, NumericAnswer):
        return _format_number(payload.value)
    raise TypeError(f"unknown payload type {type(payload).__name__}")


def render_response(payload: Payload, think: str = "") -> str:
    return f"{THINK_OPEN}{think}{THINK_CLOSE}{ANSWER_OPEN}{payload_to_answer(payload)}{ANSWER_CLOSE}"
