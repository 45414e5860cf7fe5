"""Command-line interface: ``rlvr3d {iou,reward,eval,gen-synth,train-toy}``.

File formats are JSON lines (see ``rlvr3d.records``). Lengths are meters and
angles radians throughout. Exit status: 0 success, 1 validation error or bad
usage, 2 I/O error. Diagnostics go to stderr; set ``RLVR3D_LOG`` to one of
error, warn, info, debug (default warn).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

from .evaluation import eval_detection, eval_grounding, eval_reasoning
from .geometry import Box9DoF, iou3d
from .io import atomic_write_text, dumps_jsonl
from .parsing import TaskKind, render_response
from .records import check_scenes, load_ground_truth, load_responses, load_scenes, parse_predictions, score_response
from .rewards import TAU_F1, TAU_FRAME
from .toy import GridSpec, SyntheticTask, ToyGRPO, generate_synthetic
from .toy.tasks import THINK

log = logging.getLogger("rlvr3d")

LOG_LEVELS = {"error": logging.ERROR, "warn": logging.WARNING, "warning": logging.WARNING,
              "info": logging.INFO, "debug": logging.DEBUG}

EXIT_OK, EXIT_INVALID, EXIT_IO = 0, 1, 2
TASKS = [t.value for t in TaskKind]


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on bad usage; 2 is reserved for I/O errors here
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def _box(text: str) -> Box9DoF:
    try:
        values = [float(v) for v in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated list of numbers: {text!r}") from None
    try:
        return Box9DoF.from_array(values)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _unit_interval(text: str) -> float:
    value = float(text)
    if not 0.0 < value < 1.0:
        raise argparse.ArgumentTypeError(f"must lie in (0, 1), got {value}")
    return value


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def _nonneg_int(text: str) -> int:
    value = int(text)
    if value < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {value}")
    return value


def _nonneg_float(text: str) -> float:
    value = float(text)
    if not value >= 0.0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {text}")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="rlvr3d", description=__doc__.split("\n\n")[0],
                     epilog="Boxes are [x,y,z,w,h,d,psi,theta,phi] in meters and radians, "
                            "rotation Rz(psi) Ry(theta) Rx(phi).")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("iou", help="exact IoU of two oriented boxes")
    p.add_argument("--box-a", type=_box, required=True, metavar="X,Y,Z,W,H,D,PSI,THETA,PHI")
    p.add_argument("--box-b", type=_box, required=True, metavar="X,Y,Z,W,H,D,PSI,THETA,PHI")

    p = sub.add_parser("reward", help="score each response line; one JSON breakdown per line")
    p.add_argument("--task", choices=TASKS, required=True)
    p.add_argument("--pred", type=Path, required=True, help="JSONL with episode_id and response")
    p.add_argument("--gt", type=Path, required=True, help="JSONL with episode_id and gt")
    p.add_argument("--scene", type=Path, help="scene JSONL (grounding)")
    p.add_argument("--tau-f1", type=_unit_interval, default=TAU_F1)
    p.add_argument("--tau-frame", type=_positive_int, default=TAU_FRAME)
    p.add_argument("--out", type=Path, help="write to this file instead of stdout")

    p = sub.add_parser("eval", help="corpus metrics report as JSON")
    p.add_argument("--task", choices=TASKS, required=True)
    p.add_argument("--pred", type=Path, required=True)
    p.add_argument("--gt", type=Path, required=True)
    p.add_argument("--scene", type=Path)
    p.add_argument("--tau", type=_unit_interval, default=TAU_F1, help="detection IoU threshold")
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("gen-synth", help="write a seeded synthetic corpus to a directory")
    p.add_argument("--task", choices=TASKS, required=True)
    p.add_argument("--n", type=_positive_int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--cells", type=_positive_int, default=8, help="grid cells per axis")
    p.add_argument("--extent", type=float, default=4.0, help="grid side length in meters")
    p.add_argument("--min-frames", type=_positive_int, default=4)
    p.add_argument("--max-frames", type=_positive_int, default=8)
    p.add_argument("--max-objects", type=_positive_int, default=4)

    p = sub.add_parser("train-toy", help="SFT warm-up then GRPO on a synthetic corpus")
    p.add_argument("--task", choices=TASKS, required=True)
    p.add_argument("--data", type=Path, required=True, help="directory written by gen-synth")
    p.add_argument("--metrics-out", type=Path, required=True, help="JSONL, one record per step")
    p.add_argument("--steps", type=_nonneg_int, default=2000, help="GRPO steps")
    p.add_argument("--sft-steps", type=_nonneg_int, default=500)
    p.add_argument("--sft-fraction", type=float, default=0.2)
    p.add_argument("--sft-lr", type=_nonneg_float, default=20.0)
    p.add_argument("--batch-size", type=_positive_int, default=16, help="prompts per GRPO step")
    p.add_argument("--group-size", type=int, default=8)
    p.add_argument("--clip-eps", type=float, default=0.2)
    p.add_argument("--kl-beta", type=float, default=None,
                   help="default 0.04 for detection/grounding, 0 for reasoning")
    p.add_argument("--chunk-size", type=_positive_int, default=4, help="rollouts per loss chunk")
    p.add_argument("--lr", type=_nonneg_float, default=200.0)
    p.add_argument("--eval-every", type=_nonneg_int, default=0, help="greedy eval every K steps (0: off)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--pred-out", type=Path, help="write greedy responses of the final policy as JSONL")
    return parser


def _evaluate(task: TaskKind, preds, gts, scenes, tau):
    if task is TaskKind.DETECTION:
        return eval_detection(preds, gts, tau)
    if task is TaskKind.GROUNDING:
        return eval_grounding(preds, gts, scenes or {})
    return eval_reasoning(preds, gts)


def _load_inputs(args):
    task = TaskKind(args.task)
    gts = load_ground_truth(args.gt, task)
    responses = load_responses(args.pred, task)
    scenes = None
    if args.scene is not None:
        scenes = load_scenes(args.scene)
    elif task is TaskKind.GROUNDING:
        raise UsageError("grounding needs --scene")
    return task, gts, responses, scenes


def cmd_iou(args) -> int:
    print(f"{iou3d(args.box_a, args.box_b):.6f}")
    return EXIT_OK


def cmd_reward(args) -> int:
    task, gts, responses, scenes = _load_inputs(args)
    missing = [eid for eid in responses if eid not in gts]
    if missing:
        raise UsageError(f"no ground truth for episodes {missing[:5]}")
    unscored = check_scenes({eid: gts[eid] for eid in responses}, scenes or {})
    if unscored:
        raise UsageError(f"missing scenes for episodes {unscored[:5]}")
    records = []
    for eid, text in responses.items():
        breakdown = score_response(task, text, gts[eid], scenes, args.tau_f1, args.tau_frame)
        records.append({"episode_id": eid, **breakdown.to_dict()})
    text = dumps_jsonl(records)
    if args.out is None:
        sys.stdout.write(text)
    else:
        atomic_write_text(args.out, text)
    return EXIT_OK


def cmd_eval(args) -> int:
    task, gts, responses, scenes = _load_inputs(args)
    preds = parse_predictions(responses, task)
    report = _evaluate(task, preds, gts, scenes, args.tau)
    for note in report.flagged:
        log.warning("flagged %s", note)
    atomic_write_text(args.out, json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    print(json.dumps(report.metrics, sort_keys=True))
    return EXIT_OK


def cmd_gen_synth(args) -> int:
    if args.min_frames > args.max_frames:
        raise UsageError("--min-frames exceeds --max-frames")
    if not args.extent > 0:
        raise UsageError("--extent must be positive")
    grid = GridSpec(extent=args.extent, cells=args.cells)
    task = generate_synthetic(args.task, args.n, args.seed, grid=grid,
                              frames=(args.min_frames, args.max_frames), max_objects=args.max_objects)
    for path in task.save(args.out):
        log.info("wrote %s", path)
    return EXIT_OK


def _load_task(args) -> SyntheticTask:
    try:
        task = SyntheticTask.load(args.data)
    except (KeyError, TypeError) as exc:
        raise UsageError(f"{args.data}: malformed corpus ({exc})") from None
    if task.kind.value != args.task:
        raise UsageError(f"{args.data} holds a {task.kind.value} corpus, not {args.task}")
    return task


def cmd_train_toy(args) -> int:
    task = _load_task(args)
    model = ToyGRPO(sft_steps=args.sft_steps, sft_fraction=args.sft_fraction, sft_lr=args.sft_lr,
                    grpo_steps=args.steps, batch_size=args.batch_size, group_size=args.group_size,
                    clip_eps=args.clip_eps, kl_beta=args.kl_beta, micro_chunk=args.chunk_size,
                    lr=args.lr, eval_every=args.eval_every, seed=args.seed)
    # fails fast on bad hyperparameters before any work is done
    model.resolve_config(task)

    def progress(entry):
        if entry["phase"] == "grpo" and (entry["step"] + 1) % 100 == 0:
            log.info("step %d mean_reward %.4f", entry["step"] + 1, entry["mean_reward"])

    model.fit(task, callback=progress)
    final = {"phase": "final", "warm_start": model.warm_report_.metrics, "eval": model.report_.metrics}
    atomic_write_text(args.metrics_out, dumps_jsonl(model.history_ + [final]))
    if args.pred_out is not None:
        preds = model.predict(task)
        lines = [{"episode_id": eid, "task": task.kind.value,
                  "response": render_response(p, THINK) if p is not None else ""}
                 for eid, p in preds.items()]
        atomic_write_text(args.pred_out, dumps_jsonl(lines))
    print(json.dumps(model.report_.metrics, sort_keys=True))
    return EXIT_OK


COMMANDS = {"iou": cmd_iou, "reward": cmd_reward, "eval": cmd_eval,
            "gen-synth": cmd_gen_synth, "train-toy": cmd_train_toy}


def configure_logging():
    name = os.environ.get("RLVR3D_LOG", "warn").strip().lower()
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    root = logging.getLogger("rlvr3d")
    root.handlers[:] = [handler]
    root.propagate = False
    root.setLevel(LOG_LEVELS.get(name, logging.WARNING))
    if name not in LOG_LEVELS:
        root.warning("unknown RLVR3D_LOG %r; using warn", name)


def main(argv: Optional[Sequence[str]] = None) -> int:
    configure_logging()
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except OSError as exc:
        log.error("%s", exc)
        return EXIT_IO
    except (UsageError, ValueError, TypeError) as exc:
        log.error("%s", exc)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
