"""On-disk formats: trajectory logs, metrics CSVs, group dumps, run manifests."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, fields
from pathlib import Path
from typing import Iterable, Sequence

from .groups import GrpoGroup
from .runtime import STATUSES, Trace, Trajectory

TRAJECTORY_FIELDS = ("program_input_id", "status", "reward", "final_output", "teacher_id", "traces")


class LogFormatError(ValueError):
    def __init__(self, line: int, reason: str):
        super().__init__(f"line {line}: {reason}")
        self.line = line
        self.reason = reason


def trajectory_record(traj: Trajectory) -> dict:
    return {
        "program_input_id": traj.program_input_id,
        "status": traj.status,
        "reward": traj.reward,
        "final_output": traj.final_output,
        "teacher_id": traj.teacher_id,
        "traces": [{"module": t.module_id, "prompt": list(t.prompt), "output": list(t.output)}
                   for t in traj.traces],
    }


def dumps_record(record: dict) -> str:
    return json.dumps(record, sort_keys=True, separators=(",", ":"))


def trajectory_from_record(rec: dict) -> Trajectory:
    missing = [f for f in ("program_input_id", "status", "reward", "traces") if f not in rec]
    if missing:
        raise ValueError(f"missing fields {missing}")
    if rec["status"] not in STATUSES:
        raise ValueError(f"unknown status {rec['status']!r}")
    if rec["reward"] is not None and not isinstance(rec["reward"], (int, float)):
        raise ValueError("reward must be a number or null")
    traces = []
    for i, t in enumerate(rec["traces"]):
        try:
            prompt, output = t["prompt"], t["output"]
            if not all(isinstance(v, int) for v in prompt + output):
                raise ValueError
            traces.append(Trace(str(t["module"]), tuple(prompt), tuple(output), i))
        except (KeyError, TypeError, ValueError):
            raise ValueError(f"trace {i} malformed (needs module, prompt[int], output[int])") from None
    return Trajectory(traces, rec.get("final_output"), rec["status"], rec["program_input_id"],
                      reward=rec["reward"], teacher_id=rec.get("teacher_id"))


def write_trajectory_log(path, trajectories: Iterable[Trajectory]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for traj in trajectories:
            f.write(dumps_record(trajectory_record(traj)) + "\n")


def read_trajectory_log(path) -> list[Trajectory]:
    out = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                if not isinstance(rec, dict):
                    raise ValueError("record is not an object")
                out.append(trajectory_from_record(rec))
            except json.JSONDecodeError as exc:
                raise LogFormatError(lineno, f"invalid JSON ({exc.msg})") from None
            except ValueError as exc:
                raise LogFormatError(lineno, str(exc)) from None
    return out


# -- metrics -------------------------------------------------------------------

def _fmt(v):
    if isinstance(v, float):
        return repr(v) if math.isfinite(v) else str(v)
    return v


def append_rows(path, rows: Sequence, start: int = 0) -> int:
    """Append dataclass ``rows[start:]`` to a CSV, writing a header for new files.

    Returns the number of rows now flushed (``len(rows)``).
    """
    path = Path(path)
    if start >= len(rows):
        return len(rows)
    names = [f.name for f in fields(rows[0])]
    new = not path.exists() or path.stat().st_size == 0
    with open(path, "a", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        if new:
            w.writerow(names)
        for r in rows[start:]:
            d = asdict(r)
            w.writerow([_fmt(d[n]) for n in names])
    return len(rows)


def truncate_rows(path, n_rows: int) -> None:
    """Drop CSV rows written after the last checkpoint (keeps the header)."""
    path = Path(path)
    if not path.exists():
        return
    lines = path.read_text(encoding="utf-8").splitlines(keepends=True)
    path.write_text("".join(lines[:n_rows + 1]), encoding="utf-8")


# -- group dumps -----------------------------------------------------------------

def group_record(group: GrpoGroup, size_before_padding: int | None = None) -> dict:
    rewards = group.rewards
    mean = sum(rewards) / len(rewards) if rewards else 0.0
    std = math.sqrt(sum((r - mean) ** 2 for r in rewards) / len(rewards)) if rewards else 0.0
    return {
        "module": group.key.module_id,
        "index": group.key.relative_invocation_index,
        "size_pre": len(group) if size_before_padding is None else size_before_padding,
        "size": len(group),
        "rewards": rewards,
        "padding": [it.is_padding_duplicate for it in group.items],
        "reward_mean": mean,
        "reward_std": std,
    }


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")
