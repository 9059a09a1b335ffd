# src/cli/schedule_io.py
# Schedule, stats and curve files. Every file is written to a temporary name
# next to its destination and renamed into place.

import os
import json
import tempfile
from pathlib import Path
from typing import Any, Dict, List, Union

from src.core.errors import ConfigError, ScheduleError
from src.fusion.layout import FusionLayout
from src.fusion.schedule import FusedSchedule, evaluate, from_keys

SCHEDULE_HEADER = "fuseplan-schedule v1"
LATENCY_TOL = 1e-9


def write_atomic(path: Union[str, Path], content: Union[str, bytes]):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = content.encode() if isinstance(content, str) else content
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, 'wb') as f_out:
            f_out.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def format_schedule(schedule: FusedSchedule) -> str:
    """One line per subtask sorted by (stage, position), times with 9 decimals."""
    timeline = schedule.timeline
    if timeline is None:
        raise ScheduleError("only evaluated schedules can be written", code="schedule.unevaluated")
    lines = [SCHEDULE_HEADER]
    for stage, row in enumerate(schedule.rows):
        for position, t in enumerate(row):
            lines.append(
                f"{stage},{position},{t.model},{t.group},{t.microbatch},{t.direction},"
                f"{t.latency:.9f},{timeline.start[t.uid]:.9f},{timeline.end[t.uid]:.9f}"
            )
    return "\n".join(lines) + "\n"


def parse_schedule(text: str, layout: FusionLayout) -> FusedSchedule:
    """
    Rebuild the schedule on `layout`. The subtask identity is (model, group,
    microbatch, stage), the logical stage following from the physical one;
    latencies come from the layout and must agree with the file.
    """
    lines = [line for line in text.splitlines() if line.strip()]
    if not lines or lines[0].strip() != SCHEDULE_HEADER:
        raise ConfigError(f"missing '{SCHEDULE_HEADER}' header", code="schedule.format")
    rows: Dict[int, Dict[int, tuple]] = {}
    logical = {(c.model, c.group, p): c.stage_logical for p, chunks in enumerate(layout.placement) for c in chunks}
    for lineno, line in enumerate(lines[1:], start=2):
        fields = line.strip().split(',')
        if len(fields) != 9:
            raise ConfigError(f"line {lineno}: expected 9 fields", code="schedule.format")
        try:
            stage, position, group, microbatch = (int(fields[i]) for i in (0, 1, 3, 4))
            latency = float(fields[6])
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: {exc}", code="schedule.format") from exc
        model, direction = fields[2], fields[5]
        if (model, group, stage) not in logical:
            raise ConfigError(f"line {lineno}: no {model}{group} chunk on stage {stage}", code="schedule.format")
        key = (model, group, microbatch, logical[(model, group, stage)], direction)
        subtask = layout.by_key.get(key)
        if subtask is None:
            raise ConfigError(f"line {lineno}: unknown subtask {key}", code="schedule.format")
        if abs(subtask.latency - latency) > LATENCY_TOL * max(1.0, subtask.latency):
            raise ConfigError(
                f"line {lineno}: latency {latency} differs from the layout's {subtask.latency}",
                code="schedule.mismatch",
            )
        rows.setdefault(stage, {})[position] = key
    key_rows: List[List[tuple]] = []
    for stage in range(layout.N):
        row = rows.get(stage, {})
        if sorted(row) != list(range(len(row))):
            raise ConfigError(f"stage {stage}: positions are not contiguous", code="schedule.format")
        key_rows.append([row[i] for i in range(len(row))])
    seen = {key for row in key_rows for key in row}
    if len(seen) != layout.num_subtasks or sum(map(len, key_rows)) != layout.num_subtasks:
        raise ScheduleError(
            f"{len(seen)} distinct subtasks for a layout of {layout.num_subtasks}", code="schedule.malformed"
        )
    return evaluate(from_keys(key_rows, layout), layout)


def read_schedule(path: Union[str, Path], layout: FusionLayout) -> FusedSchedule:
    return parse_schedule(Path(path).read_text(), layout)


def dump_json(data: Dict[str, Any]) -> str:
    return json.dumps(data, indent=2, sort_keys=True, allow_nan=True) + "\n"
