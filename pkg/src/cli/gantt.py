# src/cli/gantt.py
# SVG rendering of a fused schedule: execution timeline per physical stage and
# the activation-memory staircase underneath.

from typing import List, Optional, Sequence

import svgwrite

from src.core.errors import ScheduleError
from src.fusion.layout import FusionLayout
from src.fusion.schedule import FusedSchedule, memory_profile

WIDTH = 1200
LEFT = 70
RIGHT = 20
TOP = 40
ROW_HEIGHT = 22
ROW_GAP = 4
MEM_HEIGHT = 40
PANEL_GAP = 40

COLORS = {
    ('A', 'fwd'): '#9ecae1',
    ('A', 'bwd'): '#2171b5',
    ('B', 'fwd'): '#fcc5c0',
    ('B', 'bwd'): '#c51b8a',
}
SERIAL_LINE = '#d62728'


def _r(value: float) -> float:
    return round(value, 3)


def render_gantt(
    schedule: FusedSchedule,
    layout: FusionLayout,
    serial_peak: Optional[Sequence[float]] = None,
    title: str = '',
) -> str:
    """
    Args:
        schedule: Evaluated schedule
        layout: Layout the schedule belongs to
        serial_peak: Per-stage peak of the serial 1F1B order, drawn as a
            dotted reference line in the memory panel
        title: Optional caption
    Returns:
        Self-contained SVG document
    """
    if schedule.timeline is None and any(schedule.rows):
        raise ScheduleError("cannot render an unevaluated schedule", code="schedule.unevaluated")
    stages = schedule.num_stages
    timeline_height = stages * (ROW_HEIGHT + ROW_GAP)
    memory_top = TOP + timeline_height + PANEL_GAP
    height = memory_top + stages * (MEM_HEIGHT + ROW_GAP) + TOP

    dwg = svgwrite.Drawing(size=(WIDTH, height), profile='full', debug=False)
    dwg.add(dwg.rect(insert=(0, 0), size=(WIDTH, height), fill='white'))
    caption = title or (f"makespan {schedule.energy:.6g} s" if schedule.timeline else "empty schedule")
    dwg.add(dwg.text(caption, insert=(LEFT, TOP - 16), font_size=14, font_family='sans-serif'))
    if not any(schedule.rows):
        return dwg.tostring()

    makespan = schedule.energy or 1.0
    scale = (WIDTH - LEFT - RIGHT) / makespan
    tl = schedule.timeline

    subtasks = dwg.add(dwg.g(id='timeline'))
    for p, row in enumerate(schedule.rows):
        y = TOP + p * (ROW_HEIGHT + ROW_GAP)
        dwg.add(
            dwg.text(f"stage {p}", insert=(6, _r(y + ROW_HEIGHT * 0.7)), font_size=11, font_family='sans-serif')
        )
        for t in row:
            x = LEFT + tl.start[t.uid] * scale
            w = (tl.end[t.uid] - tl.start[t.uid]) * scale
            rect = dwg.rect(
                insert=(_r(x), _r(y)),
                size=(_r(w), ROW_HEIGHT),
                fill=COLORS[(t.model, t.direction)],
                stroke='black',
                stroke_width=0.3,
                class_='subtask',
            )
            rect.set_desc(title=repr(t))
            subtasks.add(rect)

    profile = memory_profile(schedule, layout)
    peak = max((lvl for points in profile for _, lvl in points), default=0.0)
    if serial_peak:
        peak = max(peak, max(serial_peak))
    peak = peak or 1.0
    memory = dwg.add(dwg.g(id='memory'))
    dwg.add(
        dwg.text("activation memory", insert=(LEFT, memory_top - 10), font_size=12, font_family='sans-serif')
    )
    for p, points in enumerate(profile):
        base = memory_top + p * (MEM_HEIGHT + ROW_GAP) + MEM_HEIGHT
        memory.add(dwg.line((LEFT, base), (WIDTH - RIGHT, base), stroke='#cccccc', stroke_width=0.5))
        stair: List[tuple] = []
        level = 0.0
        for time, value in points:
            x = _r(LEFT + time * scale)
            stair.append((x, _r(base - level / peak * MEM_HEIGHT)))
            level = value
            stair.append((x, _r(base - level / peak * MEM_HEIGHT)))
        stair.append((_r(WIDTH - RIGHT), _r(base - level / peak * MEM_HEIGHT)))
        memory.add(dwg.polyline(stair, fill='none', stroke='black', stroke_width=0.8))
        if serial_peak:
            y = _r(base - serial_peak[p] / peak * MEM_HEIGHT)
            memory.add(
                dwg.line(
                    (LEFT, y),
                    (WIDTH - RIGHT, y),
                    stroke=SERIAL_LINE,
                    stroke_width=1,
                    stroke_dasharray='2,2',
                    class_='serial-peak',
                )
            )
    return dwg.tostring()
