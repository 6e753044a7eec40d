"""Pixel-pipeline language run next to the images it analyses.

``pipeline := step (";" step)*`` where the transforms are ``crop(x,y,w,h)``
and ``normalize`` and exactly one terminal comes last: ``mean``, ``stddev``,
``min``, ``max``, ``histogram(n)`` or ``count_above(t)``.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Union

from .model import GridError

TRANSFORMS = {"crop": 4, "normalize": 0}
TERMINALS = {"mean": 0, "stddev": 0, "min": 0, "max": 0, "histogram": 1, "count_above": 1}
NAME_RE = re.compile(r"[a-z0-9_]{1,32}")
_STEP_RE = re.compile(r"\s*([a-z_]+)\s*(?:\(([^()]*)\))?\s*")
_NUM_RE = re.compile(r"-?\d+(?:\.\d+)?")

Value = Union[float, int, list]


class PipelineError(GridError):
    pass


class PipelineSyntaxError(PipelineError):
    pass


@dataclass(frozen=True)
class Step:
    op: str
    args: tuple = ()

    def __str__(self) -> str:
        if not self.args and TRANSFORMS.get(self.op, TERMINALS.get(self.op)) == 0:
            return self.op
        return f"{self.op}({','.join(_fmt_arg(a) for a in self.args)})"


def _fmt_arg(a) -> str:
    return str(a) if isinstance(a, int) else repr(a)


@dataclass(frozen=True)
class Pipeline:
    steps: tuple

    @property
    def terminal(self) -> Step:
        return self.steps[-1]

    def __str__(self) -> str:
        return "; ".join(str(s) for s in self.steps)


def parse_pipeline(src: str) -> Pipeline:
    parts = src.split(";")
    steps = []
    for i, part in enumerate(parts):
        m = _STEP_RE.fullmatch(part)
        if m is None:
            raise PipelineSyntaxError(f"step {i + 1}: cannot parse {part.strip()!r}")
        op, rawargs = m.group(1), m.group(2)
        if op not in TRANSFORMS and op not in TERMINALS:
            raise PipelineSyntaxError(f"step {i + 1}: unknown step {op!r}")
        args = []
        if rawargs is not None and rawargs.strip():
            for a in rawargs.split(","):
                a = a.strip()
                if not _NUM_RE.fullmatch(a):
                    raise PipelineSyntaxError(f"step {i + 1}: bad argument {a!r} to {op}")
                args.append(float(a) if "." in a else int(a))
        arity = TRANSFORMS.get(op, TERMINALS.get(op))
        if len(args) != arity:
            raise PipelineSyntaxError(f"step {i + 1}: {op} takes {arity} argument(s), got {len(args)}")
        is_last = i == len(parts) - 1
        if op in TERMINALS and not is_last:
            raise PipelineSyntaxError(f"step {i + 1}: terminal {op} must be the last step")
        if is_last and op not in TERMINALS:
            raise PipelineSyntaxError("pipeline must end with a terminal step")
        if op == "crop" and (any(not isinstance(a, int) for a in args) or args[2] < 1 or args[3] < 1 or args[0] < 0 or args[1] < 0):
            raise PipelineSyntaxError(f"step {i + 1}: crop needs non-negative integers and w, h >= 1")
        if op == "histogram" and not (isinstance(args[0], int) and 1 <= args[0] <= 256):
            raise PipelineSyntaxError(f"step {i + 1}: histogram bins must be an integer in 1..256")
        steps.append(Step(op, tuple(args)))
    return Pipeline(tuple(steps))


def run_pipeline(p: Pipeline, pixels, rows: int, cols: int, bits: int = 8) -> Value:
    """Apply ``p`` to a row-major pixel list and return the terminal's value."""
    if len(pixels) != rows * cols:
        raise PipelineError(f"{len(pixels)} pixels do not fill {rows}x{cols}")
    grid = [[float(pixels[r * cols + c]) for c in range(cols)] for r in range(rows)]
    lo, hi = 0.0, float(2**bits - 1)
    for step in p.steps[:-1]:
        if step.op == "crop":
            x, y, w, h = step.args
            width = len(grid[0]) if grid else 0
            if x + w > width or y + h > len(grid):
                raise PipelineError(f"crop({x},{y},{w},{h}) outside {width}x{len(grid)} image")
            grid = [row[x : x + w] for row in grid[y : y + h]]
        elif step.op == "normalize":
            flat = [v for row in grid for v in row]
            mn, mx = min(flat), max(flat)
            span = mx - mn
            grid = [[(v - mn) / span if span else 0.0 for v in row] for row in grid]
            lo, hi = 0.0, 1.0
    values = [v for row in grid for v in row]
    if not values:
        raise PipelineError("empty image")
    return _terminal(p.terminal, values, lo, hi)


def _terminal(step: Step, values: list, lo: float, hi: float) -> Value:
    n = len(values)
    if step.op == "mean":
        return _sum(values) / n
    if step.op == "stddev":
        m = _sum(values) / n
        return math.sqrt(_sum([(v - m) ** 2 for v in values]) / n)
    if step.op == "min":
        return min(values)
    if step.op == "max":
        return max(values)
    if step.op == "count_above":
        t = step.args[0]
        return sum(1 for v in values if v > t)
    bins = step.args[0]
    counts = [0] * bins
    width = hi - lo
    for v in values:
        idx = int((v - lo) / width * bins) if width else 0
        counts[min(max(idx, 0), bins - 1)] += 1
    return counts


def _sum(values) -> float:
    total = 0.0
    for v in values:  # index order keeps results bit-identical across sites
        total += v
    return total
