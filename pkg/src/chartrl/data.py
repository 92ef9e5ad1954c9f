"""Task corpus: reference program generation, corruption, dataset files.

All randomness is drawn from random.Random restricted to integer
operations (randrange, choice, sample), so corpora are identical across
platforms and interpreter builds.
"""

from __future__ import annotations

import dataclasses
import json
import random
from dataclasses import dataclass
from pathlib import Path

from . import chartlang
from .chartlang import (
    CHART_TYPES, MAX_DIM, PALETTE, TITLE_WORDS, VALUES,
    ChartProgram, ElementSet, SubplotSpec,
)

DIFFICULTIES = ("easy", "medium", "hard")

# Subplot count range and per-flag density (in tenths) by difficulty.
_SUBPLOT_RANGE = {"easy": (1, 1), "medium": (1, 2), "hard": (2, 4)}
_FLAG_DENSITY = {"easy": 3, "medium": 5, "hard": 7}

_LAYOUTS = [(r, c) for r in range(1, MAX_DIM + 1) for c in range(1, MAX_DIM + 1)]

DEFAULT_TRAIN_SIZE = 2000
DEFAULT_EVAL_SIZE = 200
# Disjoint seed ranges keep train and eval splits disjoint by construction.
TRAIN_SEED_BASE = 0
EVAL_SEED_BASE = 100_000


@dataclass(frozen=True)
class Task:
    task_id: str
    seed: int
    difficulty: str
    program: ChartProgram
    elements: ElementSet


def gen_reference(seed: int, difficulty: str) -> Task:
    """Draw a reference program uniformly within grammar bounds.

    The program always executes: indices are sampled without replacement
    below rows*cols and every data series is non-empty. References avoid
    the one degenerate styling (title plus legend in a 1x1 layout) so a
    clean chart is never self-colliding.
    """
    if difficulty not in DIFFICULTIES:
        raise ValueError(f"unknown difficulty: {difficulty!r}")
    rng = random.Random(seed * len(DIFFICULTIES) + DIFFICULTIES.index(difficulty))
    lo, hi = _SUBPLOT_RANGE[difficulty]
    n = rng.randint(lo, hi)
    rows, cols = rng.choice([lc for lc in _LAYOUTS if lc[0] * lc[1] >= n])
    indices = sorted(rng.sample(range(rows * cols), n))
    density = _FLAG_DENSITY[difficulty]

    subplots = []
    for index in indices:
        title = None
        if rng.randrange(10) < density:
            title = rng.choice(TITLE_WORDS)
        grid = rng.randrange(10) < density
        legend = rng.randrange(10) < density
        if rows == 1 and cols == 1 and title is not None:
            legend = False
        length = rng.randint(1, chartlang.MAX_DATA)
        data = tuple(rng.choice(VALUES) for _ in range(length))
        subplots.append(SubplotSpec(index, rng.choice(CHART_TYPES),
                                    rng.choice(tuple(PALETTE)), title, grid,
                                    legend, data))

    program = ChartProgram(rows, cols, tuple(subplots))
    elements = chartlang.execute(program)
    assert isinstance(elements, ElementSet)
    return Task(f"{difficulty}-{seed}", seed, difficulty, program, elements)


_EDIT_KINDS = ("color", "type", "data", "title", "flag", "layout")


def corrupt(program: ChartProgram, n_edits: int, seed: int) -> ChartProgram:
    """Apply n_edits seeded grammatical edits.

    Each edit changes the program (a different color/type/value/word, a
    flag toggle, or a layout dimension change). Layout edits may push
    subplot indices out of range, which is the intended way to produce
    runtime errors; dimensions stay within 1..3.
    """
    if n_edits < 1:
        raise ValueError("n_edits must be >= 1")
    rng = random.Random(seed)
    subplots = list(program.subplots)
    rows, cols = program.rows, program.cols

    for _ in range(n_edits):
        kind = rng.choice(_EDIT_KINDS)
        if kind == "layout":
            if rng.randrange(2) == 0:
                rows = rng.choice([d for d in range(1, MAX_DIM + 1) if d != rows])
            else:
                cols = rng.choice([d for d in range(1, MAX_DIM + 1) if d != cols])
            continue
        at = rng.randrange(len(subplots))
        sp = subplots[at]
        if kind == "color":
            new = rng.choice([c for c in PALETTE if c != sp.color])
            sp = dataclasses.replace(sp, color=new)
        elif kind == "type":
            new = rng.choice([t for t in CHART_TYPES if t != sp.chart_type])
            sp = dataclasses.replace(sp, chart_type=new)
        elif kind == "data":
            pos = rng.randrange(len(sp.data))
            new_val = rng.choice([v for v in VALUES if v != sp.data[pos]])
            data = sp.data[:pos] + (new_val,) + sp.data[pos + 1:]
            sp = dataclasses.replace(sp, data=data)
        elif kind == "title":
            if sp.title is None:
                sp = dataclasses.replace(sp, title=rng.choice(TITLE_WORDS))
            elif rng.randrange(2) == 0:
                sp = dataclasses.replace(sp, title=None)
            else:
                new = rng.choice([w for w in TITLE_WORDS if w != sp.title])
                sp = dataclasses.replace(sp, title=new)
        else:
            if rng.randrange(2) == 0:
                sp = dataclasses.replace(sp, grid=not sp.grid)
            else:
                sp = dataclasses.replace(sp, legend=not sp.legend)
        subplots[at] = sp

    return ChartProgram(rows, cols, tuple(subplots))


def gen_split(base_seed: int, count: int, difficulty: str) -> list[Task]:
    return [gen_reference(base_seed + k, difficulty) for k in range(count)]


def write_tasks(path: str | Path, tasks: list[Task]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for task in tasks:
            record = {
                "seed": task.seed,
                "difficulty": task.difficulty,
                "program": chartlang.serialize(task.program),
                "elements": chartlang.elements_to_json(task.elements),
            }
            fh.write(json.dumps(record, sort_keys=True) + "\n")


def read_tasks(path: str | Path) -> list[Task]:
    """Load a task file, re-executing every program and refusing records
    whose stored element sets do not match."""
    tasks = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
                program = chartlang.parse(record["program"])
                if isinstance(program, chartlang.ExecError):
                    raise ValueError(program.message)
                elements = chartlang.execute(program)
                stored = chartlang.elements_from_json(record["elements"])
                if elements != stored:
                    raise ValueError("stored element set does not match execution")
                task = Task(f"{record['difficulty']}-{record['seed']}",
                            record["seed"], record["difficulty"], program,
                            elements)
            except (KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
                raise ValueError(f"{path}: line {lineno}: {exc}") from exc
            tasks.append(task)
    return tasks
