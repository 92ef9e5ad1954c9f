"""ChartLang: a miniature chart-description language.

A program describes a grid of subplots (type, color, optional title and
style flags, a short data series each). Executing a program does not draw
anything; it produces an ElementSet, the readout of what a renderer would
have put on screen. That readout is the ground truth every similarity
score in this package is computed against, so parsing, execution, and
canonicalization are all deterministic and total (errors are values, not
exceptions).

Grammar (whitespace-separated tokens, documented in docs/chartlang.md):

    program := LAYOUT r c subplot+
    subplot := SUBPLOT i TYPE t COLOR k opts DATA v* END

where opts is any arrangement of TITLE w, GRID, LEGEND (each at most
once). rows/cols are 1..3, indices 0..8, data holds at most 8 values from
the quantized set {0.0, 0.5, ..., 9.5}. Empty data parses but fails at
execution time (E_NODATA).
"""

from __future__ import annotations

import hashlib
from collections import Counter
from dataclasses import dataclass
from typing import Optional, Sequence

MAX_DIM = 3
MAX_INDEX = 8
MAX_DATA = 8

CHART_TYPES = ("bar", "line", "scatter", "pie")

# Fixed palette; color similarity works on these sRGB coordinates.
PALETTE: dict[str, tuple[int, int, int]] = {
    "red": (255, 0, 0),
    "green": (0, 128, 0),
    "blue": (0, 0, 255),
    "orange": (255, 165, 0),
    "purple": (128, 0, 128),
    "cyan": (0, 255, 255),
    "magenta": (255, 0, 255),
    "yellow": (255, 255, 0),
    "black": (0, 0, 0),
    "gray": (128, 128, 128),
    "brown": (165, 42, 42),
    "navy": (0, 0, 128),
}
PALETTE_INVERSE = {rgb: name for name, rgb in PALETTE.items()}

TITLE_WORDS = (
    "sales", "revenue", "profit", "cost", "growth", "usage", "speed",
    "error", "load", "temp", "score", "rate", "count", "time", "size",
    "depth",
)

VALUE_TOKENS = tuple(f"{k / 2:.1f}" for k in range(20))
VALUES = tuple(k / 2 for k in range(20))

KEYWORDS = ("LAYOUT", "SUBPLOT", "TYPE", "COLOR", "TITLE", "GRID",
            "LEGEND", "DATA", "END")
INT_TOKENS = tuple(str(i) for i in range(MAX_INDEX + 1))

THINK_OPEN = "<THINK>"
THINK_CLOSE = "</THINK>"
CODE_OPEN = "<CODE>"
CODE_CLOSE = "</CODE>"
EOT = "<EOT>"
TASK_OPEN = "<TASK>"
GEN = "<GEN>"
FB_OK = "<FB_OK>"
FB_ERR = "<FB_ERR>"
FIX = "fix"

SPECIAL_TOKENS = (THINK_OPEN, THINK_CLOSE, CODE_OPEN, CODE_CLOSE, EOT,
                  TASK_OPEN, GEN, FB_OK, FB_ERR, FIX)

ERROR_CODES = ("E_PARSE", "E_INDEX", "E_DUP", "E_NODATA")

_FENCES = frozenset((THINK_OPEN, THINK_CLOSE, CODE_OPEN, CODE_CLOSE))


class Vocabulary:
    """Fixed token inventory with contiguous ids. Size is pinned per version."""

    def __init__(self, tokens: Sequence[str]):
        self.tokens = tuple(tokens)
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("duplicate token in vocabulary")
        self._ids = {tok: i for i, tok in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._ids

    def id(self, token: str) -> int:
        try:
            return self._ids[token]
        except KeyError:
            raise ValueError(f"unknown token: {token!r}") from None

    def token(self, token_id: int) -> str:
        return self.tokens[token_id]

    @property
    def content_hash(self) -> str:
        digest = hashlib.sha256(" ".join(self.tokens).encode("utf-8"))
        return digest.hexdigest()[:16]


VOCAB = Vocabulary(
    KEYWORDS + INT_TOKENS + CHART_TYPES + tuple(PALETTE) + TITLE_WORDS
    + VALUE_TOKENS + SPECIAL_TOKENS + ERROR_CODES
)


@dataclass(frozen=True)
class SubplotSpec:
    index: int
    chart_type: str
    color: str
    title: Optional[str] = None
    grid: bool = False
    legend: bool = False
    data: tuple[float, ...] = ()


@dataclass(frozen=True)
class ChartProgram:
    rows: int
    cols: int
    subplots: tuple[SubplotSpec, ...]


@dataclass(frozen=True)
class ExecError:
    """Typed runtime or parse failure. The code picks the message template."""

    code: str
    message: str

    @staticmethod
    def parse_error(pos: int) -> "ExecError":
        return ExecError("E_PARSE", f"parse error at position {pos}")

    @staticmethod
    def index_error(index: int, rows: int, cols: int) -> "ExecError":
        return ExecError(
            "E_INDEX",
            f"subplot index {index} out of range for layout {rows}x{cols}",
        )

    @staticmethod
    def dup_error(index: int) -> "ExecError":
        return ExecError("E_DUP", f"duplicate subplot index {index}")

    @staticmethod
    def nodata_error(index: int) -> "ExecError":
        return ExecError("E_NODATA", f"subplot {index} has no data")


@dataclass(frozen=True)
class SubplotElements:
    index: int
    chart_type: str
    color: tuple[int, int, int]
    title: Optional[str]
    grid: bool
    legend: bool
    data: tuple[float, ...]


@dataclass(frozen=True)
class ElementSet:
    """Readout of an executed program: everything a renderer would show.

    Cells are index-sorted. overlap_count is the number of colliding text
    item pairs, see _overlap_count for the placement model.
    """

    layout: tuple[int, int]
    cells: tuple[SubplotElements, ...]
    overlap_count: int

    @property
    def types(self) -> Counter:
        return Counter(c.chart_type for c in self.cells)

    @property
    def texts(self) -> Counter:
        return Counter(c.title for c in self.cells if c.title is not None)

    @property
    def colors(self) -> list[tuple[int, int, int]]:
        return [c.color for c in self.cells]

    @property
    def data_by_index(self) -> dict[int, tuple[float, ...]]:
        return {c.index: c.data for c in self.cells}

    @property
    def style_flags(self) -> dict[int, tuple[bool, bool]]:
        return {c.index: (c.grid, c.legend) for c in self.cells}


class _Cursor:
    def __init__(self, tokens: Sequence[str]):
        self.tokens = list(tokens)
        self.pos = 0

    def peek(self) -> Optional[str]:
        if self.pos < len(self.tokens):
            return self.tokens[self.pos]
        return None

    def take(self) -> Optional[str]:
        tok = self.peek()
        if tok is not None:
            self.pos += 1
        return tok


def parse(tokens: Sequence[str]) -> ChartProgram | ExecError:
    """Parse a token sequence. Total: any malformed input yields E_PARSE
    whose message carries the 0-based position of the first offending
    token (the sequence length when input ends too early)."""
    cur = _Cursor(tokens)

    def fail() -> ExecError:
        return ExecError.parse_error(cur.pos)

    def expect(keyword: str) -> bool:
        if cur.peek() == keyword:
            cur.take()
            return True
        return False

    if not expect("LAYOUT"):
        return fail()
    dims = []
    for _ in range(2):
        tok = cur.peek()
        if tok not in INT_TOKENS or not 1 <= int(tok) <= MAX_DIM:
            return fail()
        dims.append(int(cur.take()))
    rows, cols = dims

    subplots = []
    while True:
        if not expect("SUBPLOT"):
            return fail()
        tok = cur.peek()
        if tok not in INT_TOKENS:
            return fail()
        index = int(cur.take())
        if not expect("TYPE"):
            return fail()
        tok = cur.peek()
        if tok not in CHART_TYPES:
            return fail()
        chart_type = cur.take()
        if not expect("COLOR"):
            return fail()
        tok = cur.peek()
        if tok not in PALETTE:
            return fail()
        color = cur.take()

        # Optional elements in any surface order; the AST keeps no order.
        title: Optional[str] = None
        grid = False
        legend = False
        seen_opts: set[str] = set()
        while cur.peek() in ("TITLE", "GRID", "LEGEND"):
            opt = cur.peek()
            if opt in seen_opts:
                return fail()
            seen_opts.add(opt)
            cur.take()
            if opt == "TITLE":
                tok = cur.peek()
                if tok not in TITLE_WORDS:
                    return fail()
                title = cur.take()
            elif opt == "GRID":
                grid = True
            else:
                legend = True

        if not expect("DATA"):
            return fail()
        data = []
        while cur.peek() in VALUE_TOKENS:
            if len(data) == MAX_DATA:
                return fail()
            data.append(float(cur.take()))
        if not expect("END"):
            return fail()
        subplots.append(SubplotSpec(index, chart_type, color, title, grid,
                                    legend, tuple(data)))
        if cur.peek() is None:
            break

    return ChartProgram(rows, cols, tuple(subplots))


def execute(program: ChartProgram) -> ElementSet | ExecError:
    """Run a program. Violations are checked per subplot in listed order
    (bounds, then duplication, then empty data); the first one wins."""
    ncells = program.rows * program.cols
    seen: set[int] = set()
    for sp in program.subplots:
        if sp.index < 0 or sp.index >= ncells:
            return ExecError.index_error(sp.index, program.rows, program.cols)
        if sp.index in seen:
            return ExecError.dup_error(sp.index)
        seen.add(sp.index)
        if not sp.data:
            return ExecError.nodata_error(sp.index)

    cells = tuple(
        SubplotElements(sp.index, sp.chart_type, PALETTE[sp.color], sp.title,
                        sp.grid, sp.legend, sp.data)
        for sp in sorted(program.subplots, key=lambda s: s.index)
    )
    return ElementSet((program.rows, program.cols), cells,
                      _overlap_count(program))


def _overlap_count(program: ChartProgram) -> int:
    """Pairs of text items sharing a grid cell.

    Placement model: a title is drawn inside its subplot's cell. Legends
    are drawn in the figure margin, except in a 1x1 layout where there is
    no margin and the legend lands in the single cell too.
    """
    items = [sp.index for sp in program.subplots if sp.title is not None]
    if program.rows == 1 and program.cols == 1:
        items.extend(sp.index for sp in program.subplots if sp.legend)
    count = 0
    for i in range(len(items)):
        for j in range(i + 1, len(items)):
            if items[i] == items[j]:
                count += 1
    return count


def _subplot_tokens(sp: SubplotSpec) -> list[str]:
    toks = ["SUBPLOT", str(sp.index), "TYPE", sp.chart_type, "COLOR", sp.color]
    if sp.title is not None:
        toks += ["TITLE", sp.title]
    if sp.grid:
        toks.append("GRID")
    if sp.legend:
        toks.append("LEGEND")
    toks.append("DATA")
    toks += [f"{v:.1f}" for v in sp.data]
    toks.append("END")
    return toks


def serialize(program: ChartProgram) -> list[str]:
    """Emit tokens in listed subplot order, optional elements in the
    fixed order TITLE, GRID, LEGEND."""
    toks = ["LAYOUT", str(program.rows), str(program.cols)]
    for sp in program.subplots:
        toks += _subplot_tokens(sp)
    return toks


def canonicalize(program: ChartProgram) -> list[str]:
    """Canonical token form: subplots sorted by index, flags in fixed
    order. Idempotent: canonicalize(parse(canonicalize(p))) is a fixed
    point."""
    ordered = ChartProgram(
        program.rows, program.cols,
        tuple(sorted(program.subplots, key=lambda s: s.index)),
    )
    return serialize(ordered)


def extract_code_block(response: Sequence[str]) -> Optional[list[str]]:
    """Tokens strictly between the last <CODE> and its matching </CODE>,
    or None when the fence is missing or unclosed."""
    toks = list(response)
    last_open = None
    for i, tok in enumerate(toks):
        if tok == CODE_OPEN:
            last_open = i
    if last_open is None:
        return None
    for j in range(last_open + 1, len(toks)):
        if toks[j] == CODE_CLOSE:
            return toks[last_open + 1:j]
    return None


def serialize_elements(elements: ElementSet) -> list[str]:
    """Token readout of an ElementSet: layout, then per index-sorted cell
    its type, color, optional title, flags, data."""
    toks = ["LAYOUT", str(elements.layout[0]), str(elements.layout[1])]
    for cell in elements.cells:
        toks += ["SUBPLOT", str(cell.index), "TYPE", cell.chart_type,
                 "COLOR", PALETTE_INVERSE[cell.color]]
        if cell.title is not None:
            toks += ["TITLE", cell.title]
        if cell.grid:
            toks.append("GRID")
        if cell.legend:
            toks.append("LEGEND")
        toks.append("DATA")
        toks += [f"{v:.1f}" for v in cell.data]
        toks.append("END")
    return toks


def elements_to_json(elements: ElementSet) -> dict:
    return {
        "layout": list(elements.layout),
        "cells": [
            {
                "index": c.index,
                "type": c.chart_type,
                "color": list(c.color),
                "title": c.title,
                "grid": c.grid,
                "legend": c.legend,
                "data": list(c.data),
            }
            for c in elements.cells
        ],
        "overlap_count": elements.overlap_count,
    }


def elements_from_json(obj: dict) -> ElementSet:
    cells = tuple(
        SubplotElements(c["index"], c["type"], tuple(c["color"]), c["title"],
                        c["grid"], c["legend"], tuple(c["data"]))
        for c in obj["cells"]
    )
    return ElementSet(tuple(obj["layout"]), cells, obj["overlap_count"])
