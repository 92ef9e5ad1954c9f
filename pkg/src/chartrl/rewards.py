"""Reward functions over executed chart programs.

Three layers feed the composite reward: a binary response-format gate,
rule-based element similarity (title text, chart types, colors in CIE
Lab, layout), and a rubric judge that grades six aspects out of 100. The
judge here is a deterministic stand-in with the same rubric shape as a
model-based grader; a remote grader can be plugged in over HTTP and falls
back to the local one on any transport failure.
"""

from __future__ import annotations

import json
import logging
import math
import threading
import urllib.error
import urllib.request
from collections import Counter
from dataclasses import dataclass
from typing import Optional, Sequence

from .chartlang import (
    CODE_CLOSE, CODE_OPEN, EOT, THINK_CLOSE, THINK_OPEN,
    ElementSet, ExecError, elements_to_json,
)

log = logging.getLogger(__name__)

_VALUE_SPAN = 9.5  # width of the quantized data range


@dataclass(frozen=True)
class RewardWeights:
    """Mixing weights: composite = (1 - alpha - beta) * format
    + alpha * rule + beta * judge."""

    alpha: float = 0.8
    beta: float = 0.1

    def __post_init__(self):
        if not (math.isfinite(self.alpha) and self.alpha >= 0.0):
            raise ValueError(f"alpha must be finite and >= 0, got {self.alpha}")
        if not (math.isfinite(self.beta) and self.beta >= 0.0):
            raise ValueError(f"beta must be finite and >= 0, got {self.beta}")
        if self.alpha + self.beta > 1.0:
            raise ValueError(
                f"alpha + beta must not exceed 1, got {self.alpha + self.beta}")

    @property
    def format_weight(self) -> float:
        return 1.0 - self.alpha - self.beta


@dataclass(frozen=True)
class TrajRewardParams:
    """Trajectory reward shaping: R = r2 + gamma * r1 + eta * [r2 > r1]."""

    gamma: float = 0.0
    eta: float = 0.0

    def __post_init__(self):
        for name in ("gamma", "eta"):
            val = getattr(self, name)
            if not (math.isfinite(val) and val >= 0.0):
                raise ValueError(f"{name} must be finite and >= 0, got {val}")


@dataclass(frozen=True)
class RuleScores:
    text: float
    type: float
    color: float
    layout: float
    rule: float


@dataclass(frozen=True)
class RubricScore:
    chart_types: int
    layout: int
    text: int
    data: int
    style: int
    clarity: int

    @property
    def total(self) -> int:
        return (self.chart_types + self.layout + self.text + self.data
                + self.style + self.clarity)


@dataclass(frozen=True)
class RewardBreakdown:
    format: float
    text: float
    type: float
    color: float
    layout: float
    rule: float
    judge: float
    composite: float


_FENCE_OR_EOT = frozenset((THINK_OPEN, THINK_CLOSE, CODE_OPEN, CODE_CLOSE, EOT))


def format_reward(response: Sequence[str]) -> float:
    """1.0 iff the response is exactly one think block followed by one
    code block and nothing else. A single trailing end-of-turn token is
    tolerated; fence tokens inside either body are not."""
    toks = list(response)
    if toks and toks[-1] == EOT:
        toks = toks[:-1]
    if not toks or toks[0] != THINK_OPEN:
        return 0.0
    i = 1
    while i < len(toks) and toks[i] not in _FENCE_OR_EOT:
        i += 1
    if i >= len(toks) or toks[i] != THINK_CLOSE:
        return 0.0
    i += 1
    if i >= len(toks) or toks[i] != CODE_OPEN:
        return 0.0
    i += 1
    while i < len(toks) and toks[i] not in _FENCE_OR_EOT:
        i += 1
    if i >= len(toks) or toks[i] != CODE_CLOSE:
        return 0.0
    return 1.0 if i + 1 == len(toks) else 0.0


def _multiset_f1(pred: Counter, ref: Counter) -> float:
    np_, nr = sum(pred.values()), sum(ref.values())
    if np_ == 0 and nr == 0:
        return 1.0
    if np_ == 0 or nr == 0:
        return 0.0
    match = sum((pred & ref).values())
    if match == 0:
        return 0.0
    precision = match / np_
    recall = match / nr
    return 2.0 * precision * recall / (precision + recall)


def text_score(pred: ElementSet, ref: ElementSet) -> float:
    return _multiset_f1(pred.texts, ref.texts)


def type_score(pred: ElementSet, ref: ElementSet) -> float:
    return _multiset_f1(pred.types, ref.types)


def srgb_to_lab(rgb: tuple[int, int, int]) -> tuple[float, float, float]:
    """sRGB (0..255) to CIE Lab under D65 and the 2-degree observer."""

    def linearize(channel: int) -> float:
        c = channel / 255.0
        if c <= 0.04045:
            return c / 12.92
        return ((c + 0.055) / 1.055) ** 2.4

    r, g, b = (linearize(ch) * 100.0 for ch in rgb)
    x = r * 0.4124 + g * 0.3576 + b * 0.1805
    y = r * 0.2126 + g * 0.7152 + b * 0.0722
    z = r * 0.0193 + g * 0.1192 + b * 0.9505

    def f(t: float) -> float:
        if t > 0.008856:
            return t ** (1.0 / 3.0)
        return 7.787 * t + 16.0 / 116.0

    fx = f(x / 95.047)
    fy = f(y / 100.0)
    fz = f(z / 108.883)
    return 116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)


def delta_e(lab1: tuple[float, float, float],
            lab2: tuple[float, float, float]) -> float:
    return math.sqrt(sum((a - b) ** 2 for a, b in zip(lab1, lab2)))


def color_score(pred: ElementSet, ref: ElementSet) -> float:
    """Greedy closest-pair matching of subplot colors in Lab space.

    Pair similarity is max(0, 1 - deltaE/100); the score is
    2 * sum(similarities) / (len(pred) + len(ref)), so unmatched extras
    on either side dilute it. Ties break on the earliest index pair.
    """
    pred_lab = [srgb_to_lab(c) for c in pred.colors]
    ref_lab = [srgb_to_lab(c) for c in ref.colors]
    if not pred_lab and not ref_lab:
        return 1.0
    pairs = sorted(
        (delta_e(p, r), i, j)
        for i, p in enumerate(pred_lab)
        for j, r in enumerate(ref_lab)
    )
    used_pred: set[int] = set()
    used_ref: set[int] = set()
    sim_sum = 0.0
    for de, i, j in pairs:
        if i in used_pred or j in used_ref:
            continue
        used_pred.add(i)
        used_ref.add(j)
        sim_sum += max(0.0, 1.0 - de / 100.0)
    return 2.0 * sim_sum / (len(pred_lab) + len(ref_lab))


def layout_score(pred: ElementSet, ref: ElementSet) -> float:
    rows_eq = 1.0 if pred.layout[0] == ref.layout[0] else 0.0
    cols_eq = 1.0 if pred.layout[1] == ref.layout[1] else 0.0
    return (rows_eq + cols_eq) / 2.0


def rule_reward(pred: ElementSet | ExecError, ref: ElementSet) -> RuleScores:
    """Mean of the four element similarities; all zero on runtime error."""
    if isinstance(pred, ExecError):
        return RuleScores(0.0, 0.0, 0.0, 0.0, 0.0)
    t = text_score(pred, ref)
    ty = type_score(pred, ref)
    c = color_score(pred, ref)
    l = layout_score(pred, ref)
    return RuleScores(t, ty, c, l, (t + ty + c + l) / 4.0)


def _data_similarity(pred: ElementSet, ref: ElementSet) -> float:
    """Mean over reference subplot indices of per-series similarity:
    max(0, 1 - mean|diff|/9.5) over the aligned prefix, scaled by the
    length ratio min/max. An index missing from pred scores 0."""
    ref_data = ref.data_by_index
    if not ref_data:
        return 1.0
    pred_data = pred.data_by_index
    total = 0.0
    for index, r_series in ref_data.items():
        p_series = pred_data.get(index)
        if p_series is None:
            continue
        m = min(len(p_series), len(r_series))
        big = max(len(p_series), len(r_series))
        mean_diff = sum(abs(p_series[k] - r_series[k]) for k in range(m)) / m
        total += max(0.0, 1.0 - mean_diff / _VALUE_SPAN) * (m / big)
    return total / len(ref_data)


def _style_similarity(pred: ElementSet, ref: ElementSet) -> float:
    """Half color similarity, half exact (grid, legend) matches aligned
    by subplot index."""
    ref_flags = ref.style_flags
    if ref_flags:
        pred_flags = pred.style_flags
        hits = sum(1 for i, fl in ref_flags.items() if pred_flags.get(i) == fl)
        flag_rate = hits / len(ref_flags)
    else:
        flag_rate = 1.0
    return 0.5 * color_score(pred, ref) + 0.5 * flag_rate


def heuristic_judge(pred: ElementSet | ExecError,
                    ref: ElementSet) -> tuple[RubricScore, float]:
    """Deterministic rubric grader: chart types 20, layout 10, text 20,
    data 20, style 20, clarity 10. Returns the rubric and total/100.
    Runtime errors score zero everywhere."""
    if isinstance(pred, ExecError):
        rubric = RubricScore(0, 0, 0, 0, 0, 0)
        return rubric, 0.0
    rubric = RubricScore(
        chart_types=round(20 * type_score(pred, ref)),
        layout=round(10 * layout_score(pred, ref)),
        text=round(20 * text_score(pred, ref)),
        data=round(20 * _data_similarity(pred, ref)),
        style=round(20 * _style_similarity(pred, ref)),
        clarity=max(0, 10 - 2 * pred.overlap_count),
    )
    return rubric, rubric.total / 100.0


def composite_reward(format_r: float, rule_r: float, judge_r: float,
                     weights: RewardWeights) -> float:
    return (weights.format_weight * format_r + weights.alpha * rule_r
            + weights.beta * judge_r)


def trajectory_reward(r1: float, r2: float, params: TrajRewardParams) -> float:
    """Two-turn trajectory reward with a discounted first turn and a
    strict-improvement boost."""
    boost = params.eta if r2 > r1 else 0.0
    return r2 + params.gamma * r1 + boost


_ASPECT_MAX = {"chart_types": 20, "layout": 10, "text": 20, "data": 20,
               "style": 20, "clarity": 10}


class RemoteJudge:
    """HTTP rubric grader with a local fallback.

    POSTs {"pred": ..., "ref": ...} element-set JSON and expects
    {"aspects": {six named integers}, "total": int}. Any transport error,
    timeout, or malformed reply falls back to heuristic_judge and bumps
    fallback_count (thread safe; concurrent requests are capped).
    """

    def __init__(self, url: str, timeout_ms: int = 2000, max_inflight: int = 8):
        self.url = url
        self.timeout = timeout_ms / 1000.0
        self._slots = threading.Semaphore(max_inflight)
        self._lock = threading.Lock()
        self._fallbacks = 0

    @property
    def fallback_count(self) -> int:
        with self._lock:
            return self._fallbacks

    def _fallback(self, pred, ref, reason: str) -> float:
        with self._lock:
            self._fallbacks += 1
        log.warning("remote judge fallback: %s", reason)
        return heuristic_judge(pred, ref)[1]

    def score(self, pred: ElementSet | ExecError, ref: ElementSet) -> float:
        if isinstance(pred, ExecError):
            return 0.0
        body = json.dumps({"pred": elements_to_json(pred),
                           "ref": elements_to_json(ref)}).encode("utf-8")
        request = urllib.request.Request(
            self.url, data=body, headers={"Content-Type": "application/json"})
        try:
            with self._slots:
                with urllib.request.urlopen(request, timeout=self.timeout) as resp:
                    reply = json.loads(resp.read().decode("utf-8"))
        except (urllib.error.URLError, OSError, ValueError) as exc:
            return self._fallback(pred, ref, repr(exc))
        return self._parse_reply(reply, pred, ref)

    def _parse_reply(self, reply, pred, ref) -> float:
        if not isinstance(reply, dict):
            return self._fallback(pred, ref, "reply is not an object")
        aspects = reply.get("aspects")
        total = reply.get("total")
        if not isinstance(aspects, dict) or set(aspects) != set(_ASPECT_MAX):
            return self._fallback(pred, ref, "bad aspect keys")
        for name, cap in _ASPECT_MAX.items():
            val = aspects[name]
            if not isinstance(val, int) or isinstance(val, bool) or not 0 <= val <= cap:
                return self._fallback(pred, ref, f"bad aspect value: {name}")
        if not isinstance(total, int) or isinstance(total, bool) or not 0 <= total <= 100:
            return self._fallback(pred, ref, "bad total")
        return total / 100.0
