"""Adaptive segmentation: uniform windows, information scoring, tiered
gist budgets, and the interleaved sub-segment plan.

Scoring ranks segments by ppl * exp(-lambda * entropy); the top tier gets
twice the baseline gist budget, the bottom tier half. Tier sizes are chosen
so that the total budget stays within one rounding step per segment of
L / (2 * tau); exact quarters are used whenever the segment count divides
by four.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import no_grad
from .model import TEXT, ParameterSet, causal_layout, encode_window

TIER_TOP = "top25"
TIER_MID = "mid25"
TIER_BOTTOM = "bottom50"


@dataclass
class ScoringConfig:
    lambda_ent: float = 0.1
    tau: float = 4.0
    segment_len: int = 128

    def __post_init__(self):
        if self.tau < 1:
            raise ValueError(f"compression ratio must be >= 1, got {self.tau}")
        if self.lambda_ent < 0:
            raise ValueError("lambda_ent must be nonnegative")
        if self.segment_len < 1:
            raise ValueError("segment length must be positive")
        if self.segment_len < 4 * self.tau:
            raise ValueError(
                f"segment length {self.segment_len} too short for ratio {self.tau}; "
                f"need at least {4 * self.tau:.0f} so bottom-tier budgets stay whole")


@dataclass
class SubSegment:
    segment: int   # index of the parent segment
    start: int     # document offsets, end exclusive
    end: int
    leaf: int      # global gist-slot ordinal

    def to_dict(self) -> dict:
        return {"segment": self.segment, "start": self.start,
                "end": self.end, "leaf": self.leaf}


@dataclass
class SegmentPlan:
    segments: list[tuple[int, int]]
    scores: list[float]
    tiers: list[str]
    budgets: list[int]
    subsegments: list[SubSegment]
    total_leaves: int = field(init=False)

    def __post_init__(self):
        self.total_leaves = len(self.subsegments)

    def to_dict(self) -> dict:
        return {"segments": [list(s) for s in self.segments],
                "scores": self.scores, "tiers": self.tiers,
                "budgets": self.budgets, "leaves": self.total_leaves,
                "subsegments": [s.to_dict() for s in self.subsegments]}


def initial_segments(length: int, segment_len: int) -> list[tuple[int, int]]:
    """Tile [0, length) with uniform windows; the last one may be short."""
    if length < 1 or segment_len < 1:
        raise ValueError("length and segment length must be positive")
    return [(s, min(s + segment_len, length)) for s in range(0, length, segment_len)]


def segment_entropy(tokens) -> float:
    """Shannon entropy (nats) of the within-segment unigram distribution."""
    arr = np.asarray(tokens, dtype=np.int64)
    if arr.size == 0:
        raise ValueError("entropy of an empty segment is undefined")
    counts = np.bincount(arr)
    p = counts[counts > 0] / arr.size
    return float(-(p * np.log(p)).sum())


def segment_ppl(model: ParameterSet, tokens) -> float:
    """exp(mean next-token NLL) under the frozen backbone, segment-local."""
    arr = np.asarray(tokens, dtype=np.int64)
    if arr.size < 2:
        raise ValueError("perplexity needs at least two tokens")
    ids = arr.tolist()
    with no_grad():
        layout = causal_layout(ids, [TEXT] * len(ids), n_context=0, base_position=0)
        _, logits = encode_window(model, layout, [])
        ld = logits.data[:-1]
        m = ld.max(axis=1, keepdims=True)
        logz = m[:, 0] + np.log(np.exp(ld - m).sum(axis=1))
        nll = logz - ld[np.arange(len(ids) - 1), arr[1:]]
    return float(np.exp(nll.mean()))


def info_score(ppl: float, entropy: float, lambda_ent: float) -> float:
    """ppl * exp(-lambda * entropy)."""
    return float(ppl * math.exp(-lambda_ent * entropy))


def tier_counts(n_segments: int) -> tuple[int, int, int]:
    """(top, mid, bottom) tier sizes for a ranked list of segments.

    For 4 or more segments the sizes satisfy 3*top + mid == n_segments,
    which makes the doubled/halved budgets cancel exactly against the
    baseline; this is what keeps the total budget within rounding of
    L / (2 * tau). Tiny documents fall back to a top-heavy split.
    """
    s = n_segments
    if s < 1:
        raise ValueError("need at least one segment")
    if s <= 3:
        top = 1
        mid = 1 if s >= 2 else 0
        return top, mid, s - top - mid
    k, r = divmod(s, 4)
    top = k + 1 if r in (2, 3) else k
    mid = s - 3 * top
    return top, mid, s - top - mid


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def plan_tiers(scores, segment_lengths) -> list[str]:
    """Tier labels by score rank, stable on ties (earlier index wins).

    Only full-length segments enter the ranking pool; a short trailing
    segment rides the baseline (mid) rate, otherwise its doubled or halved
    budget would not cancel against the other tiers and the global ratio
    would drift.
    """
    sc = np.asarray(scores, dtype=np.float64)
    if sc.size == 0:
        raise ValueError("need at least one segment")
    if len(segment_lengths) != sc.size:
        raise ValueError("one length per segment required")
    n = max(segment_lengths)
    pool = [i for i in range(sc.size) if segment_lengths[i] == n]
    order = [pool[j] for j in np.argsort(-sc[pool], kind="stable")]
    top, mid, _ = tier_counts(len(pool))
    tiers = [TIER_MID] * sc.size
    for rank, idx in enumerate(order):
        if rank < top:
            tiers[idx] = TIER_TOP
        elif rank < top + mid:
            tiers[idx] = TIER_MID
        else:
            tiers[idx] = TIER_BOTTOM
    return tiers


def assign_tiers(scores) -> list[str]:
    """Tier labels when every segment has the same length."""
    return plan_tiers(scores, [1] * len(scores))


def allocate_budgets(scores, segment_lengths, tau: float) -> list[int]:
    """Gist budgets per segment: n/tau, n/2tau or n/4tau by tier, clamped."""
    if len(scores) == 0:
        raise ValueError("need at least one segment to budget")
    if len(scores) != len(segment_lengths):
        raise ValueError("one score per segment required")
    tiers = plan_tiers(scores, segment_lengths)
    divisor = {TIER_TOP: 1.0, TIER_MID: 2.0, TIER_BOTTOM: 4.0}
    budgets = []
    for tier, n_i in zip(tiers, segment_lengths):
        b = _round_half_up(n_i / (divisor[tier] * tau))
        budgets.append(max(1, min(b, n_i)))
    return budgets


def split_lengths(total: int, parts: int) -> list[int]:
    """Near-equal partition, longer pieces first."""
    base, extra = divmod(total, parts)
    return [base + 1] * extra + [base] * (parts - extra)


def build_plan(tokens, config: ScoringConfig, model: ParameterSet | None = None) -> SegmentPlan:
    """Full segmentation plan for one document.

    Without a model the perplexity term is held at 1.0 and ranking is
    entropy-only; budgets and spans are unaffected by that choice.
    """
    arr = np.asarray(tokens, dtype=np.int64)
    if arr.size == 0:
        raise ValueError("cannot plan an empty document")
    segments = initial_segments(arr.size, config.segment_len)
    scores = []
    for start, end in segments:
        seg = arr[start:end]
        ent = segment_entropy(seg)
        ppl = segment_ppl(model, seg) if model is not None and seg.size >= 2 else 1.0
        scores.append(info_score(ppl, ent, config.lambda_ent))
    lengths = [e - s for s, e in segments]
    tiers = plan_tiers(scores, lengths)
    budgets = allocate_budgets(scores, lengths, config.tau)
    subsegments = []
    leaf = 0
    for i, ((start, end), b) in enumerate(zip(segments, budgets)):
        offset = start
        for ln in split_lengths(end - start, b):
            subsegments.append(SubSegment(i, offset, offset + ln, leaf))
            offset += ln
            leaf += 1
        assert offset == end
    return SegmentPlan(segments, scores, tiers, budgets, subsegments)
