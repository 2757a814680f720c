"""Category aggregation, rolling baselines and percent-change thresholds.

All arithmetic is done with :class:`decimal.Decimal` so that the same
inputs give the same alerts on every machine.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from decimal import Decimal
from enum import Enum
from typing import Iterable, Mapping, Sequence

from .errors import InsufficientData, ZeroBaseline
from .ingest import Period, Record, RecordSet
from .snapshots import render_value

MISSING_CATEGORY = "(missing)"
HUNDRED = Decimal(100)


class Direction(str, Enum):
    BOTH = "both"
    RISE_ONLY = "rise_only"
    FALL_ONLY = "fall_only"


@dataclass(frozen=True)
class ThresholdRule:
    number_of_periods: int
    threshold_pct: Decimal
    direction: Direction = Direction.BOTH

    def __post_init__(self):
        if self.number_of_periods < 1:
            raise ValueError("number_of_periods must be >= 1")
        object.__setattr__(self, "threshold_pct", Decimal(self.threshold_pct))
        if self.threshold_pct < 0:
            raise ValueError("threshold_pct must be >= 0")
        object.__setattr__(self, "direction", Direction(self.direction))


@dataclass(frozen=True)
class ThresholdFinding:
    category: str
    baseline: Decimal
    latest: Decimal
    pct_change: Decimal | None  # None marks new activity against a zero baseline
    direction: str  # "rise" | "fall"

    @property
    def new_activity(self) -> bool:
        return self.pct_change is None


@dataclass
class CategorySeries:
    category_field: str
    periods: list[Period] = field(default_factory=list)
    counts: dict[str, list[int]] = field(default_factory=dict)

    @classmethod
    def from_period_counts(cls, category_field: str,
                           per_period: Mapping[Period, Mapping[str, int]]) -> CategorySeries:
        periods = sorted(per_period)
        categories = sorted({c for counts in per_period.values() for c in counts})
        return cls(
            category_field=category_field,
            periods=periods,
            counts={c: [int(per_period[p].get(c, 0)) for p in periods] for c in categories},
        )

    @classmethod
    def from_record_sets(cls, category_field: str,
                         per_period: Mapping[Period, RecordSet]) -> CategorySeries:
        return cls.from_period_counts(
            category_field,
            {p: aggregate_by_category(rs, category_field) for p, rs in per_period.items()},
        )


def aggregate_by_category(records: RecordSet | Iterable[Record], category_field: str) -> dict[str, int]:
    counter: Counter[str] = Counter()
    for record in records:
        value = record.get(category_field)
        counter[MISSING_CATEGORY if value is None else render_value(value)] += 1
    return dict(counter)


def _mean(values: Sequence[Decimal]) -> Decimal:
    return sum(values, Decimal(0)) / len(values)


def rolling_mean(values: Sequence, n: int) -> Decimal:
    """Mean of the last ``n`` values."""
    if n < 1:
        raise ValueError("window must be positive")
    if len(values) < n:
        raise InsufficientData(f"need {n} values, have {len(values)}")
    return _mean([Decimal(v) for v in values[-n:]])


def pct_change(latest, baseline) -> Decimal:
    latest, baseline = Decimal(latest), Decimal(baseline)
    if baseline < 0 or latest < 0:
        raise ValueError("pct_change expects non-negative inputs")
    if baseline == 0:
        raise ZeroBaseline("baseline is zero")
    return HUNDRED * (latest - baseline) / baseline


def window_pct_change(latest, window: Sequence) -> Decimal:
    """Percent change of ``latest`` against the mean of ``window``.

    Computed as 100 * (latest * n - sum) / sum, a single rounded division,
    so results that are exactly representable come out exact.
    """
    total = sum((Decimal(v) for v in window), Decimal(0))
    if total == 0:
        raise ZeroBaseline("baseline is zero")
    return HUNDRED * (Decimal(latest) * len(window) - total) / total


def evaluate_threshold(pct, rule: ThresholdRule) -> str | None:
    pct = Decimal(pct)
    if pct >= rule.threshold_pct and rule.direction in (Direction.BOTH, Direction.RISE_ONLY):
        return "rise"
    if pct <= -rule.threshold_pct and rule.direction in (Direction.BOTH, Direction.FALL_ONLY):
        return "fall"
    return None


def _split(vector: Sequence[int], n: int) -> tuple[list[int], int]:
    if len(vector) < n + 1:
        raise InsufficientData(f"need {n + 1} periods, have {len(vector)}")
    return list(vector[-n - 1:-1]), vector[-1]


def category_finding(category: str, vector: Sequence[int], rule: ThresholdRule) -> ThresholdFinding | None:
    """Compare the last period with the mean of the ``number_of_periods`` before it."""
    window, latest = _split(vector, rule.number_of_periods)
    baseline = _mean([Decimal(v) for v in window])
    latest = Decimal(latest)
    try:
        pct = window_pct_change(latest, window)
    except ZeroBaseline:
        if latest > 0 and rule.direction is not Direction.FALL_ONLY:
            return ThresholdFinding(category, baseline, latest, None, "rise")
        return None
    direction = evaluate_threshold(pct, rule)
    if direction is None:
        return None
    return ThresholdFinding(category, baseline, latest, pct, direction)


def find_threshold_crossings(series: CategorySeries, rule: ThresholdRule) -> list[ThresholdFinding]:
    """Every category whose latest count moved past the threshold, by category name."""
    findings = []
    for category in sorted(series.counts):
        finding = category_finding(category, series.counts[category], rule)
        if finding is not None:
            findings.append(finding)
    return findings


class RankBy(str, Enum):
    LATEST_COUNT = "latest_count"
    ABS_PCT_CHANGE = "abs_pct_change"


def _abs_pct(vector: Sequence[int], n: int) -> Decimal:
    window, latest = _split(vector, n)
    try:
        return abs(window_pct_change(latest, window))
    except ZeroBaseline:
        return Decimal("Infinity") if latest > 0 else Decimal(0)


def rank_categories(series: CategorySeries, by: RankBy | str = RankBy.LATEST_COUNT,
                    number_of_periods: int | None = None) -> list[str]:
    by = RankBy(by)
    if by is RankBy.LATEST_COUNT:
        def score(c):
            vector = series.counts[c]
            return Decimal(vector[-1]) if vector else Decimal(0)
    else:
        if number_of_periods is None:
            raise ValueError("abs_pct_change ranking needs number_of_periods")
        if len(series.periods) < number_of_periods + 1:
            raise InsufficientData(
                f"need {number_of_periods + 1} periods, have {len(series.periods)}")

        def score(c):
            return _abs_pct(series.counts[c], number_of_periods)
    scored = {c: score(c) for c in series.counts}
    return sorted(scored, key=lambda c: (-scored[c], c))
