"""Running one use case end to end: fetch, normalize, compare, draft alerts."""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field
from datetime import datetime, timezone
from decimal import ROUND_HALF_UP, Decimal
from typing import Any, Callable

from .config import StringerKind, UseCase
from .errors import (
    CorruptSnapshot,
    DatastringerError,
    FetchError,
    ParseError,
    RuleEvalError,
    InsufficientData,
    TemplateError,
    UseCaseError,
)
from .ingest import Fetcher, Period, RecordSet, SourceSpec, parse_payload, render_url
from .jsonutil import format_decimal
from .rules import eval_rule, max_window, parse_rule
from .snapshots import LATEST, SnapshotStore, canonical_line, canonicalize, content_hash, diff, render_value
from .stats import (
    CategorySeries,
    Direction,
    ThresholdFinding,
    ThresholdRule,
    find_threshold_crossings,
)

log = logging.getLogger(__name__)

DEFAULT_THRESHOLD_HEADLINE = "{category_title} {direction_phrase} by {pct}% in {place}"
DEFAULT_NEW_ACTIVITY_HEADLINE = "{category_title} reported in {place} after {number_of_periods} quiet months"
DEFAULT_DIFF_HEADLINE = "{place} data changed: {added} added, {removed} removed, {changed} changed"
DEFAULT_RULE_HEADLINE = "{category_title}: rule matched in {place}"
BODY_LINE_CAP = 50

STORY = "story"
INFO = "info"


@dataclass
class AlertDraft:
    use_case_id: str
    headline: str
    body: str
    dedup_key: str
    severity: str = STORY
    metrics: dict[str, Any] = field(default_factory=dict)
    category: str = ""

    def sort_key(self):
        return (self.category, self.headline)


@dataclass
class StringerContext:
    now: datetime
    store: SnapshotStore
    fetcher: Fetcher
    use_case: UseCase | None = None

    @property
    def period(self) -> Period:
        """Current calendar month (UTC)."""
        return Period.of(self.now)

    @property
    def latest_complete_period(self) -> Period:
        return self.period.shift(-1)


# -- headlines ---------------------------------------------------------------

_TEMPLATE_FIELD = re.compile(r"\{([^{}]+)\}")
_DIRECTION_PHRASES = {"rise": "on the rise", "fall": "down"}


def category_title(category: str) -> str:
    words = category.replace("-", " ").replace("_", " ").split()
    text = " ".join(words).lower()
    return text[:1].upper() + text[1:]


def _round(value, places: str) -> str:
    return str(abs(Decimal(value)).quantize(Decimal(places), rounding=ROUND_HALF_UP))


def _render(value: Any) -> str:
    if isinstance(value, Decimal) and value.is_finite():
        return format_decimal(value)
    if isinstance(value, (Decimal, int, float, bool)) or value is None:
        return render_value(value)
    return str(value)


def format_headline(template: str, bindings: dict[str, Any]) -> str:
    """Fill ``{placeholders}`` in a headline template.

    Besides plain bindings, ``category_title``, ``direction_phrase``,
    ``pct`` (absolute, rounded half-up to an integer) and ``pct_precise``
    (absolute, one decimal) are derived from ``category``, ``direction``
    and ``pct_change``. Unknown placeholders are left as they are.
    """

    def derive(name: str) -> str | None:
        if name in bindings and bindings[name] is not None:
            return _render(bindings[name])
        if name == "category_title" and bindings.get("category") is not None:
            return category_title(str(bindings["category"]))
        if name == "direction_phrase" and bindings.get("direction") in _DIRECTION_PHRASES:
            return _DIRECTION_PHRASES[bindings["direction"]]
        pct = bindings.get("pct_change")
        if pct is not None and Decimal(pct).is_finite():
            if name == "pct":
                return _round(pct, "1")
            if name == "pct_precise":
                return _round(pct, "0.1")
        return None

    def substitute(m: re.Match) -> str:
        value = derive(m.group(1))
        if value is None:
            log.warning("headline placeholder {%s} has no value", m.group(1))
            return m.group(0)
        return value

    return _TEMPLATE_FIELD.sub(substitute, template)


# -- helpers -----------------------------------------------------------------

def source_spec(params: dict[str, str]) -> SourceSpec:
    return SourceSpec(
        url_template=params["url"],
        format=params.get("format", "json"),
        record_path=params.get("record_path") or None,
        timeout=float(params.get("timeout", "30")),
        headers={k[len("header."):]: v for k, v in params.items() if k.startswith("header.")},
        has_header=params.get("has_header", "true").lower() == "true",
    )


def place_name(uc: UseCase) -> str:
    params = uc.parameters
    if params.get("place"):
        return params["place"]
    if params.get("lat") and params.get("lng"):
        return f"{params['lat']},{params['lng']}"
    return uc.id


def fetch_records(ctx: StringerContext, uc: UseCase, source: SourceSpec,
                  period: Period | None = None) -> RecordSet:
    url = render_url(source.url_template, uc.parameters, period)
    raw = ctx.fetcher.fetch(source, url)
    records = parse_payload(raw.body, source)
    records.source_url = url
    records.fetched_at = ctx.now
    records.period = period
    return records


def operational_draft(uc: UseCase, ctx: StringerContext, exc: Exception) -> AlertDraft:
    category = "(error)"
    return AlertDraft(
        use_case_id=uc.id,
        headline=f"{uc.id}: could not update data ({type(exc).__name__})",
        body=f"The use case {uc.id!r} failed and produced no findings this run.\n\n{exc}\n",
        dedup_key=f"{uc.id}/{ctx.period}/{category}",
        severity=INFO,
        metrics={"error": str(exc), "period": str(ctx.period)},
        category=category,
    )


_OPERATIONAL = (FetchError, ParseError, TemplateError)


# -- snapshot diff -----------------------------------------------------------

def _change_lines(result, limit: int = BODY_LINE_CAP) -> list[str]:
    lines = [f"+ {canonical_line(r)}" for r in result.added]
    lines += [f"- {canonical_line(r)}" for r in result.removed]
    lines += [f"~ {c.record_key} {c.field}: {_render(c.old)} -> {_render(c.new)}" for c in result.changed]
    if len(lines) > limit:
        lines = lines[:limit] + [f"+{len(lines) - limit} more"]
    return lines


def run_snapshot_diff(uc: UseCase, ctx: StringerContext) -> list[AlertDraft]:
    params = uc.parameters
    try:
        source = source_spec(params)
        current = fetch_records(ctx, uc, source)
    except _OPERATIONAL as exc:
        return [operational_draft(uc, ctx, exc)]

    drafts: list[AlertDraft] = []
    try:
        previous = ctx.store.load_previous(uc.id, LATEST)
    except CorruptSnapshot as exc:
        log.warning("%s: %s", uc.id, exc)
        drafts.append(operational_draft(uc, ctx, exc))
        previous = None

    payload = canonicalize(current)
    if previous is None:
        ctx.store.save(uc.id, LATEST, current, ctx.now)
        return drafts
    if previous.content_hash == content_hash(payload):
        return drafts

    key_fields = [f.strip() for f in params.get("key_fields", "").split(",") if f.strip()]
    result = diff(previous.records(), current, key_fields)
    snap = ctx.store.save(uc.id, LATEST, current, ctx.now)
    counts = result.counts()
    bindings = {**counts, "place": place_name(uc), "use_case": uc.id, "period": str(ctx.period)}
    headline = format_headline(uc.headline_template or DEFAULT_DIFF_HEADLINE, bindings)
    body = "\n".join([
        f"Source: {current.source_url}",
        f"Previous version captured {previous.captured_at.isoformat()}",
        f"{counts['added']} added, {counts['removed']} removed, {counts['changed']} changed",
        "",
        *_change_lines(result),
    ]) + "\n"
    drafts.append(AlertDraft(
        use_case_id=uc.id,
        headline=headline,
        body=body,
        dedup_key=f"{uc.id}/diff/{snap.content_hash}",
        severity=STORY,
        metrics={**counts, "content_hash": snap.content_hash},
        category="",
    ))
    return drafts


# -- monthly series ----------------------------------------------------------

class _MissingPeriod(Exception):
    def __init__(self, period: Period):
        self.period = period


def period_records(ctx: StringerContext, uc: UseCase, source: SourceSpec, period: Period) -> RecordSet:
    """Records for one month, from the snapshot cache or fetched (and cached) once."""
    key = str(period)
    try:
        cached = ctx.store.load_previous(uc.id, key)
    except CorruptSnapshot as exc:
        log.warning("%s: refetching %s: %s", uc.id, key, exc)
        cached = None
    if cached is not None:
        records = cached.records()
        records.period = period
        return records
    records = fetch_records(ctx, uc, source, period)
    if not records.records:
        raise _MissingPeriod(period)
    ctx.store.save(uc.id, key, records, ctx.now)
    return records


def _collect_periods(ctx: StringerContext, uc: UseCase, source: SourceSpec,
                     periods: list[Period]) -> dict[Period, RecordSet] | AlertDraft:
    out = {}
    latest = periods[-1]
    for p in periods:
        try:
            out[p] = period_records(ctx, uc, source, p)
        except _MissingPeriod as missing:
            if missing.period == latest:
                what = f"no data published yet for {latest}"
            else:
                what = f"insufficient history upstream: {missing.period} returned no records"
            return AlertDraft(
                use_case_id=uc.id,
                headline=f"{uc.id}: {what}",
                body=f"Skipped comparison for {latest}: {what}.\n",
                dedup_key=f"{uc.id}/{latest}/(insufficient-data)",
                severity=INFO,
                metrics={"period": str(latest), "missing_period": str(missing.period)},
                category="(insufficient-data)",
            )
    return out


def threshold_rule(params: dict[str, str]) -> ThresholdRule:
    return ThresholdRule(
        number_of_periods=int(params["numberOfMonths"]),
        threshold_pct=Decimal(params["threshold"]),
        direction=Direction(params.get("direction", "both")),
    )


def _finding_draft(uc: UseCase, finding: ThresholdFinding, rule: ThresholdRule,
                   latest: Period, source_url: str) -> AlertDraft:
    metrics = {
        "category": finding.category,
        "pct_change": finding.pct_change,
        "baseline": finding.baseline,
        "latest": finding.latest,
        "period": str(latest),
        "threshold": rule.threshold_pct,
        "number_of_periods": rule.number_of_periods,
        "direction": finding.direction,
    }
    bindings = {**metrics, "place": place_name(uc)}
    if finding.new_activity:
        template = uc.parameters.get("new_activity_template") or DEFAULT_NEW_ACTIVITY_HEADLINE
        change = "new activity (no records in the baseline window)"
    else:
        template = uc.headline_template or DEFAULT_THRESHOLD_HEADLINE
        sign = "+" if finding.pct_change >= 0 else "-"
        change = f"{sign}{format_headline('{pct_precise}', bindings)}%"
    body = "\n".join([
        f"Category: {category_title(finding.category)}",
        f"Latest ({latest}): {format_decimal(finding.latest)}",
        f"Average of the previous {rule.number_of_periods} months: {format_decimal(finding.baseline)}",
        f"Change: {change}",
        f"Threshold: {format_decimal(rule.threshold_pct)}% ({rule.direction.value})",
        f"Source: {source_url}",
    ]) + "\n"
    return AlertDraft(
        use_case_id=uc.id,
        headline=format_headline(template, bindings),
        body=body,
        dedup_key=f"{uc.id}/{latest}/{finding.category}",
        severity=STORY,
        metrics=metrics,
        category=finding.category,
    )


def run_category_threshold(uc: UseCase, ctx: StringerContext) -> list[AlertDraft]:
    params = uc.parameters
    rule = threshold_rule(params)
    category_field = params.get("category_field", "category")
    latest = ctx.latest_complete_period
    periods = [latest.shift(-k) for k in range(rule.number_of_periods, -1, -1)]
    try:
        source = source_spec(params)
        collected = _collect_periods(ctx, uc, source, periods)
    except _OPERATIONAL as exc:
        return [operational_draft(uc, ctx, exc)]
    if isinstance(collected, AlertDraft):
        return [collected]

    series = CategorySeries.from_record_sets(category_field, collected)
    source_url = render_url(source.url_template, params, latest)
    return [_finding_draft(uc, f, rule, latest, source_url)
            for f in find_threshold_crossings(series, rule)]


def run_expression_rule(uc: UseCase, ctx: StringerContext) -> list[AlertDraft]:
    params = uc.parameters
    ast = parse_rule(params["rule"])
    n = max(max_window(ast), int(params.get("numberOfMonths", "0") or 0))
    group_field = params.get("group_by") or None
    latest = ctx.latest_complete_period
    periods = [latest.shift(-k) for k in range(n, -1, -1)]
    try:
        source = source_spec(params)
        collected = _collect_periods(ctx, uc, source, periods)
    except _OPERATIONAL as exc:
        return [operational_draft(uc, ctx, exc)]
    if isinstance(collected, AlertDraft):
        return [collected]

    ordered = [collected[p].records for p in periods]
    if group_field:
        groups = sorted({render_value(r[group_field]) for rs in ordered for r in rs if group_field in r})
        datasets = {g: [[r for r in rs if group_field in r and render_value(r[group_field]) == g]
                        for rs in ordered] for g in groups}
    else:
        datasets = {"": ordered}

    drafts = []
    for group, data in datasets.items():
        try:
            result = eval_rule(ast, data)
        except (RuleEvalError, InsufficientData) as exc:
            log.info("%s: rule not evaluable for %r: %s", uc.id, group, exc)
            continue
        if not result.fired:
            continue
        category = group or "(all)"
        metrics = {**result.bindings, "period": str(latest)}
        if group:
            metrics["category"] = group
        bindings = {**metrics, "place": place_name(uc), "category": group or uc.id}
        drafts.append(AlertDraft(
            use_case_id=uc.id,
            headline=format_headline(uc.headline_template or DEFAULT_RULE_HEADLINE, bindings),
            body="\n".join([f"Rule: {ast}", f"Period: {latest}"]
                           + [f"{k} = {_render(v)}" for k, v in result.bindings.items()]) + "\n",
            dedup_key=f"{uc.id}/{latest}/{category}",
            severity=STORY,
            metrics=metrics,
            category=group,
        ))
    return drafts


RUNNERS: dict[StringerKind, Callable[[UseCase, StringerContext], list[AlertDraft]]] = {
    StringerKind.SNAPSHOT_DIFF: run_snapshot_diff,
    StringerKind.CATEGORY_THRESHOLD: run_category_threshold,
    StringerKind.EXPRESSION_RULE: run_expression_rule,
}


def run_use_case(uc: UseCase, ctx: StringerContext) -> list[AlertDraft]:
    """Run one use case; drafts come back ordered by (category, headline)."""
    ctx.use_case = uc
    try:
        drafts = RUNNERS[uc.stringer_kind](uc, ctx)
    except DatastringerError as exc:
        raise UseCaseError(uc.id, exc) from exc
    except (KeyError, ValueError, ArithmeticError) as exc:
        raise UseCaseError(uc.id, exc) from exc
    return sorted(drafts, key=AlertDraft.sort_key)


def context(store: SnapshotStore, fetcher: Fetcher, now: datetime | None = None) -> StringerContext:
    return StringerContext(now=now or datetime.now(timezone.utc), store=store, fetcher=fetcher)
