import json
import logging
from datetime import datetime, timedelta, timezone
from decimal import Decimal

import pytest

from datastringer.config import StringerKind, UseCase
from datastringer.engine import (
    INFO,
    STORY,
    AlertDraft,
    StringerContext,
    category_title,
    format_headline,
    run_category_threshold,
    run_expression_rule,
    run_snapshot_diff,
    run_use_case,
)
from datastringer.errors import UseCaseError
from datastringer.ingest import Fetcher, Period
from datastringer.snapshots import SnapshotStore
from support import CRIME_NOW, Response, crime_counts, crime_route

HEADLINE = "Bicycle theft on the rise by 34% in London"


def crime_use_case(base, kind=StringerKind.CATEGORY_THRESHOLD, **extra):
    params = {
        "lat": "51.52863195218981", "lng": "-0.12342453002929688",
        "numberOfMonths": "6", "threshold": "10", "place": "London",
        "url": base + "/crimes?lat={lat}&lng={lng}&date={period}",
        **extra,
    }
    return UseCase(id="crime", stringer_kind=kind, parameters=params)


def ctx(tmp_path, now=CRIME_NOW, read_only=False):
    return StringerContext(now=now, store=SnapshotStore(tmp_path / "snapshots", read_only=read_only),
                           fetcher=Fetcher())


class TestHeadline:
    def test_bicycle_theft_headline(self):
        bindings = {"category": "bicycle-theft", "direction": "rise",
                    "pct_change": Decimal("34.0"), "place": "London"}
        assert format_headline("{category_title} {direction_phrase} by {pct}% in {place}", bindings) == HEADLINE

    def test_half_up(self):
        assert format_headline("{pct}", {"pct_change": Decimal("33.96")}) == "34"
        assert format_headline("{pct}", {"pct_change": Decimal("33.5")}) == "34"
        assert format_headline("{pct}", {"pct_change": Decimal("33.49")}) == "33"
        assert format_headline("{pct}|{pct_precise}", {"pct_change": Decimal("-12.25")}) == "12|12.3"

    def test_falling(self):
        bindings = {"category": "burglary", "direction": "fall", "pct_change": Decimal(-20), "place": "Leeds"}
        assert format_headline("{category_title} {direction_phrase} by {pct}% in {place}",
                               bindings) == "Burglary down by 20% in Leeds"

    def test_verbatim(self):
        assert format_headline("Nothing to fill", {"pct_change": 1}) == "Nothing to fill"

    def test_unknown_placeholder_kept(self, caplog):
        with caplog.at_level(logging.WARNING):
            assert format_headline("{nope} in {place}", {"place": "Hull"}) == "{nope} in Hull"
        assert "nope" in caplog.text

    def test_category_title(self):
        assert category_title("anti-social-behaviour") == "Anti social behaviour"
        assert category_title("VEHICLE_crime") == "Vehicle crime"


class TestCategoryThreshold:
    def test_bicycle_theft_scenario(self, http_server, tmp_path):
        http_server.routes["/crimes"] = crime_route()
        (draft,) = run_category_threshold(crime_use_case(http_server.base), ctx(tmp_path))
        assert draft.headline == HEADLINE
        assert draft.severity == STORY
        assert draft.metrics["pct_change"] == Decimal(34)
        assert draft.metrics["period"] == "2014-07"
        assert draft.dedup_key == "crime/2014-07/bicycle-theft"
        assert "Average of the previous 6 months: 100" in draft.body

    def test_requests_baseline_and_latest_months(self, http_server, tmp_path):
        http_server.routes["/crimes"] = crime_route()
        run_category_threshold(crime_use_case(http_server.base), ctx(tmp_path))
        dates = sorted(r.rsplit("date=", 1)[1] for r in http_server.requests)
        assert dates == [f"2014-0{m}" for m in range(1, 8)]

    def test_months_fetched_once(self, http_server, tmp_path):
        http_server.routes["/crimes"] = crime_route(months=[f"2014-{m:02d}" for m in range(1, 9)])
        uc = crime_use_case(http_server.base)
        run_category_threshold(uc, ctx(tmp_path))
        run_category_threshold(uc, ctx(tmp_path))
        assert len(http_server.requests) == 7
        run_category_threshold(uc, ctx(tmp_path, now=CRIME_NOW + timedelta(days=31)))
        assert len(http_server.requests) == 8

    def test_all_flat(self, http_server, tmp_path):
        http_server.routes["/crimes"] = crime_route(counts_for=lambda m: {"burglary": 50})
        assert run_category_threshold(crime_use_case(http_server.base), ctx(tmp_path)) == []

    def test_two_categories_ordered(self, http_server, tmp_path):
        def counts(month):
            c = crime_counts(month)
            if month == "2014-07":
                c["anti-social-behaviour"] = 40
            return c
        http_server.routes["/crimes"] = crime_route(counts_for=counts)
        drafts = run_category_threshold(crime_use_case(http_server.base), ctx(tmp_path))
        assert [d.category for d in drafts] == ["anti-social-behaviour", "bicycle-theft"]
        assert drafts[0].headline == "Anti social behaviour down by 50% in London"
        assert drafts[0].metrics["pct_change"] == Decimal(-50)

    def test_new_activity(self, http_server, tmp_path):
        def counts(month):
            c = {"burglary": 50}
            if month == "2014-07":
                c["arson"] = 2
            return c
        http_server.routes["/crimes"] = crime_route(counts_for=counts)
        (draft,) = run_category_threshold(crime_use_case(http_server.base), ctx(tmp_path))
        assert draft.category == "arson" and draft.metrics["pct_change"] is None
        assert draft.headline == "Arson reported in London after 6 quiet months"

    def test_insufficient_history(self, http_server, tmp_path):
        http_server.routes["/crimes"] = crime_route(months=[f"2014-0{m}" for m in range(4, 8)])
        (draft,) = run_category_threshold(crime_use_case(http_server.base), ctx(tmp_path))
        assert draft.severity == INFO
        assert draft.metrics["missing_period"] == "2014-01"

    def test_latest_not_published(self, http_server, tmp_path):
        http_server.routes["/crimes"] = crime_route()
        (draft,) = run_category_threshold(crime_use_case(http_server.base),
                                          ctx(tmp_path, now=CRIME_NOW + timedelta(days=31)))
        assert draft.severity == INFO and "no data published yet for 2014-08" in draft.headline

    def test_fetch_failure_is_info_draft(self, http_server, tmp_path):
        uc = crime_use_case(http_server.base)
        (draft,) = run_category_threshold(uc, ctx(tmp_path))
        assert draft.severity == INFO
        assert draft.dedup_key == "crime/2014-08/(error)"
        assert "404" in draft.metrics["error"]

    def test_direction_parameter(self, http_server, tmp_path):
        http_server.routes["/crimes"] = crime_route()
        uc = crime_use_case(http_server.base, direction="fall_only")
        assert run_category_threshold(uc, ctx(tmp_path)) == []


NEIGHBOURHOODS = [{"id": f"A{i}", "name": f"Area {i}", "officers": i} for i in range(5)]


def diff_use_case(base, **extra):
    return UseCase(id="local-police", stringer_kind=StringerKind.SNAPSHOT_DIFF,
                   parameters={"url": base + "/teams", "key_fields": "id", "place": "Camden", **extra})


class TestSnapshotDiff:
    def test_lifecycle(self, http_server, tmp_path):
        rows = [dict(r) for r in NEIGHBOURHOODS]
        http_server.routes["/teams"] = lambda q: Response(json.dumps(rows))
        uc = diff_use_case(http_server.base)
        assert run_snapshot_diff(uc, ctx(tmp_path)) == []
        rows[2]["officers"] = 9
        (draft,) = run_snapshot_diff(uc, ctx(tmp_path))
        assert {k: draft.metrics[k] for k in ("added", "removed", "changed")} == \
            {"added": 0, "removed": 0, "changed": 1}
        assert draft.headline == "Camden data changed: 0 added, 0 removed, 1 changed"
        assert "~ A2 officers: 2 -> 9" in draft.body
        assert draft.dedup_key == f"local-police/diff/{draft.metrics['content_hash']}"
        assert run_snapshot_diff(uc, ctx(tmp_path)) == []

    def test_body_cap(self, http_server, tmp_path):
        rows = [{"id": str(i)} for i in range(10)]
        http_server.routes["/teams"] = lambda q: Response(json.dumps(rows))
        uc = diff_use_case(http_server.base)
        run_snapshot_diff(uc, ctx(tmp_path))
        rows[:] = [{"id": str(i)} for i in range(100, 170)]
        (draft,) = run_snapshot_diff(uc, ctx(tmp_path))
        change_lines = [ln for ln in draft.body.splitlines() if ln[:2] in ("+ ", "- ")]
        assert len(change_lines) == 50
        assert draft.body.rstrip().endswith("+30 more")

    def test_fetch_failure_keeps_snapshot(self, http_server, tmp_path):
        http_server.routes["/teams"] = Response(json.dumps(NEIGHBOURHOODS))
        uc = diff_use_case(http_server.base)
        run_snapshot_diff(uc, ctx(tmp_path))
        before = SnapshotStore(tmp_path / "snapshots").load_previous("local-police", "latest")
        http_server.routes["/teams"] = Response(b"{broken")
        (draft,) = run_snapshot_diff(uc, ctx(tmp_path))
        assert draft.severity == INFO
        after = SnapshotStore(tmp_path / "snapshots").load_previous("local-police", "latest")
        assert after == before

    def test_corrupt_snapshot_reported_then_rebootstrapped(self, http_server, tmp_path):
        http_server.routes["/teams"] = Response(json.dumps(NEIGHBOURHOODS))
        uc = diff_use_case(http_server.base)
        run_snapshot_diff(uc, ctx(tmp_path))
        path = tmp_path / "snapshots" / "local-police" / "latest.snap"
        path.write_text(path.read_text().replace("Area", "Arena"))
        (draft,) = run_snapshot_diff(uc, ctx(tmp_path))
        assert draft.severity == INFO and "CorruptSnapshot" in draft.headline
        assert run_snapshot_diff(uc, ctx(tmp_path)) == []

    def test_csv_source(self, http_server, tmp_path):
        body = ["id,count\r\n1,5\r\n2,6\r\n"]
        http_server.routes["/teams"] = lambda q: Response(body[0], content_type="text/csv")
        uc = diff_use_case(http_server.base, format="csv")
        run_snapshot_diff(uc, ctx(tmp_path))
        body[0] = "id,count\r\n1,5\r\n2,7\r\n3,1\r\n"
        (draft,) = run_snapshot_diff(uc, ctx(tmp_path))
        assert (draft.metrics["added"], draft.metrics["changed"]) == (1, 1)


class TestExpressionRule:
    def test_grouped_matches_builtin(self, http_server, tmp_path):
        http_server.routes["/crimes"] = crime_route()
        uc = crime_use_case(http_server.base, kind=StringerKind.EXPRESSION_RULE,
                            rule="pct_change(count, 6) > 10", group_by="category")
        drafts = run_expression_rule(uc, ctx(tmp_path))
        builtin = run_category_threshold(crime_use_case(http_server.base), ctx(tmp_path / "b"))
        assert [d.category for d in drafts] == [d.category for d in builtin] == ["bicycle-theft"]
        assert drafts[0].metrics["pct_change(count, 6)"] == Decimal(34)
        assert drafts[0].headline == "Bicycle theft: rule matched in London"

    def test_ungrouped(self, http_server, tmp_path):
        http_server.routes["/crimes"] = crime_route()
        uc = crime_use_case(http_server.base, kind=StringerKind.EXPRESSION_RULE, rule="count() > 200")
        (draft,) = run_expression_rule(uc, ctx(tmp_path))
        assert draft.dedup_key == "crime/2014-07/(all)"
        assert draft.metrics["count()"] == Decimal(264)


class TestRunUseCase:
    def test_delegates(self, http_server, tmp_path):
        http_server.routes["/crimes"] = crime_route()
        uc = crime_use_case(http_server.base)
        assert run_use_case(uc, ctx(tmp_path)) == run_category_threshold(uc, ctx(tmp_path / "x"))

    def test_unchanged_diff_is_empty(self, http_server, tmp_path):
        http_server.routes["/teams"] = Response(json.dumps(NEIGHBOURHOODS))
        uc = diff_use_case(http_server.base)
        run_use_case(uc, ctx(tmp_path))
        assert run_use_case(uc, ctx(tmp_path)) == []

    def test_errors_wrapped_with_id(self, tmp_path):
        uc = UseCase(id="bad", stringer_kind=StringerKind.CATEGORY_THRESHOLD,
                     parameters={"url": "http://127.0.0.1:9/{period}", "numberOfMonths": "x",
                                 "threshold": "10"})
        with pytest.raises(UseCaseError) as info:
            run_use_case(uc, ctx(tmp_path))
        assert info.value.use_case_id == "bad"

    def test_deterministic(self, http_server, tmp_path):
        http_server.routes["/crimes"] = crime_route()
        uc = crime_use_case(http_server.base, threshold="0")
        first = run_use_case(uc, ctx(tmp_path / "1"))
        second = run_use_case(uc, ctx(tmp_path / "2"))
        assert first == second
        assert [d.sort_key() for d in first] == sorted(d.sort_key() for d in first)

    def test_context_period(self):
        c = StringerContext(now=datetime(2014, 1, 5, tzinfo=timezone.utc), store=None, fetcher=None)
        assert c.period == Period(2014, 1) and c.latest_complete_period == Period(2013, 12)

    def test_draft_sort_key(self):
        a = AlertDraft("u", "b", "", "k", category="x")
        b = AlertDraft("u", "a", "", "k", category="y")
        c = AlertDraft("u", "a", "", "k", category="x")
        assert sorted([a, b, c], key=AlertDraft.sort_key) == [c, a, b]
