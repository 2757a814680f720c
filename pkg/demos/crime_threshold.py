"""
Spotting a rise in one crime category
=====================================

Seven months of street-level crime for one neighbourhood: six quiet months
and a seventh where bicycle thefts jump. We aggregate per category, compare
the latest month against the mean of the six before it, and turn the
crossing into a headline.
"""

from decimal import Decimal

from datastringer.engine import DEFAULT_THRESHOLD_HEADLINE, format_headline
from datastringer.ingest import Period, RecordSet
from datastringer.stats import CategorySeries, ThresholdRule, find_threshold_crossings, rank_categories

months = [Period(2014, m) for m in range(1, 8)]


def month_of_records(period):
    bikes = 134 if period == months[-1] else 100
    rows = [{"category": "bicycle-theft"}] * bikes
    rows += [{"category": "burglary"}] * 50
    rows += [{"category": "anti-social-behaviour"}] * 80
    return RecordSet(rows)


series = CategorySeries.from_record_sets("category", {p: month_of_records(p) for p in months})
for category, counts in series.counts.items():
    print(f"{category:24} {counts}")

# six months of baseline, alert on a change of 10% or more either way
rule = ThresholdRule(number_of_periods=6, threshold_pct=Decimal(10))
findings = find_threshold_crossings(series, rule)

for f in findings:
    print(f"\n{f.category}: baseline {f.baseline}, latest {f.latest}, change {f.pct_change}% ({f.direction})")
    print(format_headline(DEFAULT_THRESHOLD_HEADLINE, {
        "category": f.category, "direction": f.direction, "pct_change": f.pct_change, "place": "London",
    }))

# the busiest categories last month, for context in the alert body
print("\nranked by latest count:", rank_categories(series))
