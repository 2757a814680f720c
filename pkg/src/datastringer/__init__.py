"""Dataset monitoring for journalists.

Configure use cases once; each run fetches the datasets, compares them with
what was stored last time, and sends an alert when something moved.
"""

from .config import ConfigFile, UseCase, load_config, set_enabled, validate
from .engine import AlertDraft, StringerContext, format_headline, run_use_case
from .ingest import Fetcher, Period, RecordSet, SourceSpec, parse_csv, parse_json, render_url
from .rules import eval_rule, parse_rule, print_rule
from .runner import Runner
from .scheduler import next_after, parse_cron, run_loop
from .snapshots import SnapshotStore, canonicalize, diff
from .stats import (
    ThresholdRule,
    aggregate_by_category,
    evaluate_threshold,
    pct_change,
    rank_categories,
    rolling_mean,
)

__all__ = [
    "AlertDraft",
    "ConfigFile",
    "Fetcher",
    "Period",
    "RecordSet",
    "Runner",
    "SnapshotStore",
    "SourceSpec",
    "StringerContext",
    "ThresholdRule",
    "UseCase",
    "aggregate_by_category",
    "canonicalize",
    "diff",
    "eval_rule",
    "evaluate_threshold",
    "format_headline",
    "load_config",
    "next_after",
    "parse_cron",
    "parse_csv",
    "parse_json",
    "parse_rule",
    "pct_change",
    "print_rule",
    "rank_categories",
    "render_url",
    "rolling_mean",
    "run_loop",
    "run_use_case",
    "set_enabled",
    "validate",
]

__version__ = "0.1.0"
