"""One pass over a set of use cases: run the engine, dispatch, record state."""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import TextIO

from .config import ConfigFile, UseCase
from .dispatch import DedupStore, DeliveryReport, Dispatcher, dispatch
from .engine import INFO, AlertDraft, StringerContext, run_use_case
from .errors import UseCaseError
from .ingest import Fetcher, Period
from .locking import atomic_write, file_lock
from .snapshots import SnapshotStore

log = logging.getLogger(__name__)

MAX_PARALLELISM = 4


@dataclass
class UseCaseOutcome:
    use_case_id: str
    drafts: list[AlertDraft] = field(default_factory=list)
    deliveries: DeliveryReport | None = None
    error: str | None = None


@dataclass
class RunReport:
    started_at: datetime
    outcomes: list[UseCaseOutcome] = field(default_factory=list)

    @property
    def drafts(self) -> list[AlertDraft]:
        return [d for o in self.outcomes for d in o.drafts]

    @property
    def deliveries(self) -> list:
        return [e for o in self.outcomes if o.deliveries for e in o.deliveries.entries]


class Home:
    """Paths under DATASTRINGER_HOME."""

    def __init__(self, root: str | Path):
        self.root = Path(root).expanduser()

    @property
    def snapshots(self) -> Path:
        return self.root / "snapshots"

    @property
    def dedup(self) -> Path:
        return self.root / "dedup.txt"

    @property
    def state(self) -> Path:
        return self.root / "state.json"

    def create(self) -> None:
        self.snapshots.mkdir(parents=True, exist_ok=True)

    def read_state(self) -> dict:
        try:
            return json.loads(self.state.read_text("utf-8"))
        except (FileNotFoundError, ValueError):
            return {}

    def record_runs(self, outcomes: list[UseCaseOutcome], now: datetime) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        with file_lock(self.root / "state.lock", timeout=10.0):
            state = self.read_state()
            for o in outcomes:
                delivered = len(o.deliveries.delivered) if o.deliveries else 0
                state[o.use_case_id] = {"last_run": now.isoformat(), "last_alert_count": delivered}
            atomic_write(self.state, (json.dumps(state, indent=2, sort_keys=True) + "\n").encode())


def _error_draft(uc: UseCase, now: datetime, exc: Exception) -> AlertDraft:
    period = Period.of(now)
    return AlertDraft(
        use_case_id=uc.id,
        headline=f"{uc.id}: run failed ({type(getattr(exc, 'cause', exc)).__name__})",
        body=f"The use case {uc.id!r} failed:\n\n{exc}\n",
        dedup_key=f"{uc.id}/{period}/(error)",
        severity=INFO,
        metrics={"error": str(exc), "period": str(period)},
        category="(error)",
    )


class Runner:
    def __init__(self, config: ConfigFile, home: str | Path, fetcher: Fetcher | None = None,
                 dry_run: bool = False, sink_filter: list[str] | None = None,
                 parallelism: int | None = None, stdout: TextIO | None = None,
                 dispatcher: Dispatcher | None = None):
        self.config = config
        self.home = Home(home)
        self.fetcher = fetcher or Fetcher()
        self.dry_run = dry_run
        self.sink_filter = sink_filter
        self.parallelism = parallelism
        self.dispatcher = dispatcher or Dispatcher(stdout=stdout, base=self.home.root)
        self.dedup = DedupStore(self.home.dedup)

    def _store(self) -> SnapshotStore:
        return SnapshotStore(self.home.snapshots, read_only=self.dry_run)

    def _execute(self, uc: UseCase, store: SnapshotStore, now: datetime) -> UseCaseOutcome:
        ctx = StringerContext(now=now, store=store, fetcher=self.fetcher)
        try:
            return UseCaseOutcome(uc.id, run_use_case(uc, ctx))
        except (UseCaseError, Exception) as exc:  # never let one use case sink the run
            log.error("%s failed: %s", uc.id, exc)
            return UseCaseOutcome(uc.id, [_error_draft(uc, now, exc)], error=str(exc))

    def run(self, use_cases: list[UseCase] | None = None, now: datetime | None = None) -> RunReport:
        now = now or datetime.now(timezone.utc)
        if use_cases is None:
            use_cases = [uc for uc in self.config.use_cases if uc.enabled]
        report = RunReport(started_at=now)
        if not use_cases:
            return report
        store = self._store()
        workers = self.parallelism or min(len(use_cases), MAX_PARALLELISM)
        with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
            outcomes = list(pool.map(lambda uc: self._execute(uc, store, now), use_cases))
        report.outcomes = outcomes
        if self.dry_run:
            return report

        by_id = {uc.id: uc for uc in use_cases}
        for outcome in outcomes:
            sinks = self.config.sinks_for(by_id[outcome.use_case_id])
            if self.sink_filter is not None:
                sinks = [s for s in sinks if s.name in self.sink_filter]
            outcome.deliveries = dispatch(outcome.drafts, sinks, self.dedup, now, self.dispatcher)
        self.home.record_runs(outcomes, now)
        return report
