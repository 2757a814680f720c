"""Cron schedules, the built-in run loop, and user-crontab registration."""

from __future__ import annotations

import logging
import shlex
import shutil
import subprocess
import sys
import threading
from dataclasses import dataclass
from datetime import datetime, timedelta, timezone, tzinfo
from pathlib import Path
from typing import Any, Callable, Iterator

from .errors import CronError, ScheduleFacilityMissing, UnreachableSchedule

log = logging.getLogger(__name__)

DEFAULT_SCHEDULE = "0 12 * * *"
CRON_MARKER = "# datastringer"
HORIZON = timedelta(days=5 * 366)

_RANGES = [(0, 59), (0, 23), (1, 31), (1, 12), (0, 7)]
_FIELD_NAMES = ["minute", "hour", "day of month", "month", "day of week"]
_MONTHS = "JAN FEB MAR APR MAY JUN JUL AUG SEP OCT NOV DEC".split()
_DAYS = "SUN MON TUE WED THU FRI SAT".split()


@dataclass(frozen=True)
class Schedule:
    minutes: frozenset[int]
    hours: frozenset[int]
    days: frozenset[int]
    months: frozenset[int]
    weekdays: frozenset[int]  # 0 = Sunday
    dom_star: bool = True
    dow_star: bool = True
    expression: str = ""

    def day_matches(self, d: datetime) -> bool:
        dom = d.day in self.days
        dow = (d.weekday() + 1) % 7 in self.weekdays
        if self.dom_star or self.dow_star:
            return dom and dow
        return dom or dow

    def matches(self, t: datetime) -> bool:
        return (t.minute in self.minutes and t.hour in self.hours
                and t.month in self.months and self.day_matches(t))


def _value(text: str, index: int) -> int:
    upper = text.upper()
    if index == 3 and upper in _MONTHS:
        return _MONTHS.index(upper) + 1
    if index == 4 and upper in _DAYS:
        return _DAYS.index(upper)
    if not text.isdigit():
        raise CronError(f"bad {_FIELD_NAMES[index]} value {text!r}")
    value = int(text)
    lo, hi = _RANGES[index]
    if not lo <= value <= hi:
        raise CronError(f"{_FIELD_NAMES[index]} value {value} out of range {lo}-{hi}")
    return value


def _parse_field(text: str, index: int) -> set[int]:
    lo, hi = _RANGES[index]
    result: set[int] = set()
    for item in text.split(","):
        if not item:
            raise CronError(f"empty list item in {_FIELD_NAMES[index]} field {text!r}")
        base, slash, step_text = item.partition("/")
        step = 1
        if slash:
            if not step_text.isdigit() or int(step_text) < 1:
                raise CronError(f"bad step in {_FIELD_NAMES[index]} field {item!r}")
            step = int(step_text)
        if base == "*":
            start, end = lo, hi
        elif "-" in base:
            a, _, b = base.partition("-")
            start, end = _value(a, index), _value(b, index)
            if start > end:
                raise CronError(f"backwards range {item!r} in {_FIELD_NAMES[index]} field")
        else:
            start = _value(base, index)
            end = hi if slash else start
        result.update(range(start, end + 1, step))
    if index == 4 and 7 in result:
        result.discard(7)
        result.add(0)
    return result


def parse_cron(text: str) -> Schedule:
    parts = text.split()
    if len(parts) != 5:
        raise CronError(f"expected 5 fields, got {len(parts)} in {text!r}")
    sets = [_parse_field(p, i) for i, p in enumerate(parts)]
    return Schedule(
        minutes=frozenset(sets[0]),
        hours=frozenset(sets[1]),
        days=frozenset(sets[2]),
        months=frozenset(sets[3]),
        weekdays=frozenset(sets[4]),
        dom_star=parts[2].startswith("*"),
        dow_star=parts[4].startswith("*"),
        expression=" ".join(parts),
    )


def _wall_after(schedule: Schedule, start: datetime, limit: datetime) -> datetime:
    """First naive wall-clock minute >= start matching the schedule."""
    t = start
    minutes = sorted(schedule.minutes)
    while t <= limit:
        if t.month not in schedule.months:
            t = (t.replace(day=1, hour=0, minute=0) + timedelta(days=32)).replace(day=1)
            continue
        if not schedule.day_matches(t):
            t = t.replace(hour=0, minute=0) + timedelta(days=1)
            continue
        if t.hour not in schedule.hours:
            t = t.replace(minute=0) + timedelta(hours=1)
            continue
        later = [m for m in minutes if m >= t.minute]
        if not later:
            t = t.replace(minute=0) + timedelta(hours=1)
            continue
        return t.replace(minute=later[0])
    raise UnreachableSchedule(f"no occurrence of {schedule.expression!r} within 5 years")


def _to_wall(instant: datetime, tz: tzinfo | None) -> datetime:
    # via UTC: astimezone() is a no-op when the tzinfo is already ``tz``
    return instant.astimezone(timezone.utc).astimezone(tz).replace(tzinfo=None)


def _localize(wall: datetime, tz: tzinfo | None) -> datetime:
    return wall.astimezone() if tz is None else wall.replace(tzinfo=tz)


def next_after(schedule: Schedule | str, instant: datetime, tz: tzinfo | None = None) -> datetime:
    """Earliest whole minute strictly after ``instant`` that matches ``schedule``.

    Naive instants are plain wall-clock times and a naive result is
    returned. Aware instants are matched in ``tz`` (system local time when
    None) and the result is aware; wall times skipped by a DST jump never
    match.
    """
    if isinstance(schedule, str):
        schedule = parse_cron(schedule)
    if instant.tzinfo is None:
        start = instant.replace(second=0, microsecond=0) + timedelta(minutes=1)
        return _wall_after(schedule, start, instant + HORIZON)

    wall = _to_wall(instant, tz)
    start = wall.replace(second=0, microsecond=0) + timedelta(minutes=1)
    limit = wall + HORIZON
    while True:
        candidate = _wall_after(schedule, start, limit)
        aware = _localize(candidate, tz)
        if _to_wall(aware, tz) == candidate and aware > instant:
            return aware.astimezone(instant.tzinfo)
        start = candidate + timedelta(minutes=1)


# -- run loop ----------------------------------------------------------------

class SystemClock:
    def now(self) -> datetime:
        return datetime.now(timezone.utc)

    def sleep(self, seconds: float, stop: threading.Event) -> bool:
        """Sleep up to ``seconds``; True if woken by ``stop``."""
        return stop.wait(max(0.0, seconds))


class ManualClock:
    """A clock that only moves when told to; sleeping advances it instantly."""

    def __init__(self, start: datetime):
        self._now = start
        self.sleeps: list[float] = []

    def now(self) -> datetime:
        return self._now

    def advance(self, delta: timedelta) -> None:
        self._now += delta

    def set(self, instant: datetime) -> None:
        self._now = instant

    def sleep(self, seconds: float, stop: threading.Event) -> bool:
        if stop.is_set():
            return True
        self.sleeps.append(seconds)
        self._now += timedelta(seconds=max(0.0, seconds))
        return stop.is_set()


@dataclass
class LoopEvent:
    started_at: datetime
    slots: dict[str, datetime]
    report: Any = None


def run_loop(config, execute: Callable[[list, datetime], Any], clock=None,
             stop: threading.Event | None = None, tz: tzinfo | None = None,
             idle_sleep: float = 3600.0) -> Iterator[LoopEvent]:
    """Run due use cases until ``stop`` is set, yielding one event per run.

    Each use case has one pending slot. When the clock has passed it (even by
    several periods, as after a suspend) the use case runs once and its next
    slot is computed from the current time, so missed slots collapse into a
    single catch-up run.
    """
    clock = clock or SystemClock()
    stop = stop or threading.Event()
    use_cases = [uc for uc in config.use_cases if uc.enabled]
    schedules = {uc.id: parse_cron(uc.schedule or config.defaults.schedule) for uc in use_cases}
    due = {uc.id: next_after(schedules[uc.id], clock.now(), tz) for uc in use_cases}

    while not stop.is_set():
        now = clock.now()
        ready = [uc for uc in use_cases if due[uc.id] <= now]
        if ready:
            slots = {uc.id: due[uc.id] for uc in ready}
            log.info("running %s", ", ".join(slots))
            report = execute(ready, now)
            for uc in ready:
                due[uc.id] = next_after(schedules[uc.id], now, tz)
            yield LoopEvent(started_at=now, slots=slots, report=report)
            continue
        wait = (min(due.values()) - now).total_seconds() if due else idle_sleep
        if clock.sleep(wait, stop):
            break


# -- crontab -----------------------------------------------------------------

class SystemCrontab:
    """The invoking user's crontab, via the ``crontab`` command."""

    def __init__(self, command: str = "crontab"):
        self.command = command

    def _exe(self) -> str:
        exe = shutil.which(self.command)
        if exe is None:
            raise ScheduleFacilityMissing(
                "no crontab facility on this host; use `datastringer run` (built-in loop) instead")
        return exe

    def read(self) -> str:
        proc = subprocess.run([self._exe(), "-l"], capture_output=True, text=True)
        if proc.returncode != 0:
            if "no crontab" in proc.stderr.lower():
                return ""
            raise ScheduleFacilityMissing(f"crontab -l failed: {proc.stderr.strip()}")
        return proc.stdout

    def write(self, text: str) -> None:
        proc = subprocess.run([self._exe(), "-"], input=text, capture_output=True, text=True)
        if proc.returncode != 0:
            raise ScheduleFacilityMissing(f"crontab install failed: {proc.stderr.strip()}")


class FileCrontab:
    """Crontab text kept in a plain file; for tests and hosts managed by other tools."""

    def __init__(self, path: str | Path):
        self.path = Path(path)

    def read(self) -> str:
        return self.path.read_text() if self.path.exists() else ""

    def write(self, text: str) -> None:
        self.path.write_text(text)


def default_binary() -> str:
    exe = shutil.which("datastringer")
    return exe if exe else f"{shlex.quote(sys.executable)} -m datastringer"


def crontab_line(config_path: str | Path, binary: str | None = None,
                 schedule: str = DEFAULT_SCHEDULE, home: str | Path | None = None) -> str:
    parse_cron(schedule)
    line = f"{schedule} {binary or default_binary()} run --once --config {shlex.quote(str(config_path))}"
    if home is not None:
        line += f" --home {shlex.quote(str(home))}"
    return f"{line} {CRON_MARKER}"


def _is_marked(line: str) -> bool:
    return line.rstrip().endswith(CRON_MARKER)


def install_system_schedule(config_path: str | Path, backend=None, binary: str | None = None,
                            schedule: str = DEFAULT_SCHEDULE,
                            home: str | Path | None = None) -> str:
    """Install (or replace) the marked crontab line; returns the line."""
    backend = backend or SystemCrontab()
    line = crontab_line(config_path, binary, schedule, home)
    kept = [ln for ln in backend.read().splitlines() if not _is_marked(ln)]
    backend.write("\n".join(kept + [line]) + "\n")
    return line


def uninstall_system_schedule(backend=None) -> int:
    """Remove every marked line; returns how many were removed."""
    backend = backend or SystemCrontab()
    lines = backend.read().splitlines()
    kept = [ln for ln in lines if not _is_marked(ln)]
    removed = len(lines) - len(kept)
    if removed:
        backend.write("\n".join(kept) + "\n" if kept else "")
    return removed
