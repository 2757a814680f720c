"""Command line interface.

Exit codes: 0 success, 1 validation or run failure, 2 I/O failure,
3 refusal (target exists), 4 unknown use-case id.
"""

from __future__ import annotations

import argparse
import logging
import signal
import sys
import threading
from datetime import datetime
from pathlib import Path

from . import config as cfg
from . import jsonutil
from .errors import (
    ConfigError,
    ConfigNotFound,
    ScheduleFacilityMissing,
    UnknownUseCase,
)
from .runner import Home, Runner
from .scheduler import (
    DEFAULT_SCHEDULE,
    SystemClock,
    install_system_schedule,
    run_loop,
    uninstall_system_schedule,
)

EXIT_OK, EXIT_FAILURE, EXIT_IO, EXIT_EXISTS, EXIT_UNKNOWN_ID = 0, 1, 2, 3, 4

log = logging.getLogger("datastringer")


def starter_config() -> cfg.ConfigFile:
    return cfg.ConfigFile(
        defaults=cfg.Defaults(sinks=["alerts"]),
        sinks={"alerts": {"kind": "file", "path": "alerts.jsonl"}},
        use_cases=[
            cfg.UseCase(
                id="local-police",
                stringer_kind=cfg.StringerKind.SNAPSHOT_DIFF,
                parameters={"force": "metropolitan", "area": "00AGGU",
                            "url": cfg.NEIGHBOURHOOD_URL, "place": "London"},
            ),
            cfg.UseCase(
                id="crime",
                stringer_kind=cfg.StringerKind.CATEGORY_THRESHOLD,
                parameters={"lat": "51.52863195218981", "lng": "-0.12342453002929688",
                            "numberOfMonths": "6", "threshold": "10",
                            "url": cfg.CRIME_URL, "category_field": "category",
                            "place": "London"},
            ),
        ],
    )


class Context:
    def __init__(self, args, clock=None, fetcher=None, stop=None, crontab=None,
                 stdout=None, stderr=None):
        self.args = args
        self.clock = clock or SystemClock()
        self.fetcher = fetcher
        self.stop = stop
        self.crontab = crontab
        self.stdout = stdout or sys.stdout
        self.stderr = stderr or sys.stderr

    @property
    def home(self) -> Path:
        if getattr(self.args, "home", None):
            return Path(self.args.home)
        return cfg.default_home()

    @property
    def config_path(self) -> Path:
        if getattr(self.args, "config", None):
            return Path(self.args.config)
        return cfg.default_config_path(self.home)

    def out(self, text: str = "") -> None:
        self.stdout.write(text + "\n")

    def err(self, text: str) -> None:
        self.stderr.write(text + "\n")

    def load(self) -> cfg.ConfigFile | int:
        """Config, or an exit code after reporting why it cannot be used."""
        try:
            config = cfg.load_config(self.config_path)
        except ConfigNotFound as exc:
            self.err(f"error: {self.config_path}: {exc}")
            return EXIT_IO
        except ConfigError as exc:
            self.err(f"error: {self.config_path}: {exc}")
            return EXIT_FAILURE
        except OSError as exc:
            self.err(f"error: {self.config_path}: {exc}")
            return EXIT_IO
        return config

    def load_valid(self) -> cfg.ConfigFile | int:
        config = self.load()
        if isinstance(config, int):
            return config
        diagnostics = cfg.validate(config)
        for d in diagnostics:
            self.err(str(d))
        if cfg.has_errors(diagnostics):
            return EXIT_FAILURE
        return config

    def now(self) -> datetime:
        return self.clock.now()


# -- commands ----------------------------------------------------------------

def cmd_init(ctx: Context) -> int:
    args = ctx.args
    if args.directory:
        directory = Path(args.directory)
        home = Path(args.home) if args.home else directory
        config_path = Path(args.config) if args.config else directory / "use_cases.json"
    else:
        home, config_path = ctx.home, ctx.config_path
    if config_path.exists() and not args.force:
        ctx.err(f"error: {config_path} already exists (use --force to overwrite)")
        return EXIT_EXISTS
    try:
        cfg.save_config(starter_config(), config_path)
        Home(home).create()
    except OSError as exc:
        ctx.err(f"error: {exc}")
        return EXIT_IO
    ctx.out(f"wrote {config_path}")
    ctx.out(f"home {home}")
    return EXIT_OK


def cmd_validate(ctx: Context) -> int:
    config = ctx.load_valid()
    return config if isinstance(config, int) else EXIT_OK


def cmd_list(ctx: Context) -> int:
    config = ctx.load()
    if isinstance(config, int):
        return config
    state = Home(ctx.home).read_state()
    header = ("ID", "KIND", "ENABLED", "SCHEDULE", "LAST RUN", "LAST ALERTS")
    rows = []
    for uc in config.use_cases:
        entry = state.get(uc.id, {})
        rows.append((
            uc.id,
            uc.stringer_kind.value,
            "yes" if uc.enabled else "no",
            uc.schedule or config.defaults.schedule,
            entry.get("last_run", "never"),
            str(entry.get("last_alert_count", "-")),
        ))
    widths = [max(len(r[i]) for r in [header, *rows]) for i in range(len(header))]
    for row in [header, *rows]:
        ctx.out("  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip())
    return EXIT_OK


def _set_enabled(ctx: Context, enabled: bool) -> int:
    try:
        config = cfg.set_enabled(ctx.config_path, ctx.args.id, enabled)
    except UnknownUseCase as exc:
        ctx.err(f"error: {exc}")
        return EXIT_UNKNOWN_ID
    except ConfigNotFound as exc:
        ctx.err(f"error: {exc}")
        return EXIT_IO
    except ConfigError as exc:
        ctx.err(f"error: {exc}")
        return EXIT_FAILURE
    except OSError as exc:
        ctx.err(f"error: {exc}")
        return EXIT_IO
    uc = config.get(ctx.args.id)
    ctx.out(f"{uc.id}: {'enabled' if uc.enabled else 'disabled'}")
    return EXIT_OK


def cmd_enable(ctx: Context) -> int:
    return _set_enabled(ctx, True)


def cmd_disable(ctx: Context) -> int:
    return _set_enabled(ctx, False)


def _draft_json(d) -> str:
    return jsonutil.dumps({
        "use_case_id": d.use_case_id,
        "headline": d.headline,
        "body": d.body,
        "severity": d.severity,
        "dedup_key": d.dedup_key,
        "metrics": d.metrics,
    })


def cmd_test(ctx: Context) -> int:
    config = ctx.load_valid()
    if isinstance(config, int):
        return config
    try:
        uc = config.get(ctx.args.id)
    except UnknownUseCase as exc:
        ctx.err(f"error: {exc}")
        return EXIT_UNKNOWN_ID
    runner = Runner(config, ctx.home, fetcher=ctx.fetcher, dry_run=True)
    report = runner.run([uc], ctx.now())
    drafts = report.drafts
    for d in drafts:
        ctx.out(_draft_json(d))
    ctx.err(f"{len(drafts)} drafts")
    failed = any(o.error for o in report.outcomes) or any("error" in d.metrics for d in drafts)
    if failed:
        for d in drafts:
            if "error" in d.metrics:
                ctx.err(f"error: {d.metrics['error']}")
        return EXIT_FAILURE
    return EXIT_OK


def cmd_run(ctx: Context) -> int:
    config = ctx.load_valid()
    if isinstance(config, int):
        return config
    sink_filter = ctx.args.sink or None
    if sink_filter:
        known = set(config.sinks) | set(cfg.BUILTIN_SINKS)
        unknown = [s for s in sink_filter if s not in known]
        if unknown:
            ctx.err(f"error: unknown sink(s): {', '.join(unknown)}")
            return EXIT_FAILURE
    runner = Runner(config, ctx.home, fetcher=ctx.fetcher, sink_filter=sink_filter,
                    stdout=ctx.stdout)

    def emit(report) -> bool:
        ok = True
        for entry in report.deliveries:
            ctx.out(jsonutil.dumps(entry.to_json()))
            ok = ok and entry.status != "failed"
        return ok

    if ctx.args.once:
        return EXIT_OK if emit(runner.run(now=ctx.now())) else EXIT_FAILURE

    tz = None
    if config.defaults.timezone:
        from zoneinfo import ZoneInfo
        tz = ZoneInfo(config.defaults.timezone)
    stop = ctx.stop or threading.Event()
    previous = {}
    if ctx.stop is None and threading.current_thread() is threading.main_thread():
        for signum in (signal.SIGINT, signal.SIGTERM):
            previous[signum] = signal.signal(signum, lambda *_: stop.set())
    try:
        for event in run_loop(config, lambda ucs, now: runner.run(ucs, now),
                              clock=ctx.clock, stop=stop, tz=tz):
            emit(event.report)
    finally:
        for signum, handler in previous.items():
            signal.signal(signum, handler)
    return EXIT_OK


def cmd_schedule(ctx: Context) -> int:
    try:
        if ctx.args.action == "install":
            schedule = DEFAULT_SCHEDULE
            config = ctx.load()
            if not isinstance(config, int):
                schedule = config.defaults.schedule
            line = install_system_schedule(
                ctx.config_path.resolve(), backend=ctx.crontab, schedule=schedule,
                home=Path(ctx.args.home).resolve() if ctx.args.home else None)
            ctx.out(line)
        else:
            removed = uninstall_system_schedule(backend=ctx.crontab)
            ctx.out(f"removed {removed} crontab line(s)")
    except ScheduleFacilityMissing as exc:
        ctx.err(f"error: {exc}")
        return EXIT_IO
    return EXIT_OK


# -- parser ------------------------------------------------------------------

def _common(suppress: bool) -> argparse.ArgumentParser:
    default = argparse.SUPPRESS if suppress else None
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", metavar="PATH", default=default,
                   help="use-cases file (env DATASTRINGER_CONFIG)")
    p.add_argument("--home", metavar="PATH", default=default,
                   help="state directory (env DATASTRINGER_HOME)")
    p.add_argument("-v", "--verbose", action="count", default=argparse.SUPPRESS if suppress else 0)
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="datastringer",
        description="Monitor datasets and get an email when something newsworthy changes.",
        parents=[_common(False)],
    )
    common = _common(True)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("init", parents=[common], help="write a starter config")
    p.add_argument("directory", nargs="?")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_init)

    p = sub.add_parser("validate", parents=[common], help="check the config")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("list", parents=[common], help="show use cases and their last run")
    p.set_defaults(func=cmd_list)

    for name, func in (("enable", cmd_enable), ("disable", cmd_disable)):
        p = sub.add_parser(name, parents=[common], help=f"{name} a use case")
        p.add_argument("id")
        p.set_defaults(func=func)

    p = sub.add_parser("test", parents=[common], help="dry-run one use case, print drafts")
    p.add_argument("id")
    p.set_defaults(func=cmd_test)

    p = sub.add_parser("run", parents=[common], help="run enabled use cases")
    p.add_argument("--once", action="store_true", help="run now and exit (for crontab)")
    p.add_argument("--sink", action="append", metavar="NAME", help="only dispatch to these sinks")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("schedule", parents=[common], help="manage the crontab entry")
    p.add_argument("action", choices=["install", "uninstall"])
    p.set_defaults(func=cmd_schedule)
    return parser


def main(argv: list[str] | None = None, *, clock=None, fetcher=None, stop=None, crontab=None,
         stdout=None, stderr=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose or 0, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s",
                        stream=stderr or sys.stderr)
    ctx = Context(args, clock=clock, fetcher=fetcher, stop=stop, crontab=crontab,
                  stdout=stdout, stderr=stderr)
    return args.func(ctx)


def entry_point() -> None:
    sys.exit(main())
