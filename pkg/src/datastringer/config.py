"""Loading, validating and editing the use-cases file.

Two on-disk forms are accepted. The extended form is an object::

    {"version": 1,
     "defaults": {"schedule": "0 12 * * *", "sinks": ["stdout"], "smtp": {...}},
     "sinks": {"alerts": {"kind": "file", "path": "alerts.jsonl"}},
     "use_cases": [{"id": "crime", "stringer": "category_threshold",
                    "parameters": {...}, "enabled": true}]}

The legacy form is a bare array of ``{"stringer": "<script>.js",
"parameters": [positional strings]}`` objects; positional parameters are
named according to the stringer and each entry gets the id ``stringer-<i>``.
"""

from __future__ import annotations

import json
import os
import re
from dataclasses import dataclass, field
from decimal import Decimal, InvalidOperation
from enum import Enum
from pathlib import Path
from typing import Any

from .errors import (
    ArityMismatch,
    ConfigError,
    ConfigNotFound,
    ConfigSyntaxError,
    CronError,
    RuleSyntaxError,
    TemplateError,
    UnknownStringer,
    UnknownUseCase,
)
from .ingest import FORMATS, template_placeholders
from .locking import atomic_write, file_lock
from .scheduler import DEFAULT_SCHEDULE, parse_cron

FORMAT_VERSION = 1
ID_PATTERN = re.compile(r"[a-z0-9_-]+")
SINK_KINDS = ("smtp", "stdout", "file", "webhook")
BUILTIN_SINKS = ("stdout", "email")

CRIME_URL = "https://data.police.uk/api/crimes-street/all-crime?lat={lat}&lng={lng}&date={period}"
NEIGHBOURHOOD_URL = "https://data.police.uk/api/{force}/{area}"


class StringerKind(str, Enum):
    SNAPSHOT_DIFF = "snapshot_diff"
    CATEGORY_THRESHOLD = "category_threshold"
    EXPRESSION_RULE = "expression_rule"


REQUIRED_PARAMETERS = {
    StringerKind.SNAPSHOT_DIFF: ("url",),
    StringerKind.CATEGORY_THRESHOLD: ("url", "numberOfMonths", "threshold"),
    StringerKind.EXPRESSION_RULE: ("url", "rule"),
}


@dataclass(frozen=True)
class LegacyStringer:
    kind: StringerKind
    positional: tuple[str, ...]
    defaults: dict[str, str]


LEGACY_STRINGERS = {
    "crime-stringer.js": LegacyStringer(
        StringerKind.CATEGORY_THRESHOLD,
        ("lat", "lng", "numberOfMonths", "threshold"),
        {"url": CRIME_URL, "category_field": "category"},
    ),
    "local-police-stringer.js": LegacyStringer(
        StringerKind.SNAPSHOT_DIFF,
        ("force", "area"),
        {"url": NEIGHBOURHOOD_URL},
    ),
}


@dataclass
class SmtpSettings:
    host: str = "localhost"
    port: int = 25
    from_addr: str = "datastringer@localhost"
    to_addrs: list[str] = field(default_factory=list)
    starttls: bool = False
    username: str | None = None
    password: str | None = None
    timeout: float = 30.0

    def to_json(self) -> dict:
        out = {"host": self.host, "port": self.port, "from": self.from_addr, "to": list(self.to_addrs)}
        if self.starttls:
            out["starttls"] = True
        if self.username is not None:
            out["username"] = self.username
        if self.password is not None:
            out["password"] = self.password
        if self.timeout != 30.0:
            out["timeout"] = self.timeout
        return out

    @classmethod
    def from_json(cls, data: dict, base: SmtpSettings | None = None) -> SmtpSettings:
        base = base or cls()
        to = data.get("to", base.to_addrs)
        return cls(
            host=data.get("host", base.host),
            port=int(data.get("port", base.port)),
            from_addr=data.get("from", base.from_addr),
            to_addrs=[to] if isinstance(to, str) else list(to),
            starttls=bool(data.get("starttls", base.starttls)),
            username=data.get("username", base.username),
            password=data.get("password", base.password),
            timeout=float(data.get("timeout", base.timeout)),
        )


@dataclass
class SinkConfig:
    name: str
    kind: str
    smtp: SmtpSettings | None = None
    path: str | None = None
    url: str | None = None
    body_template: str | None = None
    raw: dict = field(default_factory=dict)


@dataclass
class Defaults:
    schedule: str = DEFAULT_SCHEDULE
    sinks: list[str] = field(default_factory=lambda: ["stdout"])
    smtp: SmtpSettings = field(default_factory=SmtpSettings)
    timezone: str | None = None


@dataclass
class UseCase:
    id: str
    stringer_kind: StringerKind
    parameters: dict[str, str] = field(default_factory=dict)
    enabled: bool = True
    schedule: str | None = None
    sinks: list[str] = field(default_factory=list)
    headline_template: str | None = None


@dataclass
class ConfigFile:
    version: int = FORMAT_VERSION
    defaults: Defaults = field(default_factory=Defaults)
    use_cases: list[UseCase] = field(default_factory=list)
    sinks: dict[str, dict] = field(default_factory=dict)
    legacy: bool = field(default=False, compare=False)

    def get(self, use_case_id: str) -> UseCase:
        for uc in self.use_cases:
            if uc.id == use_case_id:
                return uc
        raise UnknownUseCase(f"no use case with id {use_case_id!r}")

    def sinks_for(self, use_case: UseCase) -> list[SinkConfig]:
        return [self.sink(name) for name in (use_case.sinks or self.defaults.sinks or ["stdout"])]

    def sink(self, name: str) -> SinkConfig:
        if name in self.sinks:
            raw = self.sinks[name]
            kind = raw.get("kind", "stdout")
            return SinkConfig(
                name=name,
                kind=kind,
                smtp=SmtpSettings.from_json(raw, self.defaults.smtp) if kind == "smtp" else None,
                path=raw.get("path"),
                url=raw.get("url"),
                body_template=raw.get("body_template"),
                raw=raw,
            )
        if name == "stdout":
            return SinkConfig(name="stdout", kind="stdout")
        if name == "email":
            return SinkConfig(name="email", kind="smtp", smtp=self.defaults.smtp)
        raise ConfigError(f"unknown sink {name!r}")


@dataclass(frozen=True)
class Diagnostic:
    severity: str  # "error" | "warning"
    path: str
    message: str

    def __str__(self) -> str:
        return f"{self.severity}: {self.path}: {self.message}"


# -- loading -----------------------------------------------------------------

def default_home() -> Path:
    return Path(os.environ.get("DATASTRINGER_HOME") or Path.home() / ".datastringer")


def default_config_path(home: str | Path | None = None) -> Path:
    env = os.environ.get("DATASTRINGER_CONFIG")
    if env:
        return Path(env)
    return Path(home or default_home()) / "use_cases.json"


def _read_json(path: Path) -> Any:
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ConfigNotFound(f"config file not found: {path}") from None
    except IsADirectoryError:
        raise ConfigNotFound(f"config path is a directory: {path}") from None
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigSyntaxError(exc.msg, exc.lineno, exc.colno) from exc


def _kind(name: str) -> StringerKind:
    try:
        return StringerKind(name)
    except ValueError:
        if name in LEGACY_STRINGERS:
            return LEGACY_STRINGERS[name].kind
        raise UnknownStringer(f"unknown stringer {name!r}") from None


def _string_map(data: Any, where: str) -> dict[str, str]:
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: parameters must be an object")
    return {str(k): v if isinstance(v, str) else json.dumps(v) for k, v in data.items()}


def expand_legacy(entries: list) -> list[UseCase]:
    use_cases = []
    for index, entry in enumerate(entries):
        where = f"[{index}]"
        if not isinstance(entry, dict) or "stringer" not in entry:
            raise ConfigError(f"{where}: legacy entry needs a 'stringer' key")
        name = entry["stringer"]
        legacy = LEGACY_STRINGERS.get(name)
        if legacy is None:
            raise UnknownStringer(f"{where}: unknown stringer {name!r}")
        values = entry.get("parameters", [])
        if not isinstance(values, list):
            raise ConfigError(f"{where}: legacy parameters must be an array")
        expected = legacy.positional
        if len(values) < len(expected):
            raise ArityMismatch(
                f"{where}: {name} expects {len(expected)} parameters "
                f"({', '.join(expected)}); missing {expected[len(values)]!r}")
        if len(values) > len(expected):
            raise ArityMismatch(
                f"{where}: {name} expects {len(expected)} parameters "
                f"({', '.join(expected)}), got {len(values)}")
        params = dict(legacy.defaults)
        params.update({k: str(v) for k, v in zip(expected, values)})
        use_cases.append(UseCase(
            id=f"stringer-{index}",
            stringer_kind=legacy.kind,
            parameters=params,
            enabled=bool(entry.get("enabled", True)),
        ))
    return use_cases


def config_from_data(data: Any) -> ConfigFile:
    if isinstance(data, list):
        return ConfigFile(use_cases=expand_legacy(data), legacy=True)
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object or array")

    raw_defaults = data.get("defaults") or {}
    defaults = Defaults(
        schedule=raw_defaults.get("schedule") or DEFAULT_SCHEDULE,
        sinks=list(raw_defaults.get("sinks") or ["stdout"]),
        smtp=SmtpSettings.from_json(raw_defaults.get("smtp") or {}),
        timezone=raw_defaults.get("timezone"),
    )
    use_cases = []
    for index, raw in enumerate(data.get("use_cases") or []):
        where = f"use_cases[{index}]"
        if not isinstance(raw, dict):
            raise ConfigError(f"{where}: use case must be an object")
        kind_name = raw.get("stringer", raw.get("stringer_kind"))
        if kind_name is None:
            raise ConfigError(f"{where}: missing 'stringer'")
        sinks = raw.get("sinks") or []
        use_cases.append(UseCase(
            id=str(raw.get("id", "")),
            stringer_kind=_kind(kind_name),
            parameters=_string_map(raw.get("parameters"), where),
            enabled=bool(raw.get("enabled", True)),
            schedule=raw.get("schedule"),
            sinks=[sinks] if isinstance(sinks, str) else list(sinks),
            headline_template=raw.get("headline_template"),
        ))
    sinks = data.get("sinks") or {}
    if not isinstance(sinks, dict):
        raise ConfigError("'sinks' must be an object of named sink definitions")
    return ConfigFile(
        version=int(data.get("version", FORMAT_VERSION)),
        defaults=defaults,
        use_cases=use_cases,
        sinks=dict(sinks),
    )


def load_config(path: str | Path) -> ConfigFile:
    return config_from_data(_read_json(Path(path)))


def to_data(config: ConfigFile) -> dict:
    """Extended-form JSON document for ``config``."""
    defaults: dict[str, Any] = {
        "schedule": config.defaults.schedule,
        "sinks": list(config.defaults.sinks),
        "smtp": config.defaults.smtp.to_json(),
    }
    if config.defaults.timezone:
        defaults["timezone"] = config.defaults.timezone
    out: dict[str, Any] = {"version": config.version, "defaults": defaults}
    if config.sinks:
        out["sinks"] = config.sinks
    out["use_cases"] = []
    for uc in config.use_cases:
        entry: dict[str, Any] = {
            "id": uc.id,
            "stringer": uc.stringer_kind.value,
            "enabled": uc.enabled,
            "parameters": dict(uc.parameters),
        }
        if uc.schedule:
            entry["schedule"] = uc.schedule
        if uc.sinks:
            entry["sinks"] = list(uc.sinks)
        if uc.headline_template:
            entry["headline_template"] = uc.headline_template
        out["use_cases"].append(entry)
    return out


def dumps_config(config: ConfigFile) -> str:
    return _dump(to_data(config))


def _dump(data: Any) -> str:
    return json.dumps(data, indent=2, ensure_ascii=False) + "\n"


def save_config(config: ConfigFile, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    atomic_write(path, dumps_config(config).encode("utf-8"))


# -- validation --------------------------------------------------------------

def _positive_int(value: str) -> bool:
    return bool(re.fullmatch(r"\s*\d+\s*", value)) and int(value) > 0


def _non_negative_decimal(value: str) -> bool:
    try:
        d = Decimal(value.strip())
    except (InvalidOperation, AttributeError):
        return False
    return d.is_finite() and d >= 0


def validate(config: ConfigFile) -> list[Diagnostic]:
    diags: list[Diagnostic] = []

    def error(path, message):
        diags.append(Diagnostic("error", path, message))

    def warning(path, message):
        diags.append(Diagnostic("warning", path, message))

    try:
        parse_cron(config.defaults.schedule)
    except CronError as exc:
        error("defaults.schedule", str(exc))
    if config.defaults.timezone:
        try:
            from zoneinfo import ZoneInfo
            ZoneInfo(config.defaults.timezone)
        except Exception:
            error("defaults.timezone", f"unknown timezone {config.defaults.timezone!r}")

    for name, raw in config.sinks.items():
        where = f"sinks.{name}"
        kind = raw.get("kind") if isinstance(raw, dict) else None
        if kind not in SINK_KINDS:
            error(where, f"sink kind must be one of {', '.join(SINK_KINDS)}")
        elif kind == "file" and not raw.get("path"):
            error(where, "file sink needs a 'path'")
        elif kind == "webhook" and not raw.get("url"):
            error(where, "webhook sink needs a 'url'")
    known_sinks = set(config.sinks) | set(BUILTIN_SINKS)
    for i, name in enumerate(config.defaults.sinks):
        if name not in known_sinks:
            error(f"defaults.sinks[{i}]", f"unknown sink {name!r}")

    seen: dict[str, int] = {}
    for index, uc in enumerate(config.use_cases):
        where = f"use_cases[{index}]"
        if not uc.id:
            error(f"{where}.id", "id is empty")
        elif not ID_PATTERN.fullmatch(uc.id):
            error(f"{where}.id", f"id {uc.id!r} must match [a-z0-9_-]+")
        if uc.id in seen:
            error(f"{where}.id", f"duplicate id {uc.id!r} (first at use_cases[{seen[uc.id]}])")
        else:
            seen[uc.id] = index

        if uc.schedule is not None:
            try:
                parse_cron(uc.schedule)
            except CronError as exc:
                error(f"{where}.schedule", str(exc))
        for i, name in enumerate(uc.sinks):
            if name not in known_sinks:
                error(f"{where}.sinks[{i}]", f"unknown sink {name!r}")
        diags.extend(_validate_parameters(uc, where))
        for name in uc.sinks or config.defaults.sinks:
            try:
                sink = config.sink(name)
            except (ConfigError, AttributeError, TypeError, ValueError):
                continue
            if sink.kind == "smtp" and not sink.smtp.to_addrs:
                warning(f"{where}.sinks", f"email sink {name!r} has no recipients")
    return diags


def _validate_parameters(uc: UseCase, where: str) -> list[Diagnostic]:
    diags = []
    params = uc.parameters
    ppath = f"{where}.parameters"

    for name in REQUIRED_PARAMETERS[uc.stringer_kind]:
        if name not in params or params[name] == "":
            diags.append(Diagnostic("error", f"{ppath}.{name}",
                                    f"required by {uc.stringer_kind.value}"))

    if "numberOfMonths" in params and not _positive_int(params["numberOfMonths"]):
        diags.append(Diagnostic("error", f"{ppath}.numberOfMonths",
                                f"must be a positive integer, got {params['numberOfMonths']!r}"))
    if "threshold" in params and not _non_negative_decimal(params["threshold"]):
        diags.append(Diagnostic("error", f"{ppath}.threshold",
                                f"must be a non-negative number, got {params['threshold']!r}"))
    if "timeout" in params:
        try:
            ok = Decimal(params["timeout"]) > 0
        except InvalidOperation:
            ok = False
        if not ok:
            diags.append(Diagnostic("error", f"{ppath}.timeout", "must be a positive number"))
    if "format" in params and params["format"] not in FORMATS:
        diags.append(Diagnostic("error", f"{ppath}.format", f"must be one of {', '.join(FORMATS)}"))
    if "direction" in params and params["direction"] not in ("both", "rise_only", "fall_only"):
        diags.append(Diagnostic("error", f"{ppath}.direction",
                                "must be both, rise_only or fall_only"))
    if "has_header" in params and params["has_header"].lower() not in ("true", "false"):
        diags.append(Diagnostic("error", f"{ppath}.has_header", "must be true or false"))

    if params.get("url"):
        try:
            names = template_placeholders(params["url"])
        except TemplateError as exc:
            diags.append(Diagnostic("error", f"{ppath}.url", str(exc)))
        else:
            for name in names:
                if name != "period" and name not in params:
                    diags.append(Diagnostic("error", f"{ppath}.url",
                                            f"placeholder {{{name}}} has no parameter"))
            periodic = uc.stringer_kind in (StringerKind.CATEGORY_THRESHOLD,
                                            StringerKind.EXPRESSION_RULE)
            if periodic and "period" not in names:
                diags.append(Diagnostic("error", f"{ppath}.url",
                                        "needs a {period} placeholder to fetch monthly data"))

    if uc.stringer_kind is StringerKind.EXPRESSION_RULE and params.get("rule"):
        from .rules import parse_rule
        try:
            parse_rule(params["rule"])
        except RuleSyntaxError as exc:
            diags.append(Diagnostic("error", f"{ppath}.rule", str(exc)))
    return diags


def has_errors(diagnostics: list[Diagnostic]) -> bool:
    return any(d.severity == "error" for d in diagnostics)


# -- editing -----------------------------------------------------------------

def set_enabled(path: str | Path, use_case_id: str, enabled: bool) -> ConfigFile:
    """Flip one use case's ``enabled`` flag in place, preserving everything else.

    The document is rewritten with two-space indentation; key order is kept.
    """
    path = Path(path)
    with file_lock(path.with_name(path.name + ".lock"), timeout=5.0):
        data = _read_json(path)
        config = config_from_data(data)
        index = next((i for i, uc in enumerate(config.use_cases) if uc.id == use_case_id), None)
        if index is None:
            raise UnknownUseCase(f"no use case with id {use_case_id!r}")
        entry = data[index] if isinstance(data, list) else data["use_cases"][index]
        if enabled and "enabled" not in entry:
            pass  # absent means enabled
        else:
            entry["enabled"] = enabled
        atomic_write(path, _dump(data).encode("utf-8"))
    return config_from_data(data)
