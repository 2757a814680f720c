"""Exception hierarchy shared across datastringer modules."""

from __future__ import annotations


class DatastringerError(Exception):
    """Base class for every error raised by this package."""


# config

class ConfigError(DatastringerError):
    pass


class ConfigNotFound(ConfigError):
    pass


class ConfigSyntaxError(ConfigError):
    def __init__(self, message: str, line: int, column: int):
        super().__init__(f"{message} (line {line}, column {column})")
        self.line = line
        self.column = column


class UnknownStringer(ConfigError):
    pass


class ArityMismatch(ConfigError):
    pass


class UnknownUseCase(ConfigError):
    pass


# ingest

class TemplateError(DatastringerError):
    pass


class UnresolvedPlaceholder(TemplateError):
    def __init__(self, name: str):
        super().__init__(f"unresolved placeholder {{{name}}}")
        self.name = name


class FetchError(DatastringerError):
    pass


class HttpStatusError(FetchError):
    def __init__(self, status: int, url: str):
        super().__init__(f"HTTP {status} from {url}")
        self.status = status
        self.url = url


class FetchTimeout(FetchError):
    pass


class RedirectLoop(FetchError):
    pass


class ParseError(DatastringerError):
    pass


# snapshot store

class StoreError(DatastringerError):
    pass


class LockContention(StoreError):
    pass


class CorruptSnapshot(StoreError):
    pass


class MissingKeyField(DatastringerError):
    def __init__(self, field: str, index: int, side: str):
        super().__init__(f"key field {field!r} absent from {side} record {index}")
        self.field = field
        self.index = index
        self.side = side


# stats

class InsufficientData(DatastringerError):
    pass


class ZeroBaseline(DatastringerError):
    pass


# rules

class RuleSyntaxError(DatastringerError):
    def __init__(self, message: str, position: int):
        super().__init__(f"{message} at position {position}")
        self.position = position


class RuleEvalError(DatastringerError):
    pass


class UnknownField(RuleEvalError):
    pass


# engine

class UseCaseError(DatastringerError):
    def __init__(self, use_case_id: str, cause: Exception):
        super().__init__(f"{use_case_id}: {cause}")
        self.use_case_id = use_case_id
        self.cause = cause


# scheduler

class CronError(DatastringerError):
    pass


class UnreachableSchedule(CronError):
    pass


class ScheduleFacilityMissing(DatastringerError):
    pass


# dispatch

class DeliveryError(DatastringerError):
    pass
