"""Fetching remote datasets and normalizing them into flat record sets."""

from __future__ import annotations

import csv
import io
import json
import logging
import re
import socket
import time
import urllib.error
import urllib.parse
import urllib.request
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Any, Iterable, Mapping

from . import jsonutil
from .errors import (
    FetchError,
    FetchTimeout,
    HttpStatusError,
    ParseError,
    RedirectLoop,
    TemplateError,
    UnresolvedPlaceholder,
)

log = logging.getLogger(__name__)

Value = Any  # str | Decimal | bool | None
Record = dict[str, Value]

SEPARATOR = "."
MAX_REDIRECTS = 5
FORMATS = ("json", "csv")


@dataclass(frozen=True, order=True)
class Period:
    """A calendar month; renders as ``YYYY-MM``."""

    year: int
    month: int

    def __post_init__(self):
        if not 1 <= self.month <= 12:
            raise ValueError(f"month out of range: {self.month}")

    def __str__(self) -> str:
        return f"{self.year:04d}-{self.month:02d}"

    @classmethod
    def parse(cls, text: str) -> Period:
        m = re.fullmatch(r"(\d{4})-(\d{2})", text.strip())
        if not m:
            raise ValueError(f"not a YYYY-MM period: {text!r}")
        return cls(int(m.group(1)), int(m.group(2)))

    @classmethod
    def of(cls, instant: datetime) -> Period:
        """Calendar month of ``instant`` in UTC (naive instants are taken as UTC)."""
        if instant.tzinfo is not None:
            instant = instant.astimezone(timezone.utc)
        return cls(instant.year, instant.month)

    def shift(self, months: int) -> Period:
        index = self.year * 12 + (self.month - 1) + months
        return Period(index // 12, index % 12 + 1)


@dataclass
class RecordSet:
    records: list[Record] = field(default_factory=list)
    source_url: str = ""
    fetched_at: datetime | None = None
    period: Period | None = None

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)


@dataclass
class SourceSpec:
    url_template: str
    format: str = "json"
    record_path: str | None = None
    timeout: float = 30.0
    headers: dict[str, str] = field(default_factory=dict)
    has_header: bool = True

    def __post_init__(self):
        if self.format not in FORMATS:
            raise ValueError(f"unsupported format {self.format!r}")
        if self.timeout <= 0:
            raise ValueError("timeout must be positive")


@dataclass
class RawPayload:
    body: bytes
    status: int
    content_type: str | None
    url: str = ""


# -- URL templates -----------------------------------------------------------

_PLACEHOLDER = re.compile(r"\{([A-Za-z_][A-Za-z0-9_]*)\}")


def _scan_template(template: str) -> list[tuple[str, str]]:
    """Split a template into ("text", s) and ("name", s) parts."""
    parts = []
    pos = 0
    while pos < len(template):
        brace = min(
            (i for i in (template.find("{", pos), template.find("}", pos)) if i >= 0),
            default=-1,
        )
        if brace < 0:
            parts.append(("text", template[pos:]))
            break
        if template[brace] == "}":
            raise TemplateError(f"unbalanced '}}' at position {brace}")
        m = _PLACEHOLDER.match(template, brace)
        if not m:
            raise TemplateError(f"malformed placeholder at position {brace}")
        if brace > pos:
            parts.append(("text", template[pos:brace]))
        parts.append(("name", m.group(1)))
        pos = m.end()
    return parts


def template_placeholders(template: str) -> list[str]:
    """Placeholder names in order of first appearance."""
    seen: list[str] = []
    for kind, value in _scan_template(template):
        if kind == "name" and value not in seen:
            seen.append(value)
    return seen


def render_url(template: str, params: Mapping[str, str], period: Period | None = None) -> str:
    out = []
    for kind, value in _scan_template(template):
        if kind == "text":
            out.append(value)
        elif value == "period" and period is not None:
            out.append(str(period))
        elif value in params:
            out.append(urllib.parse.quote(str(params[value]), safe=""))
        else:
            raise UnresolvedPlaceholder(value)
    return "".join(out)


# -- fetching ----------------------------------------------------------------

class _NoRedirect(urllib.request.HTTPRedirectHandler):
    def redirect_request(self, req, fp, code, msg, headers, newurl):
        return None


_TRANSIENT = (ConnectionRefusedError, ConnectionResetError, ConnectionAbortedError)


class Fetcher:
    """HTTP GET with a total deadline, a redirect cap and one retry on
    transient connection failures. Safe to share between threads."""

    def __init__(self, user_agent: str = "datastringer", retries: int = 1):
        self.user_agent = user_agent
        self.retries = retries
        self._opener = urllib.request.build_opener(_NoRedirect)

    def fetch(self, source: SourceSpec, url: str) -> RawPayload:
        scheme = urllib.parse.urlsplit(url).scheme
        if scheme not in ("http", "https"):
            raise FetchError(f"not an absolute http(s) URL: {url!r}")
        attempt = 0
        while True:
            try:
                return self._fetch_once(source, url)
            except FetchError as exc:
                cause = exc.__cause__
                if attempt < self.retries and isinstance(cause, _TRANSIENT):
                    attempt += 1
                    log.info("retrying %s after %s", url, cause)
                    continue
                raise

    def _fetch_once(self, source: SourceSpec, url: str) -> RawPayload:
        deadline = time.monotonic() + source.timeout
        visited = {url}
        current = url
        for _ in range(MAX_REDIRECTS + 1):
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                raise FetchTimeout(f"timed out after {source.timeout}s fetching {url}")
            headers = {"User-Agent": self.user_agent, **source.headers}
            request = urllib.request.Request(current, headers=headers, method="GET")
            try:
                response = self._opener.open(request, timeout=remaining)
            except urllib.error.HTTPError as exc:
                if exc.code in (301, 302, 303, 307, 308) and exc.headers.get("Location"):
                    exc.close()
                    target = urllib.parse.urljoin(current, exc.headers["Location"])
                    if target in visited:
                        raise RedirectLoop(f"redirect loop at {target}") from None
                    visited.add(target)
                    current = target
                    continue
                exc.close()
                raise HttpStatusError(exc.code, current) from None
            except (socket.timeout, TimeoutError) as exc:
                raise FetchTimeout(f"timed out after {source.timeout}s fetching {url}") from exc
            except urllib.error.URLError as exc:
                reason = exc.reason
                if isinstance(reason, (socket.timeout, TimeoutError)):
                    raise FetchTimeout(f"timed out after {source.timeout}s fetching {url}") from reason
                err = FetchError(f"network failure fetching {current}: {reason}")
                raise err from (reason if isinstance(reason, BaseException) else exc)
            except OSError as exc:
                raise FetchError(f"network failure fetching {current}: {exc}") from exc
            with response:
                body = self._read(response, deadline, url, source.timeout)
                return RawPayload(
                    body=body,
                    status=response.status,
                    content_type=response.headers.get("Content-Type"),
                    url=current,
                )
        raise RedirectLoop(f"more than {MAX_REDIRECTS} redirects fetching {url}")

    @staticmethod
    def _read(response, deadline: float, url: str, timeout: float) -> bytes:
        chunks = []
        try:
            while True:
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    raise FetchTimeout(f"timed out after {timeout}s fetching {url}")
                if response.fp is not None and getattr(response.fp, "raw", None) is not None:
                    sock = getattr(response.fp.raw, "_sock", None)
                    if sock is not None:
                        sock.settimeout(remaining)
                chunk = response.read(65536)
                if not chunk:
                    return b"".join(chunks)
                chunks.append(chunk)
        except (socket.timeout, TimeoutError) as exc:
            raise FetchTimeout(f"timed out after {timeout}s fetching {url}") from exc


def fetch(source: SourceSpec, url: str, fetcher: Fetcher | None = None) -> RawPayload:
    return (fetcher or Fetcher()).fetch(source, url)


# -- parsing -----------------------------------------------------------------

def _flatten(obj: Mapping[str, Any], prefix: str, out: Record) -> None:
    for key, value in obj.items():
        if SEPARATOR in key:
            raise ParseError(f"field name {key!r} contains {SEPARATOR!r}")
        name = prefix + key
        if isinstance(value, dict):
            _flatten(value, name + SEPARATOR, out)
        else:
            out[name] = _scalar(value)


def _scalar(value: Any) -> Value:
    if isinstance(value, (list, dict)):
        return jsonutil.dumps(value, sort_keys=True)
    return value


def flatten_record(obj: Any) -> Record:
    if isinstance(obj, dict):
        out: Record = {}
        _flatten(obj, "", out)
        return out
    return {"value": _scalar(obj)}


def parse_json(data: bytes, record_path: str | None = None) -> RecordSet:
    try:
        text = data.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise ParseError(f"payload is not UTF-8: {exc}") from exc
    try:
        doc = jsonutil.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON: {exc.msg} (line {exc.lineno}, column {exc.colno})") from exc
    except ValueError as exc:
        raise ParseError(f"invalid JSON: {exc}") from exc

    located = doc
    if record_path:
        for segment in record_path.strip("/").split("/"):
            if isinstance(located, dict) and segment in located:
                located = located[segment]
            elif isinstance(located, list) and segment.isdigit() and int(segment) < len(located):
                located = located[int(segment)]
            else:
                raise ParseError(f"record_path {record_path!r} not found (at {segment!r})")
    if not isinstance(located, list):
        raise ParseError(f"located value is {type(located).__name__}, not an array")
    return RecordSet(records=[flatten_record(item) for item in located])


def serialize_json(record_set: RecordSet | Iterable[Record]) -> bytes:
    """Render records as a JSON array; inverse of :func:`parse_json` for flat records."""
    records = record_set.records if isinstance(record_set, RecordSet) else list(record_set)
    return jsonutil.dumps(list(records)).encode("utf-8")


def parse_csv(data: bytes, has_header: bool = True) -> RecordSet:
    try:
        text = data.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise ParseError(f"payload is not UTF-8: {exc}") from exc
    if text.startswith("\ufeff"):
        text = text[1:]
    reader = csv.reader(io.StringIO(text, newline=""), strict=True)
    rows: list[list[str]] = []
    try:
        for row in reader:
            rows.append(row)
    except csv.Error as exc:
        raise ParseError(f"CSV error near row {len(rows) + 1}: {exc}") from exc

    numbered = [(i + 1, row) for i, row in enumerate(rows) if row]
    if not numbered:
        return RecordSet()
    if has_header:
        header = numbered[0][1]
        body = numbered[1:]
    else:
        header = [f"col{i + 1}" for i in range(len(numbered[0][1]))]
        body = numbered
    if len(set(header)) != len(header):
        raise ParseError("duplicate column names in CSV header")
    records = []
    for number, row in body:
        if len(row) != len(header):
            raise ParseError(
                f"ragged row {number}: {len(row)} fields, expected {len(header)}")
        records.append(dict(zip(header, row)))
    return RecordSet(records=records)


def serialize_csv(record_set: RecordSet | Iterable[Record]) -> bytes:
    records = record_set.records if isinstance(record_set, RecordSet) else list(record_set)
    header: list[str] = []
    for r in records:
        for k in r:
            if k not in header:
                header.append(k)
    buf = io.StringIO(newline="")
    writer = csv.writer(buf, lineterminator="\r\n")
    if header:
        writer.writerow(header)
    for r in records:
        writer.writerow([r.get(k, "") for k in header])
    return buf.getvalue().encode("utf-8")


def parse_payload(payload: bytes, source: SourceSpec) -> RecordSet:
    if source.format == "csv":
        return parse_csv(payload, source.has_header)
    return parse_json(payload, source.record_path)
