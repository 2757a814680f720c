"""Alert delivery: SMTP, stdout, JSON-lines files and webhooks, deduplicated by key."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import smtplib
import socket
import sys
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone
from email.message import EmailMessage
from email.policy import SMTP as SMTP_POLICY
from email.utils import format_datetime
from pathlib import Path
from typing import Any, Iterable, TextIO

from . import jsonutil
from .config import SinkConfig, SmtpSettings
from .engine import AlertDraft
from .errors import DeliveryError
from .locking import file_lock

log = logging.getLogger(__name__)

DEDUP_RETENTION = timedelta(days=90)
# long ASCII subjects must not be folded, so use the RFC 5322 hard limit
MAIL_POLICY = SMTP_POLICY.clone(max_line_length=998)


@dataclass
class Alert:
    id: str
    use_case_id: str
    headline: str
    body: str
    dedup_key: str
    severity: str
    metrics: dict[str, Any]
    created_at: datetime

    @classmethod
    def from_draft(cls, draft: AlertDraft, created_at: datetime) -> Alert:
        digest = hashlib.sha256(
            "\0".join([draft.dedup_key, draft.headline, draft.body]).encode("utf-8")).hexdigest()
        return cls(
            id=digest,
            use_case_id=draft.use_case_id,
            headline=draft.headline,
            body=draft.body,
            dedup_key=draft.dedup_key,
            severity=draft.severity,
            metrics=dict(draft.metrics),
            created_at=created_at,
        )

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "use_case_id": self.use_case_id,
            "headline": self.headline,
            "body": self.body,
            "metrics": self.metrics,
            "created_at": self.created_at.isoformat(),
            "severity": self.severity,
            "dedup_key": self.dedup_key,
        }

    def json_line(self) -> str:
        return jsonutil.dumps(self.to_json()) + "\n"


# -- dedup store ---------------------------------------------------------------

class DedupStore:
    """Flat file of ``"key"<TAB>timestamp`` lines (keys JSON-quoted, since
    categories come from the data); entries older than the retention window
    are dropped whenever the file is rewritten."""

    def __init__(self, path: str | os.PathLike, retention: timedelta = DEDUP_RETENTION,
                 lock_timeout: float = 10.0):
        self.path = Path(path)
        self.retention = retention
        self.lock_timeout = lock_timeout

    def _read(self) -> dict[str, datetime]:
        entries: dict[str, datetime] = {}
        try:
            text = self.path.read_text("utf-8")
        except FileNotFoundError:
            return entries
        for line in text.split("\n"):
            quoted, _, stamp = line.rpartition("\t")
            try:
                key = json.loads(quoted)
            except ValueError:
                continue
            try:
                entries[key] = datetime.fromisoformat(stamp)
            except ValueError:
                entries[key] = datetime.now(timezone.utc)
        return entries

    def __contains__(self, key: str) -> bool:
        return key in self._read()

    def keys(self) -> set[str]:
        return set(self._read())

    def add(self, key: str, now: datetime | None = None) -> None:
        now = now or datetime.now(timezone.utc)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with file_lock(self.path.with_name(self.path.name + ".lock"), self.lock_timeout):
            entries = self._read()
            entries[key] = now
            cutoff = now - self.retention
            kept = {k: t for k, t in entries.items() if _aware(t) >= _aware(cutoff)}
            text = "".join(f"{json.dumps(k)}\t{t.isoformat()}\n" for k, t in sorted(kept.items()))
            tmp = self.path.with_name(self.path.name + ".tmp")
            tmp.write_text(text, "utf-8")
            os.replace(tmp, self.path)


def _aware(t: datetime) -> datetime:
    return t if t.tzinfo else t.replace(tzinfo=timezone.utc)


# -- sinks -------------------------------------------------------------------

@dataclass
class SinkResult:
    sink: str
    ok: bool
    detail: str = ""


@dataclass
class DeliveryEntry:
    alert_id: str
    use_case_id: str
    dedup_key: str
    headline: str
    severity: str
    status: str  # delivered | suppressed | failed
    results: list[SinkResult] = field(default_factory=list)
    reason: str = ""

    def to_json(self) -> dict:
        return {
            "alert_id": self.alert_id,
            "use_case_id": self.use_case_id,
            "dedup_key": self.dedup_key,
            "headline": self.headline,
            "severity": self.severity,
            "status": self.status,
            "reason": self.reason,
            "sinks": [{"sink": r.sink, "ok": r.ok, "detail": r.detail} for r in self.results],
        }


@dataclass
class DeliveryReport:
    entries: list[DeliveryEntry] = field(default_factory=list)

    def __len__(self):
        return len(self.entries)

    def by_status(self, status: str) -> list[DeliveryEntry]:
        return [e for e in self.entries if e.status == status]

    @property
    def delivered(self) -> list[DeliveryEntry]:
        return self.by_status("delivered")

    @property
    def suppressed(self) -> list[DeliveryEntry]:
        return self.by_status("suppressed")

    @property
    def failed(self) -> list[DeliveryEntry]:
        return self.by_status("failed")


def build_message(alert: Alert, smtp: SmtpSettings) -> EmailMessage:
    msg = EmailMessage(policy=MAIL_POLICY)
    msg["Subject"] = alert.headline
    msg["From"] = smtp.from_addr
    msg["To"] = ", ".join(smtp.to_addrs)
    msg["Date"] = format_datetime(_aware(alert.created_at))
    msg["Message-ID"] = f"<{alert.id[:32]}@datastringer>"
    msg["X-Datastringer-Use-Case"] = alert.use_case_id
    width = max((len(k) for k in alert.metrics), default=0)
    table = [f"  {k.ljust(width)}  {_cell(v)}" for k, v in alert.metrics.items()]
    text = alert.body.rstrip("\n") + "\n\nMetrics:\n" + "\n".join(table) + \
        f"\n\nUse case: {alert.use_case_id}\nAlert id: {alert.id}\n"
    msg.set_content(text, charset="utf-8")
    return msg


def _cell(value: Any) -> str:
    if value is None:
        return "-"
    text = jsonutil.dumps(value)
    return text[1:-1] if text.startswith('"') else text


def send_smtp(alert: Alert, smtp: SmtpSettings) -> str:
    """Deliver one alert as one SMTP transaction; returns the server's reply."""
    if not smtp.to_addrs:
        raise DeliveryError("no recipients configured")
    msg = build_message(alert, smtp)
    try:
        with smtplib.SMTP(smtp.host, smtp.port, timeout=smtp.timeout) as conn:
            conn.ehlo()
            if smtp.starttls:
                conn.starttls()
                conn.ehlo()
            if smtp.username:
                conn.login(smtp.username, smtp.password or "")
            refused = conn.send_message(msg, from_addr=smtp.from_addr, to_addrs=smtp.to_addrs)
    except smtplib.SMTPRecipientsRefused as exc:
        replies = "; ".join(f"{rcpt}: {code} {err.decode(errors='replace')}"
                            for rcpt, (code, err) in exc.recipients.items())
        raise DeliveryError(f"all recipients refused: {replies}") from exc
    except smtplib.SMTPResponseException as exc:
        err = exc.smtp_error.decode(errors="replace") if isinstance(exc.smtp_error, bytes) else exc.smtp_error
        raise DeliveryError(f"{exc.smtp_code} {err}") from exc
    except (OSError, smtplib.SMTPException) as exc:
        raise DeliveryError(f"cannot reach {smtp.host}:{smtp.port}: {exc}") from exc
    if refused:
        return "accepted with refused recipients: " + ", ".join(sorted(refused))
    return f"sent to {', '.join(smtp.to_addrs)}"


def write_sink(alert: Alert, sink: SinkConfig, stdout: TextIO | None = None,
               base: Path | None = None) -> str:
    """Append the alert as one JSON line to stdout or a file."""
    line = alert.json_line()
    if sink.kind == "stdout":
        out = stdout or sys.stdout
        out.write(line)
        out.flush()
        return "stdout"
    path = Path(sink.path).expanduser()
    if not path.is_absolute() and base is not None:
        path = base / path
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with file_lock(path.with_name(path.name + ".lock"), timeout=10.0):
            fd = os.open(path, os.O_WRONLY | os.O_APPEND | os.O_CREAT, 0o644)
            try:
                os.write(fd, line.encode("utf-8"))
            finally:
                os.close(fd)
    except OSError as exc:
        raise DeliveryError(f"cannot write {path}: {exc}") from exc
    return str(path)


def post_webhook(alert: Alert, sink: SinkConfig, timeout: float = 30.0) -> str:
    obj = alert.to_json()
    if sink.body_template:
        body = re.sub(r"\{(\w+)\}", lambda m: jsonutil.dumps(obj.get(m.group(1))), sink.body_template)
    else:
        body = jsonutil.dumps(obj)
    request = urllib.request.Request(
        sink.url, data=body.encode("utf-8"), method="POST",
        headers={"Content-Type": "application/json"})
    try:
        with urllib.request.urlopen(request, timeout=timeout) as response:
            return f"HTTP {response.status}"
    except urllib.error.HTTPError as exc:
        raise DeliveryError(f"HTTP {exc.code} from {sink.url}") from exc
    except (OSError, urllib.error.URLError, socket.timeout) as exc:
        raise DeliveryError(f"cannot reach {sink.url}: {exc}") from exc


class Dispatcher:
    """Routes alerts to sink implementations; swap methods out to fake delivery."""

    def __init__(self, stdout: TextIO | None = None, base: Path | None = None):
        self.stdout = stdout
        self.base = base

    def deliver(self, alert: Alert, sink: SinkConfig) -> str:
        if sink.kind == "smtp":
            return send_smtp(alert, sink.smtp or SmtpSettings())
        if sink.kind in ("stdout", "file"):
            return write_sink(alert, sink, self.stdout, self.base)
        if sink.kind == "webhook":
            return post_webhook(alert, sink)
        raise DeliveryError(f"unsupported sink kind {sink.kind!r}")


def dispatch(drafts: Iterable[AlertDraft], sinks: list[SinkConfig], dedup: DedupStore,
             now: datetime | None = None, dispatcher: Dispatcher | None = None) -> DeliveryReport:
    """Deliver each not-yet-seen draft to every sink.

    A dedup key is recorded once at least one sink accepted the alert; if
    every sink failed the key stays unrecorded so the next run retries.
    """
    now = now or datetime.now(timezone.utc)
    dispatcher = dispatcher or Dispatcher()
    report = DeliveryReport()
    for draft in drafts:
        alert = Alert.from_draft(draft, now)
        entry = DeliveryEntry(alert.id, alert.use_case_id, alert.dedup_key, alert.headline,
                              alert.severity, status="failed")
        report.entries.append(entry)
        if alert.dedup_key in dedup:
            entry.status = "suppressed"
            entry.reason = "duplicate"
            continue
        for sink in sinks:
            try:
                detail = dispatcher.deliver(alert, sink)
                entry.results.append(SinkResult(sink.name, True, detail))
            except Exception as exc:  # one bad sink must not block the others
                log.warning("sink %s failed for %s: %s", sink.name, alert.dedup_key, exc)
                entry.results.append(SinkResult(sink.name, False, str(exc)))
        if any(r.ok for r in entry.results):
            entry.status = "delivered"
            dedup.add(alert.dedup_key, now)
        else:
            entry.reason = "all sinks failed" if sinks else "no sinks"
    return report
