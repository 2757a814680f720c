"""Local store of canonical dataset versions, and keyed diffs between versions.

Layout under the store root::

    <use_case_id>/<key>.snap      canonical payload
    <use_case_id>/<key>.meta      JSON: content hash, capture time, history index
    <use_case_id>/<key>.<n>.snap  retained prior versions
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
from collections import defaultdict
from dataclasses import dataclass, field
from datetime import datetime, timezone
from decimal import Decimal
from pathlib import Path
from typing import Any, Iterable, Sequence

from . import jsonutil
from .errors import CorruptSnapshot, MissingKeyField, StoreError
from .ingest import Record, RecordSet
from .locking import file_lock

log = logging.getLogger(__name__)

DEFAULT_HISTORY = 12
LATEST = "latest"
_NAME = re.compile(r"[A-Za-z0-9_-]+")
_KEY = re.compile(r"latest|\d{4}-\d{2}")


def _normalize_value(value: Any) -> Any:
    if isinstance(value, bool) or value is None or isinstance(value, str):
        return value
    if isinstance(value, Decimal):
        return value
    if isinstance(value, int):
        return Decimal(value)
    if isinstance(value, float):
        return Decimal(repr(value))
    return str(value)


def canonical_line(record: Record) -> str:
    return jsonutil.dumps({k: _normalize_value(v) for k, v in record.items()}, sort_keys=True)


def canonicalize(record_set: RecordSet | Iterable[Record]) -> str:
    """Order- and formatting-independent text form of a record set.

    One JSON object per line, keys sorted, lines sorted, numbers without
    trailing zeros. The empty record set canonicalizes to "".
    """
    records = record_set.records if isinstance(record_set, RecordSet) else record_set
    return "".join(line + "\n" for line in sorted(canonical_line(r) for r in records))


def parse_canonical(text: str) -> RecordSet:
    return RecordSet(records=[jsonutil.loads(line) for line in text.split("\n") if line])


def content_hash(payload: str) -> str:
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class Snapshot:
    use_case_id: str
    key: str
    captured_at: datetime
    content_hash: str
    payload: str

    def records(self) -> RecordSet:
        return parse_canonical(self.payload)

    def verify(self) -> bool:
        return content_hash(self.payload) == self.content_hash


class SnapshotStore:
    """Snapshots on disk, one directory per use case.

    With ``read_only=True`` nothing is written: saves land in an in-memory
    overlay that later loads see, which is what dry runs use.
    """

    def __init__(self, root: str | os.PathLike, history: int = DEFAULT_HISTORY,
                 lock_timeout: float = 0.0, read_only: bool = False):
        if history < 0:
            raise ValueError("history must be >= 0")
        self.root = Path(root)
        self.history_limit = history
        self.lock_timeout = lock_timeout
        self.read_only = read_only
        self._overlay: dict[tuple[str, str], Snapshot] = {}

    def _dir(self, use_case_id: str) -> Path:
        if not _NAME.fullmatch(use_case_id):
            raise StoreError(f"invalid use case id {use_case_id!r}")
        return self.root / use_case_id

    @staticmethod
    def _check_key(key: str) -> None:
        if not _KEY.fullmatch(key):
            raise StoreError(f"invalid snapshot key {key!r}")

    def save(self, use_case_id: str, key: str, record_set: RecordSet,
             now: datetime | None = None) -> Snapshot:
        self._check_key(key)
        directory = self._dir(use_case_id)
        payload = canonicalize(record_set)
        snap = Snapshot(
            use_case_id=use_case_id,
            key=key,
            captured_at=now or datetime.now(timezone.utc),
            content_hash=content_hash(payload),
            payload=payload,
        )
        if self.read_only:
            self._overlay[(use_case_id, key)] = snap
            return snap

        directory.mkdir(parents=True, exist_ok=True)
        with file_lock(directory / ".lock", self.lock_timeout):
            self._recover(directory, key)
            current = directory / f"{key}.snap"
            meta = self._read_meta(directory / f"{key}.meta")
            history = list(meta.get("history", [])) if meta else []
            next_index = meta.get("next_index", 1) if meta else 1

            if meta and current.exists():
                n = next_index
                next_index += 1
                _write(directory / f"{key}.{n}.snap", current.read_bytes())
                history.append({"n": n, "content_hash": meta["content_hash"],
                                "captured_at": meta["captured_at"]})
            pruned = history[:max(0, len(history) - self.history_limit)]
            history = history[len(pruned):]

            new_meta = {
                "content_hash": snap.content_hash,
                "captured_at": snap.captured_at.isoformat(),
                "history": history,
                "next_index": next_index,
            }
            # commit order: both temps durable, then payload, then meta
            tmp_snap = directory / f"{key}.snap.tmp"
            pending = directory / f"{key}.meta.pending"
            _write_durable(tmp_snap, payload.encode("utf-8"))
            _write_durable(pending, json.dumps(new_meta, indent=2).encode("utf-8"))
            os.replace(tmp_snap, current)
            os.replace(pending, directory / f"{key}.meta")

            for entry in pruned:
                try:
                    (directory / f"{key}.{entry['n']}.snap").unlink()
                except FileNotFoundError:
                    pass
        return snap

    def load_previous(self, use_case_id: str, key: str) -> Snapshot | None:
        """Most recent snapshot for the pair, None if never saved.

        Raises CorruptSnapshot when the payload on disk does not match its hash.
        """
        self._check_key(key)
        if (use_case_id, key) in self._overlay:
            return self._overlay[(use_case_id, key)]
        directory = self._dir(use_case_id)
        current = directory / f"{key}.snap"
        meta = self._read_meta(directory / f"{key}.meta")
        if meta is None:
            # a crash before the first meta commit leaves at most temp files
            pending = self._read_meta(directory / f"{key}.meta.pending")
            if pending is None or not current.exists():
                return None
            meta = pending
        if not current.exists():
            raise CorruptSnapshot(f"{current} missing while its metadata exists")
        payload = current.read_bytes().decode("utf-8", errors="replace")
        digest = content_hash(payload)
        if digest != meta["content_hash"]:
            # interrupted between payload and meta rename: the pending meta is authoritative
            pending = self._read_meta(directory / f"{key}.meta.pending")
            if pending is None or pending["content_hash"] != digest:
                raise CorruptSnapshot(
                    f"{current}: hash {digest[:12]} does not match recorded "
                    f"{meta['content_hash'][:12]}")
            meta = pending
        return Snapshot(
            use_case_id=use_case_id,
            key=key,
            captured_at=datetime.fromisoformat(meta["captured_at"]),
            content_hash=meta["content_hash"],
            payload=payload,
        )

    def history(self, use_case_id: str, key: str) -> list[dict]:
        meta = self._read_meta(self._dir(use_case_id) / f"{key}.meta")
        return list(meta.get("history", [])) if meta else []

    def keys(self, use_case_id: str) -> list[str]:
        directory = self._dir(use_case_id)
        if not directory.is_dir():
            return []
        return sorted(p.name[:-5] for p in directory.glob("*.meta"))

    def _recover(self, directory: Path, key: str) -> None:
        current = directory / f"{key}.snap"
        pending = directory / f"{key}.meta.pending"
        meta = self._read_meta(pending)
        if meta is not None and current.exists():
            if content_hash(current.read_text("utf-8")) == meta["content_hash"]:
                log.warning("completing interrupted save of %s", current)
                os.replace(pending, directory / f"{key}.meta")
        for leftover in (pending, directory / f"{key}.snap.tmp"):
            try:
                leftover.unlink()
            except FileNotFoundError:
                pass

    @staticmethod
    def _read_meta(path: Path) -> dict | None:
        try:
            return json.loads(path.read_text("utf-8"))
        except FileNotFoundError:
            return None
        except (ValueError, OSError) as exc:
            raise CorruptSnapshot(f"unreadable metadata {path}: {exc}") from exc


def _write(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    _write_durable(tmp, data)
    os.replace(tmp, path)


def _write_durable(path: Path, data: bytes) -> None:
    with open(path, "wb") as fh:
        fh.write(data)
        fh.flush()
        os.fsync(fh.fileno())


# -- diff --------------------------------------------------------------------

_ABSENT = object()


@dataclass(frozen=True)
class FieldChange:
    record_key: str
    field: str
    old: Any
    new: Any


@dataclass
class DiffResult:
    added: list[Record] = field(default_factory=list)
    removed: list[Record] = field(default_factory=list)
    changed: list[FieldChange] = field(default_factory=list)

    def is_empty(self) -> bool:
        return not (self.added or self.removed or self.changed)

    def counts(self) -> dict[str, int]:
        return {"added": len(self.added), "removed": len(self.removed),
                "changed": len(self.changed)}


def render_value(value: Any) -> str:
    if value is None:
        return "null"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (Decimal, int, float)):
        return jsonutil.format_decimal(_normalize_value(value))
    return str(value)


def _records(data: RecordSet | Sequence[Record]) -> list[Record]:
    return list(data.records if isinstance(data, RecordSet) else data)


def diff(old: RecordSet | Sequence[Record], new: RecordSet | Sequence[Record],
         key_fields: Sequence[str] = ()) -> DiffResult:
    """Keyed record diff with field-level changes.

    Without key fields, records only match when canonically equal, so the
    result has additions and removals only.
    """
    old_records, new_records = _records(old), _records(new)
    result = DiffResult()

    if not key_fields:
        remaining: dict[str, list[Record]] = defaultdict(list)
        for r in old_records:
            remaining[canonical_line(r)].append(r)
        for r in sorted(new_records, key=canonical_line):
            bucket = remaining.get(canonical_line(r))
            if bucket:
                bucket.pop()
            else:
                result.added.append(r)
        result.removed = sorted((r for rs in remaining.values() for r in rs), key=canonical_line)
        return result

    def group(records: list[Record], side: str) -> dict[tuple, list[Record]]:
        groups: dict[tuple, list[Record]] = defaultdict(list)
        for index, r in enumerate(records):
            try:
                key = tuple(canonical_line({"k": r[f]}) for f in key_fields)
            except KeyError as exc:
                raise MissingKeyField(exc.args[0], index, side) from None
            groups[key].append(r)
        for rs in groups.values():
            rs.sort(key=canonical_line)
        return groups

    old_groups, new_groups = group(old_records, "old"), group(new_records, "new")
    for key in sorted(set(old_groups) | set(new_groups)):
        olds, news = old_groups.get(key, []), new_groups.get(key, [])
        for o, n in zip(olds, news):
            record_key = ",".join(render_value(o[f]) for f in key_fields)
            for name in sorted((set(o) | set(n)) - set(key_fields)):
                before, after = o.get(name, _ABSENT), n.get(name, _ABSENT)
                if before is _ABSENT or after is _ABSENT or canonical_line({"v": before}) != canonical_line({"v": after}):
                    result.changed.append(FieldChange(
                        record_key, name,
                        None if before is _ABSENT else before,
                        None if after is _ABSENT else after,
                    ))
        result.removed.extend(olds[len(news):])
        result.added.extend(news[len(olds):])
    result.added.sort(key=canonical_line)
    result.removed.sort(key=canonical_line)
    return result
