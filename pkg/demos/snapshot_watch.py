"""
Watching a dataset for changes
==============================

Keep the last copy of a dataset on disk and report what changed since then.
Records are matched by a key field so that an edited row shows up as a field
change instead of one removal plus one addition.
"""

import tempfile
from datetime import datetime, timezone

from datastringer.ingest import RecordSet
from datastringer.snapshots import SnapshotStore, diff

store = SnapshotStore(tempfile.mkdtemp(prefix="snapshots-"))

monday = RecordSet([
    {"id": "E05000130", "name": "King's Cross", "officers": "4"},
    {"id": "E05000131", "name": "Holloway", "officers": "3"},
])
store.save("local-police", "latest", monday, datetime(2014, 7, 7, 12, tzinfo=timezone.utc))

tuesday = RecordSet([
    {"id": "E05000130", "name": "King's Cross", "officers": "2"},
    {"id": "E05000132", "name": "Highbury", "officers": "5"},
])

previous = store.load_previous("local-police", "latest")
print("stored hash:", previous.content_hash[:16], "verified:", previous.verify())

changes = diff(previous.records(), tuesday, key_fields=["id"])
print("counts:", changes.counts())
for c in changes.changed:
    print(f"  {c.record_key}.{c.field}: {c.old} -> {c.new}")
for r in changes.added:
    print("  added:", r["name"])
for r in changes.removed:
    print("  removed:", r["name"])

# saving the new state archives the old one
store.save("local-police", "latest", tuesday, datetime(2014, 7, 8, 12, tzinfo=timezone.utc))
print("history entries:", len(store.history("local-police", "latest")))
