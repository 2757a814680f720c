"""
A full run without the network
==============================

The runner fetches, evaluates, dispatches and records state. Swapping the
fetcher for one that serves canned JSON shows the whole loop offline; a
second run finds nothing new to send.
"""

import json
import tempfile
import urllib.parse
from datetime import datetime, timezone
from pathlib import Path

from datastringer.config import config_from_data
from datastringer.ingest import Fetcher, RawPayload
from datastringer.runner import Runner


class CannedFetcher(Fetcher):
    def fetch(self, source, url):
        month = urllib.parse.parse_qs(urllib.parse.urlsplit(url).query)["date"][0]
        bikes = 134 if month == "2014-07" else 100
        rows = [{"category": "bicycle-theft"}] * bikes + [{"category": "burglary"}] * 50
        return RawPayload(json.dumps(rows).encode(), 200, "application/json", url)


config = config_from_data({
    "defaults": {"sinks": ["alerts"]},
    "sinks": {"alerts": {"kind": "file", "path": "alerts.jsonl"}},
    "use_cases": [{
        "id": "crime",
        "stringer": "category_threshold",
        "parameters": {
            "url": "https://example.org/crimes?lat={lat}&lng={lng}&date={period}",
            "lat": "51.5286", "lng": "-0.1234", "numberOfMonths": "6", "threshold": "10",
            "place": "London",
        },
    }],
})

home = Path(tempfile.mkdtemp(prefix="datastringer-"))
runner = Runner(config, home, fetcher=CannedFetcher())
now = datetime(2014, 8, 15, 12, tzinfo=timezone.utc)

for attempt in (1, 2):
    report = runner.run(now=now)
    print(f"run {attempt}:", [(e.status, e.headline) for e in report.deliveries])

print((home / "alerts.jsonl").read_text())
print(json.loads((home / "state.json").read_text()))
