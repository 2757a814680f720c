"""Local fixture servers and independent oracles shared by the test suite."""

from __future__ import annotations

import calendar
import io
import json
import socketserver
import threading
import time
import urllib.parse
from datetime import datetime, timedelta
from email import message_from_bytes, policy
from fractions import Fraction
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

from datastringer import cli
from datastringer.scheduler import ManualClock


# -- HTTP --------------------------------------------------------------------

class Response:
    def __init__(self, body=b"", status=200, content_type="application/json", delay=0.0, headers=None):
        self.body = body.encode() if isinstance(body, str) else body
        self.status = status
        self.content_type = content_type
        self.delay = delay
        self.headers = headers or {}


class FixtureHTTPServer:
    """Serves ``routes[path]`` (a Response, or a callable taking the parsed
    query dict) on 127.0.0.1; records every requested path+query."""

    def __init__(self):
        self.routes = {}
        self.requests: list[str] = []
        self.request_headers: list[dict] = []
        self.posts: list[tuple[str, dict, bytes]] = []
        outer = self

        class Handler(BaseHTTPRequestHandler):
            def do_GET(self):
                outer.requests.append(self.path)
                outer.request_headers.append(dict(self.headers))
                parsed = urllib.parse.urlsplit(self.path)
                route = outer.routes.get(parsed.path)
                if callable(route):
                    route = route({k: v[0] for k, v in urllib.parse.parse_qs(parsed.query).items()})
                if route is None:
                    route = Response(b"not found", status=404, content_type="text/plain")
                if route.delay:
                    time.sleep(route.delay)
                try:
                    self.send_response(route.status)
                    self.send_header("Content-Type", route.content_type)
                    self.send_header("Content-Length", str(len(route.body)))
                    for k, v in route.headers.items():
                        self.send_header(k, v)
                    self.end_headers()
                    self.wfile.write(route.body)
                except (BrokenPipeError, ConnectionResetError):
                    pass

            def do_POST(self):
                body = self.rfile.read(int(self.headers.get("Content-Length") or 0))
                outer.posts.append((self.path, dict(self.headers), body))
                self.do_GET()

            def log_message(self, *args):
                pass

        self.httpd = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self.httpd.daemon_threads = True
        self.thread = threading.Thread(target=self.httpd.serve_forever, args=(0.05,), daemon=True)

    @property
    def base(self) -> str:
        return f"http://127.0.0.1:{self.httpd.server_address[1]}"

    def __enter__(self):
        self.thread.start()
        return self

    def __exit__(self, *exc):
        self.httpd.shutdown()
        self.httpd.server_close()


# -- crime fixture -------------------------------------------------------------

CRIME_MONTHS = [f"2014-{m:02d}" for m in range(1, 8)]
CRIME_NOW = datetime.fromisoformat("2014-08-15T09:00:00+00:00")  # latest complete month 2014-07


def crime_counts(month: str, latest: str = "2014-07") -> dict[str, int]:
    return {
        "bicycle-theft": 134 if month == latest else 100,
        "burglary": 50,
        "anti-social-behaviour": 80,
    }


def crime_records(counts: dict[str, int], month: str) -> list[dict]:
    out = []
    n = 0
    for category, count in counts.items():
        for i in range(count):
            n += 1
            out.append({
                "category": category,
                "month": month,
                "id": n,
                "location": {"latitude": "51.528", "longitude": "-0.123",
                             "street": {"id": 1000 + i % 7, "name": f"On or near Street {i % 7}"}},
                "outcome_status": None,
            })
    return out


def crime_route(counts_for=crime_counts, months=CRIME_MONTHS):
    def route(query):
        month = query.get("date")
        if month not in months:
            return Response(b"[]")
        return Response(json.dumps(crime_records(counts_for(month), month)))
    return route


HEADLINE = "Bicycle theft on the rise by 34% in London"


def crime_config(base_url: str, sinks=("alerts",), smtp_port: int | None = None) -> dict:
    data = {
        "version": 1,
        "defaults": {"sinks": list(sinks)},
        "sinks": {"alerts": {"kind": "file", "path": "alerts.jsonl"}},
        "use_cases": [{
            "id": "crime",
            "stringer": "category_threshold",
            "parameters": {
                "lat": "51.52863195218981",
                "lng": "-0.12342453002929688",
                "numberOfMonths": "6",
                "threshold": "10",
                "url": base_url + "/crimes-street/all-crime?lat={lat}&lng={lng}&date={period}",
                "place": "London",
            },
        }],
    }
    if smtp_port is not None:
        data["sinks"]["mail"] = {"kind": "smtp", "host": "127.0.0.1", "port": smtp_port,
                                 "from": "stringer@example.org", "to": ["desk@example.org"]}
    return data


def write_config(path: Path, data: dict) -> Path:
    path.write_text(json.dumps(data, indent=2))
    return path


def run_once(config: Path, home: Path, now: datetime = CRIME_NOW, extra=()) -> tuple[int, list[dict]]:
    out, err = io.StringIO(), io.StringIO()
    code = cli.main(["run", "--once", "--config", str(config), "--home", str(home), *extra],
                    clock=ManualClock(now), stdout=out, stderr=err)
    return code, [json.loads(line) for line in out.getvalue().splitlines()]


def file_alerts(home: Path) -> list[dict]:
    path = home / "alerts.jsonl"
    if not path.exists():
        return []
    return [json.loads(line) for line in path.read_text().splitlines()]


# -- SMTP ----------------------------------------------------------------------

class SmtpCapture:
    """Minimal in-process SMTP server recording each transaction."""

    def __init__(self, reject_rcpt: bool = False):
        self.messages: list[dict] = []
        self.commands: list[str] = []
        outer = self

        class Handler(socketserver.StreamRequestHandler):
            def reply(self, line):
                self.wfile.write((line + "\r\n").encode())

            def handle(self):
                self.reply("220 capture ESMTP")
                mail_from, rcpts = None, []
                while True:
                    raw = self.rfile.readline()
                    if not raw:
                        return
                    line = raw.decode("utf-8", "replace").rstrip("\r\n")
                    verb = line.split(" ", 1)[0].upper()
                    outer.commands.append(verb)
                    if verb == "EHLO":
                        self.reply("250-capture")
                        self.reply("250 8BITMIME")
                    elif verb == "HELO":
                        self.reply("250 capture")
                    elif verb == "MAIL":
                        mail_from, rcpts = line[10:].strip(), []
                        self.reply("250 OK")
                    elif verb == "RCPT":
                        if outer.reject_rcpt:
                            self.reply("550 5.1.1 mailbox unavailable")
                        else:
                            rcpts.append(line[8:].strip())
                            self.reply("250 OK")
                    elif verb == "DATA":
                        self.reply("354 end with .")
                        lines = []
                        while True:
                            data = self.rfile.readline()
                            if data in (b".\r\n", b".\n", b""):
                                break
                            if data.startswith(b".."):
                                data = data[1:]
                            lines.append(data)
                        raw_msg = b"".join(lines)
                        outer.messages.append({
                            "from": mail_from,
                            "to": rcpts,
                            "raw": raw_msg,
                            "message": message_from_bytes(raw_msg, policy=policy.default),
                        })
                        self.reply("250 queued")
                    elif verb in ("RSET", "NOOP"):
                        self.reply("250 OK")
                    elif verb == "QUIT":
                        self.reply("221 bye")
                        return
                    else:
                        self.reply("502 not implemented")

        self.reject_rcpt = reject_rcpt
        self.server = socketserver.ThreadingTCPServer(("127.0.0.1", 0), Handler)
        self.server.daemon_threads = True
        self.thread = threading.Thread(target=self.server.serve_forever, args=(0.05,), daemon=True)

    @property
    def port(self) -> int:
        return self.server.server_address[1]

    def __enter__(self):
        self.thread.start()
        return self

    def __exit__(self, *exc):
        self.server.shutdown()
        self.server.server_close()


# -- oracles -------------------------------------------------------------------

DOW_NAMES = {n: str(i) for i, n in enumerate("SUN MON TUE WED THU FRI SAT".split())}
MONTH_NAMES = {n: str(i) for i, n in enumerate("JAN FEB MAR APR MAY JUN JUL AUG SEP OCT NOV DEC".split(), 1)}


def oracle_field(text: str, lo: int, hi: int, names=None) -> set[int]:
    """Independent crontab field expansion."""
    names = names or {}
    values: set[int] = set()
    for part in text.split(","):
        stepped = "/" in part
        step = 1
        if stepped:
            part, s = part.split("/")
            step = int(s)
        if part == "*":
            a, b = lo, hi
        elif "-" in part:
            a, b = (int(names.get(x.upper(), x)) for x in part.split("-"))
        else:
            a = int(names.get(part.upper(), part))
            b = hi if stepped else a
        values.update(v for v in range(a, b + 1) if (v - a) % step == 0)
    return values


class OracleCron:
    """Crontab matching written from the Vixie rules, sharing no code with the library."""

    def __init__(self, expr: str):
        minute, hour, dom, month, dow = expr.split()
        self.minutes = oracle_field(minute, 0, 59)
        self.hours = oracle_field(hour, 0, 23)
        self.doms = oracle_field(dom, 1, 31)
        self.months = oracle_field(month, 1, 12, MONTH_NAMES)
        self.dows = {v % 7 for v in oracle_field(dow, 0, 7, DOW_NAMES)}
        self.either = not (dom.startswith("*") or dow.startswith("*"))

    def day_ok(self, t: datetime) -> bool:
        if t.month not in self.months:
            return False
        dom_ok, dow_ok = t.day in self.doms, t.isoweekday() % 7 in self.dows
        return (dom_ok or dow_ok) if self.either else (dom_ok and dow_ok)

    def matches(self, t: datetime) -> bool:
        return self.day_ok(t) and t.hour in self.hours and t.minute in self.minutes

    def next_after(self, t: datetime, days: int = 5 * 366) -> datetime | None:
        """Scan day by day, then minute by minute within a matching day."""
        cur = t.replace(second=0, microsecond=0) + timedelta(minutes=1)
        end = t + timedelta(days=days)
        while cur <= end:
            if self.day_ok(cur):
                while True:
                    if self.matches(cur):
                        return cur
                    nxt = cur + timedelta(minutes=1)
                    if nxt.date() != cur.date():
                        break
                    cur = nxt
            cur = cur.replace(hour=0, minute=0) + timedelta(days=1)
        return None


def brute_force_fired(counts: dict[str, list[int]], y: int, x: Fraction, direction: str = "both") -> dict[str, str]:
    """Category -> 'rise'/'fall', recomputed with exact fractions."""
    fired = {}
    for category, vector in counts.items():
        window = vector[-y - 1:-1]
        latest = Fraction(vector[-1])
        mean = Fraction(sum(window), len(window))
        if mean == 0:
            if latest > 0 and direction != "fall_only":
                fired[category] = "rise"
            continue
        pct = (latest - mean) / mean * 100
        if pct >= x and direction in ("both", "rise_only"):
            fired[category] = "rise"
        elif pct <= -x and direction in ("both", "fall_only"):
            fired[category] = "fall"
    return fired


def days_in_year(year: int) -> int:
    return 366 if calendar.isleap(year) else 365
