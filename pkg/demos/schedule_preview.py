"""
Previewing when a stringer will run
===================================
"""

from datetime import datetime
from zoneinfo import ZoneInfo

from datastringer.scheduler import crontab_line, next_after

london = ZoneInfo("Europe/London")
t = datetime(2014, 3, 28, 13, 0, tzinfo=london)

# daily at noon, local time; the clocks go forward on the 30th
for _ in range(4):
    t = next_after("0 12 * * *", t, london)
    print(t.isoformat())

# weekday mornings, or the first of the month whatever the day
t = datetime(2014, 3, 28, 13, 0)
for _ in range(5):
    t = next_after("30 7 1 * mon-fri", t)
    print(t.strftime("%a %d %b %H:%M"))

print(crontab_line("/home/desk/.datastringer/use_cases.json", binary="datastringer"))
