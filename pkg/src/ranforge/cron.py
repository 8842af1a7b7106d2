"""Cron cadence parsing: standard 5-field expressions plus ``@`` shorthands."""

from __future__ import annotations

from datetime import datetime, timedelta

from croniter import croniter

from .clock import parse_ts
from .errors import InvalidCron

SHORTHANDS = {
    "@yearly": "0 0 1 1 *",
    "@annually": "0 0 1 1 *",
    "@monthly": "0 0 1 * *",
    "@weekly": "0 0 * * 0",
    "@daily": "0 0 * * *",
    "@midnight": "0 0 * * *",
    "@hourly": "0 * * * *",
}


def normalize(cadence: str) -> str:
    """Return the 5-field form of ``cadence`` or raise :class:`InvalidCron`."""
    if not isinstance(cadence, str) or not cadence.strip():
        raise InvalidCron(f"empty cron expression: {cadence!r}")
    expr = cadence.strip()
    if expr.startswith("@"):
        try:
            return SHORTHANDS[expr.lower()]
        except KeyError:
            raise InvalidCron(f"unknown cron shorthand {expr!r}") from None
    # croniter also accepts 6/7-field (seconds, years) forms; we do not
    if len(expr.split()) != 5 or not croniter.is_valid(expr):
        raise InvalidCron(f"invalid cron expression {expr!r}")
    return expr


def is_valid(cadence: str) -> bool:
    try:
        normalize(cadence)
    except InvalidCron:
        return False
    return True


def next_fire_times(cadence: str, start: datetime | str, n: int) -> list[datetime]:
    """The first ``n`` fire times strictly after ``start`` (UTC)."""
    expr = normalize(cadence)
    if n < 0:
        raise ValueError("n must be >= 0")
    it = croniter(expr, parse_ts(start))
    return [it.get_next(datetime) for _ in range(n)]


def fires_between(cadence: str, start: datetime | str, end: datetime | str) -> list[datetime]:
    """Fire times in the half-open window ``[start, end)``."""
    expr = normalize(cadence)
    lo, hi = parse_ts(start), parse_ts(end)
    # croniter is exclusive of its start and cron has minute resolution
    it = croniter(expr, lo - timedelta(seconds=1))
    out = []
    while True:
        ts = it.get_next(datetime)
        if ts >= hi:
            return out
        if ts >= lo:
            out.append(ts)
