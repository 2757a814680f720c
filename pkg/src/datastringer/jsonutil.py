"""JSON helpers that keep Decimal values exact in both directions."""

from __future__ import annotations

import json
from datetime import datetime
from decimal import Context, Decimal
from typing import Any


def format_decimal(d: Decimal) -> str:
    """Plain notation without trailing zeros: 1.50 -> "1.5", 1E+2 -> "100"."""
    if not d.is_finite():
        raise ValueError(f"non-finite decimal {d}")
    if d.is_zero():
        return "0"
    # normalize() rounds to the context precision, so give it enough digits
    return format(d.normalize(Context(prec=len(d.as_tuple().digits))), "f")


def dumps(obj: Any, sort_keys: bool = False) -> str:
    """Compact JSON where Decimals are written as exact numbers."""
    if isinstance(obj, Decimal):
        return format_decimal(obj) if obj.is_finite() else json.dumps(str(obj))
    if isinstance(obj, bool) or obj is None or isinstance(obj, str):
        return json.dumps(obj, ensure_ascii=False)
    if isinstance(obj, (int, float)):
        return json.dumps(obj)
    if isinstance(obj, datetime):
        return json.dumps(obj.isoformat())
    if isinstance(obj, dict):
        items = sorted(obj.items()) if sort_keys else obj.items()
        return "{" + ",".join(
            json.dumps(str(k), ensure_ascii=False) + ":" + dumps(v, sort_keys) for k, v in items
        ) + "}"
    if isinstance(obj, (list, tuple)):
        return "[" + ",".join(dumps(v, sort_keys) for v in obj) + "]"
    return json.dumps(str(obj), ensure_ascii=False)


def _reject_constant(name):
    raise ValueError(f"non-standard JSON constant {name}")


def loads(text: str | bytes) -> Any:
    """Parse JSON with every number as a Decimal."""
    return json.loads(text, parse_float=Decimal, parse_int=Decimal,
                      parse_constant=_reject_constant)
