"""Small shared helpers: deterministic formatting and hashing."""

from __future__ import annotations

import hashlib
import json
from decimal import ROUND_HALF_UP, Decimal


def format_half_up(value: float, places: int) -> str:
    """Format ``value`` with ``places`` decimals, rounding halves away from zero.

    Python's ``format`` rounds half-to-even, which would make printed tables
    depend on binary representation quirks; reports and spatial text need the
    conventional half-up rule instead.
    """
    quantum = Decimal(1).scaleb(-places)
    text = str(Decimal(repr(float(value))).quantize(quantum, rounding=ROUND_HALF_UP))
    if text.startswith("-") and float(text) == 0.0:
        text = text[1:]  # avoid printing "-0.00"
    return text


def canonical_json(obj) -> str:
    """Serialize to JSON with a stable key order and no whitespace."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def sha256_hex(data: bytes | str) -> str:
    if isinstance(data, str):
        data = data.encode("utf-8")
    return hashlib.sha256(data).hexdigest()
