"""Year-month helpers. Months are held internally as ``year * 12 + (month - 1)``."""

from __future__ import annotations

import re

import numpy as np

_MONTH_RE = re.compile(r"^(\d{4})-(\d{2})$")


def parse_month(text) -> int:
    if isinstance(text, (int, np.integer)):
        return int(text)
    m = _MONTH_RE.match(str(text).strip())
    if not m or not 1 <= int(m.group(2)) <= 12:
        raise ValueError(f"invalid year-month {text!r}, expected YYYY-MM")
    return int(m.group(1)) * 12 + int(m.group(2)) - 1


def format_month(index: int) -> str:
    y, m = divmod(int(index), 12)
    return f"{y:04d}-{m + 1:02d}"


def parse_months(values) -> np.ndarray:
    return np.array([parse_month(v) for v in values], dtype=np.int64)
