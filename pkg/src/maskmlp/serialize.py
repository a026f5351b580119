"""JSON helpers shared by reports and checkpoints.

Undefined metrics travel as NaN inside the library and as null in JSON;
serialization is canonical (sorted keys, newline-terminated) so identical
runs produce identical bytes.
"""

from __future__ import annotations

import json
import math

import numpy as np


def json_safe(obj):
    """Recursively convert numpy scalars/arrays and NaN for JSON output."""
    if isinstance(obj, dict):
        return {str(k): json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [json_safe(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [json_safe(v) for v in obj.tolist()]
    if isinstance(obj, (np.integer, int)) and not isinstance(obj, bool):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return None if not math.isfinite(v) else v
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def dumps_canonical(payload) -> str:
    return json.dumps(json_safe(payload), sort_keys=True, indent=2) + "\n"


def fmt_metric(value, digits: int = 4) -> str:
    """Markdown cell for a possibly-undefined metric."""
    if value is None:
        return "n/a"
    v = float(value)
    if not math.isfinite(v):
        return "n/a"
    return f"{v:.{digits}f}"
