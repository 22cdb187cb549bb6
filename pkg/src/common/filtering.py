from __future__ import annotations

from typing import Any, Dict, Optional, Tuple, Union


FilterCondition = Union[
    Any,  # default eq
    Dict[str, Any],  # {"op": "...", "value": ...}
    Tuple[str, Any],  # ("gte", 5)
]


def _to_casefold(value: Any) -> Any:
    return value.casefold() if isinstance(value, str) else value


def _try_int(value: Any) -> Optional[int]:
    if isinstance(value, bool):
        return None
    if isinstance(value, int):
        return value
    if isinstance(value, str):
        s = value.strip()
        try:
            return int(s, 0)
        except ValueError:
            return None
    return None


def matches_filter(record: Dict[str, Any], field: str, condition: FilterCondition) -> bool:
    """
    Check if `record[field]` matches `condition`.

    Supported operators: eq (default), neq, in, contains, gt, gte, lt, lte.
    Strings compare case-insensitively; numeric strings such as "0x101" compare
    as integers so trace fields can be matched against scenario values.
    """
    op = "eq"
    expected: Any = condition

    if isinstance(condition, tuple) and len(condition) == 2:
        op, expected = condition
    elif isinstance(condition, dict):
        op = condition.get("op") or condition.get("operator") or "eq"
        expected = condition.get("value")

    op = str(op).lower().strip()
    actual = record.get(field)

    a_num = _try_int(actual)
    e_num = _try_int(expected)
    numeric = a_num is not None and e_num is not None

    if op in ("eq", "neq"):
        if numeric:
            same = a_num == e_num
        else:
            same = _to_casefold(actual) == _to_casefold(expected)
        return same if op == "eq" else not same

    if op == "in":
        if expected is None:
            return False
        candidates = expected if isinstance(expected, (list, tuple, set)) else [expected]
        return any(matches_filter(record, field, c) for c in candidates)

    if op == "contains":
        if actual is None or expected is None:
            return False
        return str(expected).casefold() in str(actual).casefold()

    if not numeric:
        return False
    if op == "gt":
        return a_num > e_num
    if op == "gte":
        return a_num >= e_num
    if op == "lt":
        return a_num < e_num
    if op == "lte":
        return a_num <= e_num
    return False
