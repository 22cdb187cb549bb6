from typing import Any


def strip_empty_values(data: Any, preserve_empty_lists: bool = True) -> Any:
    """
    Recursively remove empty values from a stats record.

    Removes: None, empty strings, empty dicts
    Preserves: False, 0, and optionally empty lists (an empty migrations list
    still tells the reader that no migration ran).
    """
    if isinstance(data, dict):
        cleaned = {}
        for k, v in data.items():
            if v is None or v == "" or v == {}:
                continue
            if not preserve_empty_lists and v == []:
                continue
            cleaned_value = strip_empty_values(v, preserve_empty_lists)
            if cleaned_value is None or cleaned_value == "" or cleaned_value == {}:
                continue
            if not preserve_empty_lists and cleaned_value == []:
                continue
            cleaned[k] = cleaned_value
        return cleaned
    elif isinstance(data, list):
        return [strip_empty_values(item, preserve_empty_lists) for item in data]
    return data


def gid_hex(gid: bytes) -> str:
    """Render a 16-byte GID the way the trace and stats files show it."""
    return gid.hex()


def parse_bool(value: Any) -> bool:
    if isinstance(value, bool):
        return value
    text = str(value).strip().lower()
    if text in ("true", "1", "yes", "on"):
        return True
    if text in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {value!r}")
