"""Field checks shared by the record decoders."""

from typing import Any, Optional

from errors import ValidationError


def require_id(record: dict, key: str) -> str:
    """Opaque ids are non-empty strings; integers are accepted and stringified."""
    value = record.get(key)
    if isinstance(value, bool) or value is None:
        raise ValidationError(f"{key} is required")
    if isinstance(value, int):
        return str(value)
    if not isinstance(value, str) or not value.strip():
        raise ValidationError(f"{key} must be a non-empty id")
    return value


def optional_id(record: dict, key: str) -> Optional[str]:
    if record.get(key) is None:
        return None
    return require_id(record, key)


def require_id_list(record: dict, key: str, allow_empty: bool = True) -> tuple[str, ...]:
    value = record.get(key)
    if value is None:
        value = []
    if not isinstance(value, (list, tuple)):
        raise ValidationError(f"{key} must be a list of ids")
    ids = tuple(require_id({key: v}, key) for v in value)
    if not ids and not allow_empty:
        raise ValidationError(f"{key} must be nonempty")
    return ids


def require_timestamp(record: dict, key: str = "ts", positive: bool = False) -> int:
    value = record.get(key)
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ValidationError(f"{key} must be an integer epoch timestamp")
    if isinstance(value, float):
        if not value.is_integer():
            raise ValidationError(f"{key} must be whole seconds")
        value = int(value)
    if value < 0 or (positive and value == 0):
        raise ValidationError(f"{key} must be {'> 0' if positive else '≥0'}")
    return value


def optional_position(value: Any) -> Optional[int]:
    if value is None:
        return None
    if isinstance(value, bool) or not isinstance(value, int):
        raise ValidationError("position must be an integer")
    if value < 1:
        raise ValidationError("position must be ≥1")
    return value
