"""
Canonical line-delimited record encoding

One JSON object per line, keys sorted, no insignificant whitespace, UTF-8.
Used for the event log, the catalog file, the arm table and simulator
metrics. Encoding the same record twice always yields the same bytes.
"""

import json
import logging
import os
from typing import Iterable, Iterator, Union

from errors import FormatError, IngestError

logger = logging.getLogger(__name__)

Source = Union[str, os.PathLike, Iterable]


def encode_record(record: dict) -> str:
    return json.dumps(record, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def decode_line(line: str) -> dict:
    try:
        record = json.loads(line)
    except json.JSONDecodeError as e:
        raise FormatError(f"malformed record: {e.msg}")
    if not isinstance(record, dict):
        raise FormatError("record must be an object")
    return record


def encode_records(records: Iterable[dict]) -> str:
    return "".join(encode_record(r) + "\n" for r in records)


def iter_source(source: Source) -> Iterator[tuple[int, Union[dict, FormatError]]]:
    """
    Yield (line_no, record) pairs from a path, an iterable of text lines or an
    iterable of already decoded dicts. Undecodable lines yield the FormatError
    in place of the record; blank lines are skipped but still counted.
    """
    if isinstance(source, (str, os.PathLike)):
        try:
            handle = open(source, "r", encoding="utf-8")
        except OSError as e:
            raise IngestError(f"cannot read {source}: {e}") from e
        with handle:
            yield from _iter_items(handle)
        return
    yield from _iter_items(source)


def _iter_items(items: Iterable) -> Iterator[tuple[int, Union[dict, FormatError]]]:
    for line_no, item in enumerate(items, start=1):
        if isinstance(item, dict):
            yield line_no, item
            continue
        if isinstance(item, bytes):
            item = item.decode("utf-8")
        if not item.strip():
            continue
        try:
            yield line_no, decode_line(item)
        except FormatError as e:
            yield line_no, e


def append_records(path: str, records: Iterable[dict]) -> int:
    payload = encode_records(records)
    if not payload:
        return 0
    dir_name = os.path.dirname(path) or "."
    os.makedirs(dir_name, exist_ok=True)
    with open(path, "a", encoding="utf-8") as f:
        f.write(payload)
    return payload.count("\n")
