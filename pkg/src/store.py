"""Result files: resumable JSONL stores, CSV tables and JSON manifests.

Every file starts with the resolved config: JSONL with a ``{"_header": ...}``
record, CSV with a ``# config: {...}`` comment line.
"""
from __future__ import annotations

import csv
import json
import os
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

from src.errors import FormatError
from src.logger import get_logger

logger = get_logger("store")

HEADER_KEY = "_header"
CSV_CONFIG_PREFIX = "# config: "


def dumps(record: Mapping[str, Any]) -> str:
    return json.dumps(record, sort_keys=True, ensure_ascii=False, allow_nan=False)


class JsonlStore:
    """Append-only JSON-lines file keyed by a tuple of record fields.

    Reopening an existing file loads its records, so callers can skip work
    that is already stored.
    """

    def __init__(self, path: str | os.PathLike[str], key_fields: Sequence[str], header: Mapping[str, Any]) -> None:
        self.path = Path(path)
        self.key_fields = tuple(key_fields)
        self.header = dict(header)
        self._records: dict[tuple[Any, ...], dict[str, Any]] = {}
        if self.path.exists():
            self._load()
        else:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text(dumps({HEADER_KEY: self.header}) + "\n", encoding="utf-8")

    def _load(self) -> None:
        with self.path.open("r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    record = json.loads(line)
                except json.JSONDecodeError as exc:
                    # a torn final line from an interrupted run is dropped
                    logger.warning("store_bad_line | path=%s line=%d error=%s", self.path, lineno, exc)
                    continue
                if HEADER_KEY in record:
                    if record[HEADER_KEY] != self.header:
                        logger.warning("store_header_mismatch | path=%s", self.path)
                    continue
                self._records[self.key(record)] = record
        with self.path.open("rb+") as fh:
            fh.seek(0, os.SEEK_END)
            if fh.tell():
                fh.seek(-1, os.SEEK_END)
                if fh.read(1) != b"\n":
                    fh.write(b"\n")
        logger.info("store_resumed | path=%s records=%d", self.path, len(self._records))

    def key(self, record: Mapping[str, Any]) -> tuple[Any, ...]:
        try:
            return tuple(record[name] for name in self.key_fields)
        except KeyError as exc:
            raise FormatError(f"{self.path}: record lacks key field {exc}") from exc

    def __contains__(self, key: tuple[Any, ...]) -> bool:
        return tuple(key) in self._records

    def __len__(self) -> int:
        return len(self._records)

    def get(self, key: tuple[Any, ...]) -> dict[str, Any] | None:
        return self._records.get(tuple(key))

    def append(self, record: Mapping[str, Any]) -> None:
        line = dumps(record)
        with self.path.open("a", encoding="utf-8") as fh:
            fh.write(line + "\n")
            fh.flush()
        self._records[self.key(record)] = dict(record)

    def records(self) -> list[dict[str, Any]]:
        return [self._records[k] for k in sorted(self._records, key=_sort_key)]

    def compact(self) -> None:
        """Rewrite the file as header plus records sorted by key."""
        tmp = self.path.with_suffix(self.path.suffix + ".tmp")
        with tmp.open("w", encoding="utf-8") as fh:
            fh.write(dumps({HEADER_KEY: self.header}) + "\n")
            for record in self.records():
                fh.write(dumps(record) + "\n")
        tmp.replace(self.path)


def _sort_key(key: tuple[Any, ...]) -> tuple[str, ...]:
    return tuple(f"{v:020d}" if isinstance(v, int) else str(v) for v in key)


def read_jsonl(path: str | os.PathLike[str]) -> tuple[dict[str, Any] | None, list[dict[str, Any]]]:
    header = None
    records = []
    with Path(path).open("r", encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            record = json.loads(line)
            if HEADER_KEY in record:
                header = record[HEADER_KEY]
            else:
                records.append(record)
    return header, records


def write_jsonl(path: str | os.PathLike[str], header: Mapping[str, Any], records: Iterable[Mapping[str, Any]]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        fh.write(dumps({HEADER_KEY: dict(header)}) + "\n")
        for record in records:
            fh.write(dumps(record) + "\n")
    return path


def _cell(value: Any) -> Any:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return value


def write_csv(
    path: str | os.PathLike[str],
    columns: Sequence[str],
    rows: Iterable[Mapping[str, Any]],
    config: Mapping[str, Any],
) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as f:
        f.write(CSV_CONFIG_PREFIX + dumps(config) + "\n")
        writer = csv.DictWriter(f, fieldnames=list(columns))
        writer.writeheader()
        for row in rows:
            writer.writerow({name: _cell(row.get(name)) for name in columns})
    return path


def read_csv(path: str | os.PathLike[str]) -> tuple[dict[str, Any] | None, list[dict[str, str]]]:
    config = None
    with Path(path).open("r", newline="", encoding="utf-8") as f:
        first = f.readline()
        if first.startswith(CSV_CONFIG_PREFIX):
            config = json.loads(first[len(CSV_CONFIG_PREFIX) :])
        else:
            f.seek(0)
        rows = list(csv.DictReader(f))
    return config, rows


def write_json(path: str | os.PathLike[str], payload: Mapping[str, Any]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as f:
        json.dump(payload, f, ensure_ascii=False, indent=2, sort_keys=True, allow_nan=False)
        f.write("\n")
    return path


def read_json(path: str | os.PathLike[str]) -> dict[str, Any]:
    with Path(path).open("r", encoding="utf-8") as f:
        return json.load(f)
