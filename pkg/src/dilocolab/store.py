"""Append-only JSON-lines store of run records."""

from __future__ import annotations

import json
import os
import threading

from dilocolab.engine import RECORD_SCHEMA, RunRecord


def record_line(record: RunRecord) -> str:
    return json.dumps(record.to_dict(), sort_keys=True, allow_nan=False)


def sort_key(key: tuple) -> tuple:
    # None sorts first; keeps Data-Parallel rows (h, outer_lr = None) stable
    return tuple((0, 0) if v is None else (1, v) for v in key)


class RunStore:
    """Records keyed by ``(algorithm, n, m, h, b, inner_lr, outer_lr, seed)``.

    Writes are appended; when a key is written twice (a forced rerun) the
    later line wins on load. ``path=None`` keeps everything in memory.
    """

    def __init__(self, path=None):
        self.path = path
        self._records: dict[tuple, RunRecord] = {}
        self._lock = threading.Lock()
        if path is not None and os.path.exists(path):
            with open(path) as fh:
                for lineno, line in enumerate(fh, 1):
                    if not line.strip():
                        continue
                    data = json.loads(line)
                    if data.get("schema") != RECORD_SCHEMA:
                        raise ValueError(f"{path}:{lineno}: unsupported record schema {data.get('schema')!r}")
                    rec = RunRecord.from_dict(data)
                    self._records[rec.key] = rec

    def __len__(self):
        return len(self._records)

    def __contains__(self, key):
        return key in self._records

    def get(self, key):
        return self._records.get(key)

    def add(self, record: RunRecord, force: bool = False) -> bool:
        """Store ``record``; returns False (and writes nothing) for a known key unless forced."""
        line = record_line(record)
        with self._lock:
            if record.key in self._records and not force:
                return False
            self._records[record.key] = record
            if self.path is not None:
                with open(self.path, "a") as fh:
                    fh.write(line + "\n")
        return True

    def records(self) -> list[RunRecord]:
        return [self._records[k] for k in sorted(self._records, key=sort_key)]

    def dump_lines(self) -> list[str]:
        return [record_line(r) for r in self.records()]
