"""Append-only commit log with snapshot checkpoints and crash recovery.

`log.jsonl` holds one commit record per line; `snapshot.json` holds the
canonical tree document at the last checkpoint. Recovery replays the log
from an empty tree, tolerating (and dropping) a truncated final line.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path as FsPath
from typing import Iterable, Optional

from .datatree import ABSENT, DataTree, TreeError, WriteOp

LOG_NAME = "log.jsonl"
SNAPSHOT_NAME = "snapshot.json"


class CorruptRecordError(TreeError):
    pass


@dataclass(frozen=True)
class CommitRecord:
    revision: int
    server_time_ms: int
    ops: tuple[WriteOp, ...]

    def to_json(self) -> dict:
        ops = []
        for op in self.ops:
            if op.delete:
                ops.append({"path": op.path.render(), "delete": True})
            else:
                ops.append({"path": op.path.render(), "value": op.value})
        return {"revision": self.revision, "server_time_ms": self.server_time_ms, "ops": ops}

    @classmethod
    def from_json(cls, raw: dict) -> "CommitRecord":
        try:
            ops = []
            for o in raw["ops"]:
                if o.get("delete"):
                    ops.append(WriteOp.del_(o["path"]))
                else:
                    ops.append(WriteOp.set(o["path"], o["value"]))
            return cls(
                revision=int(raw["revision"]),
                server_time_ms=int(raw["server_time_ms"]),
                ops=tuple(ops),
            )
        except (KeyError, TypeError, ValueError, TreeError) as exc:
            raise CorruptRecordError(f"bad commit record: {exc}") from exc


class MemoryCommitLog:
    """In-memory log for simulations and tests."""

    def __init__(self):
        self._records: list[CommitRecord] = []

    def append(self, record: CommitRecord) -> None:
        self._records.append(record)

    def records(self) -> list[CommitRecord]:
        return list(self._records)

    def checkpoint(self, tree: DataTree) -> None:
        pass


class FileCommitLog:
    """Durable log under a data directory."""

    def __init__(self, data_dir: str | FsPath):
        self.data_dir = FsPath(data_dir)
        self.data_dir.mkdir(parents=True, exist_ok=True)
        self.log_path = self.data_dir / LOG_NAME
        self._fh = open(self.log_path, "a", encoding="utf-8")

    def append(self, record: CommitRecord) -> None:
        self._fh.write(json.dumps(record.to_json(), sort_keys=True, separators=(",", ":")))
        self._fh.write("\n")
        self._fh.flush()
        os.fsync(self._fh.fileno())

    def records(self) -> list[CommitRecord]:
        self._fh.flush()
        return list(read_log(self.log_path))

    def checkpoint(self, tree: DataTree) -> None:
        snap = self.data_dir / SNAPSHOT_NAME
        tmp = snap.with_suffix(".json.tmp")
        tmp.write_text(tree.serialize_snapshot(), encoding="utf-8")
        tmp.replace(snap)

    def close(self) -> None:
        self._fh.close()


def read_log(path: str | FsPath) -> Iterable[CommitRecord]:
    """Yield whole records; a truncated/corrupt final line is dropped, a
    corrupt record followed by more data raises CorruptRecordError."""
    path = FsPath(path)
    if not path.exists():
        return
    lines = [l for l in path.read_text(encoding="utf-8").split("\n") if l != ""]
    for i, line in enumerate(lines):
        try:
            raw = json.loads(line)
            yield CommitRecord.from_json(raw)
        except (json.JSONDecodeError, CorruptRecordError):
            if i == len(lines) - 1:
                return  # truncated tail from a crash mid-append
            raise CorruptRecordError(f"corrupt record at line {i + 1}")


def replay(records: Iterable[CommitRecord], base: Optional[DataTree] = None) -> DataTree:
    """Rebuild a tree by re-committing records in order.

    Revisions must come out gapless and matching the recorded ones.
    """
    tree = base if base is not None else DataTree()
    for rec in records:
        rev, _ = tree.commit(list(rec.ops), rec.server_time_ms)
        if rev != rec.revision:
            raise CorruptRecordError(
                f"revision mismatch during replay: log says {rec.revision}, tree at {rev}"
            )
    return tree


def recover(data_dir: str | FsPath) -> DataTree:
    """Rebuild server tree state from the data directory's log."""
    return replay(read_log(FsPath(data_dir) / LOG_NAME))
