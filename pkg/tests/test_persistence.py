"""Commit log durability: replay equality, truncation tolerance, checkpoints."""

from __future__ import annotations

import json
import random

import pytest

from iotsync.datatree import DataTree, WriteOp
from iotsync.persistence import (
    LOG_NAME,
    SNAPSHOT_NAME,
    CommitRecord,
    CorruptRecordError,
    FileCommitLog,
    MemoryCommitLog,
    read_log,
    recover,
    replay,
)


def _random_op(rng: random.Random) -> WriteOp:
    segs = "/" + "/".join(rng.choice("abc") for _ in range(rng.randint(1, 3)))
    if rng.random() < 0.2:
        return WriteOp.del_(segs)
    return WriteOp.set(segs, rng.choice([True, rng.uniform(-10, 10), "v"]))


def _run_commits(log, tree: DataTree, n: int, seed: int) -> None:
    rng = random.Random(seed)
    for i in range(n):
        ops = [_random_op(rng)]
        rev, _ = tree.commit(ops, 1000 + i)
        log.append(CommitRecord(revision=rev, server_time_ms=1000 + i, ops=tuple(ops)))


def test_commit_record_round_trip():
    rec = CommitRecord(
        revision=7,
        server_time_ms=123,
        ops=(WriteOp.set("/a/b", 1.5), WriteOp.del_("/c")),
    )
    assert CommitRecord.from_json(rec.to_json()) == rec


def test_memory_log_replay_matches_live_tree():
    log, tree = MemoryCommitLog(), DataTree()
    _run_commits(log, tree, 200, seed=1)
    rebuilt = replay(log.records())
    assert rebuilt.serialize_snapshot() == tree.serialize_snapshot()
    assert rebuilt.revision == tree.revision


def test_file_log_recover_matches_live_tree(tmp_path):
    log, tree = FileCommitLog(tmp_path), DataTree()
    _run_commits(log, tree, 150, seed=2)
    log.close()
    rebuilt = recover(tmp_path)
    assert rebuilt.serialize_snapshot() == tree.serialize_snapshot()
    assert rebuilt.revision == tree.revision


def test_truncated_final_line_is_dropped(tmp_path):
    log, tree = FileCommitLog(tmp_path), DataTree()
    _run_commits(log, tree, 10, seed=3)
    log.close()
    path = tmp_path / LOG_NAME
    text = path.read_text()
    path.write_text(text + '{"revision": 11, "server_time')  # crash mid-append
    records = list(read_log(path))
    assert len(records) == 10
    assert recover(tmp_path).revision == 10


def test_corrupt_record_mid_log_raises(tmp_path):
    log, tree = FileCommitLog(tmp_path), DataTree()
    _run_commits(log, tree, 10, seed=4)
    log.close()
    path = tmp_path / LOG_NAME
    lines = path.read_text().strip().split("\n")
    lines[4] = "garbage"
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(CorruptRecordError):
        list(read_log(path))


def test_replay_detects_revision_gap():
    records = [
        CommitRecord(revision=1, server_time_ms=0, ops=(WriteOp.set("/a", 1),)),
        CommitRecord(revision=3, server_time_ms=1, ops=(WriteOp.set("/a", 2),)),
    ]
    with pytest.raises(CorruptRecordError):
        replay(records)


def test_checkpoint_writes_canonical_snapshot(tmp_path):
    log, tree = FileCommitLog(tmp_path), DataTree()
    _run_commits(log, tree, 20, seed=5)
    log.checkpoint(tree)
    snap = (tmp_path / SNAPSHOT_NAME).read_text()
    assert snap == tree.serialize_snapshot()
    assert DataTree.restore_snapshot(snap).serialize_snapshot() == snap


def test_recover_from_empty_directory(tmp_path):
    tree = recover(tmp_path)
    assert tree.revision == 0


@pytest.mark.parametrize("seed", range(5))
def test_crash_at_random_point_recovers_prefix(tmp_path, seed):
    """Cutting the log at any byte recovers a valid prefix of commits."""
    log, tree = FileCommitLog(tmp_path), DataTree()
    _run_commits(log, tree, 30, seed=100 + seed)
    log.close()
    path = tmp_path / LOG_NAME
    blob = path.read_bytes()

    rng = random.Random(seed)
    for _ in range(20):
        cut = rng.randint(0, len(blob))
        path.write_bytes(blob[:cut])
        recovered = recover(tmp_path)
        # The recovered tree must equal a replay of the surviving whole
        # records; a cut exactly at a line end keeps that final record.
        recs = []
        lines = [l for l in blob[:cut].decode("utf-8", "ignore").split("\n") if l]
        for i, line in enumerate(lines):
            try:
                recs.append(CommitRecord.from_json(json.loads(line)))
            except (json.JSONDecodeError, CorruptRecordError):
                assert i == len(lines) - 1, "only the tail may be truncated"
        expected = replay(recs)
        assert recovered.serialize_snapshot() == expected.serialize_snapshot()
        assert recovered.revision == len(recs)
