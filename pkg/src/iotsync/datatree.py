"""Hierarchical path-addressed value store with atomic batched writes.

Values are booleans, finite 64-bit floats, text, or branches (string-keyed
maps). Every committed batch gets one strictly increasing revision and
produces change events at the minimal changed roots, which is what the
subscription fan-out and the device-side replay protection key off.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Any, Iterable, Union


class TreeError(Exception):
    """Base class for datatree errors."""


class EmptySegmentError(TreeError):
    pass


class ForbiddenCharacterError(TreeError):
    pass


class OverlappingPathsError(TreeError):
    pass


class NonFiniteNumberError(TreeError):
    pass


class MalformedDocumentError(TreeError):
    pass


# Key characters rejected by the emulated platform.
FORBIDDEN_KEY_CHARS = frozenset("/.#$[]")


class _Absent:
    """Singleton marker for "no value at this path"."""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "ABSENT"

    def __bool__(self):
        return False


ABSENT = _Absent()

# A branch is a plain dict; scalars are bool / float / str.
Value = Union[bool, float, str, dict]


def _check_segment(seg: str) -> None:
    if not isinstance(seg, str) or seg == "":
        raise EmptySegmentError("path segments must be non-empty text")
    bad = set(seg) & FORBIDDEN_KEY_CHARS
    if bad:
        raise ForbiddenCharacterError(
            f"segment {seg!r} contains forbidden character(s) {sorted(bad)}"
        )


@dataclass(frozen=True, order=True)
class Path:
    """Canonical tree address: a tuple of validated segments."""

    segments: tuple[str, ...] = ()

    def __post_init__(self):
        for seg in self.segments:
            _check_segment(seg)

    @classmethod
    def parse(cls, text: str) -> "Path":
        if not isinstance(text, str) or not text.startswith("/"):
            raise EmptySegmentError(f"path must start with '/': {text!r}")
        return _parse_cached(text)

    def render(self) -> str:
        return "/" + "/".join(self.segments)

    def child(self, seg: str) -> "Path":
        return Path(self.segments + (seg,))

    @property
    def depth(self) -> int:
        return len(self.segments)

    def is_ancestor_or_equal(self, other: "Path") -> bool:
        return self.segments == other.segments[: len(self.segments)]

    def __str__(self):
        return self.render()


ROOT = Path(())


@lru_cache(maxsize=4096)
def _parse_cached(text: str) -> Path:
    if text == "/":
        return ROOT
    return Path(tuple(text[1:].split("/")))


def parse_path(text: str) -> Path:
    return Path.parse(text)


def validate_value(value: Any) -> Value:
    """Normalize and validate a candidate value at the boundary.

    Integers become floats; NaN/inf, null, lists, empty branch keys and
    forbidden key characters are rejected.
    """
    if isinstance(value, bool):
        return value
    if isinstance(value, (int, float)):
        v = float(value)
        if not math.isfinite(v):
            raise NonFiniteNumberError(f"non-finite number: {value!r}")
        return v
    if isinstance(value, str):
        return value
    if isinstance(value, dict):
        out = {}
        for k, v in value.items():
            _check_segment(k)
            out[k] = validate_value(v)
        return out
    raise MalformedDocumentError(f"unsupported value type: {type(value).__name__}")


@dataclass(frozen=True)
class WriteOp:
    """One write in a batch: set a value at a path, or delete the subtree."""

    path: Path
    value: Any = None
    delete: bool = False

    @classmethod
    def set(cls, path: Path | str, value: Any) -> "WriteOp":
        if isinstance(path, str):
            path = Path.parse(path)
        return cls(path=path, value=validate_value(value))

    @classmethod
    def del_(cls, path: Path | str) -> "WriteOp":
        if isinstance(path, str):
            path = Path.parse(path)
        return cls(path=path, delete=True)


@dataclass(frozen=True)
class ChangeEvent:
    revision: int
    path: Path
    new_value: Any  # Value or ABSENT
    server_time_ms: int


def _prune_empty(value: Any) -> Any:
    """Drop branch children that are (recursively) empty."""
    if not isinstance(value, dict):
        return value
    out = {k: _prune_empty(v) for k, v in value.items()}
    return {k: v for k, v in out.items() if not (isinstance(v, dict) and not v)}


def _check_disjoint(ops: Iterable[WriteOp]) -> None:
    paths = sorted(op.path.segments for op in ops)
    for a, b in zip(paths, paths[1:]):
        if a == b[: len(a)]:
            raise OverlappingPathsError(
                f"batch paths overlap: {'/' + '/'.join(a)} and {'/' + '/'.join(b)}"
            )


class DataTree:
    """Single-writer tree store. Reads never mutate; commits are atomic."""

    def __init__(self):
        self._root: Any = ABSENT
        self._revision = 0

    @property
    def revision(self) -> int:
        return self._revision

    def get(self, path: Path | str) -> Any:
        if isinstance(path, str):
            path = Path.parse(path)
        node = self._root
        for seg in path.segments:
            if not isinstance(node, dict) or seg not in node:
                return ABSENT
            node = node[seg]
        return node

    def commit(
        self, ops: list[WriteOp], server_time_ms: int
    ) -> tuple[int, list[ChangeEvent]]:
        """Apply a batch atomically and return (revision, change events).

        Missing intermediate branches are auto-created; branches emptied by
        deletes are pruned; deleting an absent path is an eventless no-op.
        Validation happens before any mutation, so a rejected batch leaves
        the tree untouched.
        """
        _check_disjoint(ops)
        normalized: list[WriteOp] = []
        for op in ops:
            if op.delete:
                normalized.append(op)
            else:
                # Empty branches cannot exist after a commit: prune them out
                # of the candidate, and treat a value that collapses to an
                # empty branch as a delete.
                value = _prune_empty(validate_value(op.value))
                if isinstance(value, dict) and not value:
                    normalized.append(WriteOp(path=op.path, delete=True))
                else:
                    normalized.append(WriteOp(path=op.path, value=value))

        self._revision += 1
        changed_roots: list[Path] = []
        for op in normalized:
            root = self._apply(op)
            if root is not None:
                changed_roots.append(root)

        # Reduce to minimal roots: drop any root that sits under another.
        minimal: list[Path] = []
        for p in sorted(set(changed_roots)):
            if not any(q.is_ancestor_or_equal(p) for q in minimal):
                minimal.append(p)

        events = [
            ChangeEvent(self._revision, p, self.get(p), server_time_ms)
            for p in minimal
        ]
        return self._revision, events

    def _apply(self, op: WriteOp) -> Path | None:
        """Apply one op; return the minimal changed root, or None for a no-op."""
        segs = op.path.segments
        if op.delete:
            return self._delete(segs)

        if not segs:
            self._root = op.value
            return ROOT

        # changed_depth = segment count of the shallowest path whose value
        # changed presence or shape while descending.
        if self._root is ABSENT:
            self._root = {}
            changed_depth = 1
        elif not isinstance(self._root, dict):
            self._root = {}
            changed_depth = 0  # scalar root replaced: the root value changed
        else:
            changed_depth = None
        node = self._root
        for i, seg in enumerate(segs[:-1]):
            child = node.get(seg)
            if not isinstance(child, dict):
                child = {}
                node[seg] = child
                if changed_depth is None:
                    changed_depth = i + 1
            node = child
        node[segs[-1]] = op.value
        if changed_depth is None:
            changed_depth = len(segs)
        return Path(segs[:changed_depth])

    def _delete(self, segs: tuple[str, ...]) -> Path | None:
        if not segs:
            if self._root is ABSENT:
                return None
            self._root = ABSENT
            return ROOT
        # Walk down recording the chain of (branch, key).
        chain: list[tuple[dict, str]] = []
        node = self._root
        for seg in segs:
            if not isinstance(node, dict) or seg not in node:
                return None
            chain.append((node, seg))
            node = node[seg]
        parent, key = chain[-1]
        del parent[key]
        changed = Path(segs)
        # Prune now-empty ancestors; the changed root climbs with the prune.
        for i in range(len(chain) - 1, 0, -1):
            branch, key = chain[i]
            if branch:
                break
            chain[i - 1][0].pop(chain[i - 1][1], None)
            changed = Path(segs[:i])
        if isinstance(self._root, dict) and not self._root:
            self._root = ABSENT
            changed = ROOT
        return changed

    # -- snapshots ---------------------------------------------------------

    def serialize_snapshot(self) -> str:
        """Canonical document: UTF-8 JSON, sorted keys, shortest floats."""
        if self._root is ABSENT:
            return "{}"
        return json.dumps(self._root, sort_keys=True, separators=(",", ":"))

    @classmethod
    def restore_snapshot(cls, text: str) -> "DataTree":
        def no_dupes(pairs):
            d = {}
            for k, v in pairs:
                if k in d:
                    raise MalformedDocumentError(f"duplicate key {k!r}")
                d[k] = v
            return d

        try:
            raw = json.loads(text, object_pairs_hook=no_dupes)
        except json.JSONDecodeError as exc:
            raise MalformedDocumentError(str(exc)) from exc
        tree = cls()
        if raw == {}:
            return tree
        try:
            value = validate_value(raw)
        except (EmptySegmentError, ForbiddenCharacterError, NonFiniteNumberError) as exc:
            raise MalformedDocumentError(str(exc)) from exc
        if isinstance(value, dict):
            _reject_empty_branches(value)
        tree._root = value
        return tree


def _reject_empty_branches(branch: dict) -> None:
    for v in branch.values():
        if isinstance(v, dict):
            if not v:
                raise MalformedDocumentError("document contains an empty branch")
            _reject_empty_branches(v)
