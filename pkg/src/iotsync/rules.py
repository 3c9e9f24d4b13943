"""Access-control and validation rules for every read and write.

Evaluation is pure and deterministic: the first entry whose pattern matches
the target path decides, and anything unmatched is denied for both read and
write. Write entries may carry a value constraint (boolean-only actuator
paths, numeric sensor ranges, text length caps, and a never-go-backwards
timestamp check against the currently stored value).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum
from functools import lru_cache
from pathlib import Path as FsPath
from typing import Any, Optional

from .datatree import ABSENT, Path, TreeError


class Requirement(Enum):
    """Who may perform the guarded action."""

    DENY = "deny"
    AUTH = "auth"  # any authenticated principal
    DEVICE = "device"  # authenticated principal registered as a device


@dataclass(frozen=True)
class AuthContext:
    authenticated: bool = False
    principal: Optional[str] = None
    role: Optional[str] = None  # "device" | "user"

    def __post_init__(self):
        if not self.authenticated:
            object.__setattr__(self, "principal", None)
            object.__setattr__(self, "role", None)

    def satisfies(self, req: Requirement) -> bool:
        if req is Requirement.DENY:
            return False
        if req is Requirement.AUTH:
            return self.authenticated
        return self.authenticated and self.role == "device"


ANONYMOUS = AuthContext()


@dataclass(frozen=True)
class Constraint:
    """Pure predicate over (candidate, currently stored value, now)."""

    kind: str  # must_be_boolean | number_range | text_max_length | timestamp_not_older
    lo: float = 0.0
    hi: float = 0.0
    max_length: int = 0

    def check(self, candidate: Any, current: Any, now_ms: int) -> Optional[str]:
        """Return a denial reason, or None when the constraint holds."""
        if self.kind == "must_be_boolean":
            if not isinstance(candidate, bool):
                return "MustBeBoolean"
        elif self.kind == "number_range":
            if isinstance(candidate, bool) or not isinstance(candidate, (int, float)):
                return "NumberInRange"
            if not (self.lo <= float(candidate) <= self.hi):
                return "NumberInRange"
        elif self.kind == "text_max_length":
            if not isinstance(candidate, str) or len(candidate) > self.max_length:
                return "TextMaxLength"
        elif self.kind == "timestamp_not_older":
            return _check_timestamp(candidate, current)
        else:
            return f"UnknownConstraint:{self.kind}"
        return None


def must_be_boolean() -> Constraint:
    return Constraint(kind="must_be_boolean")


def number_range(lo: float, hi: float) -> Constraint:
    return Constraint(kind="number_range", lo=float(lo), hi=float(hi))


def text_max_length(n: int) -> Constraint:
    return Constraint(kind="text_max_length", max_length=n)


def timestamp_not_older() -> Constraint:
    return Constraint(kind="timestamp_not_older")


def _check_timestamp(candidate: Any, current: Any) -> Optional[str]:
    # ISO-8601 text compares lexicographically; epoch numbers numerically.
    if isinstance(candidate, str):
        if current is ABSENT or not isinstance(current, str):
            return None
        return None if candidate >= current else "TimestampNotOlderThanCurrent"
    if isinstance(candidate, (int, float)) and not isinstance(candidate, bool):
        if current is ABSENT or isinstance(current, bool) or not isinstance(
            current, (int, float)
        ):
            return None
        return None if float(candidate) >= float(current) else "TimestampNotOlderThanCurrent"
    return "TimestampNotOlderThanCurrent"


@dataclass(frozen=True)
class RuleEntry:
    """One pattern with read/write requirements and an optional constraint.

    Pattern segments starting with '$' are single-segment wildcards.
    """

    pattern: tuple[str, ...]
    read: Requirement = Requirement.DENY
    write: Requirement = Requirement.DENY
    validate: Optional[Constraint] = None

    @classmethod
    def make(
        cls,
        pattern: str,
        read: Requirement = Requirement.DENY,
        write: Requirement = Requirement.DENY,
        validate: Optional[Constraint] = None,
    ) -> "RuleEntry":
        segs = () if pattern == "/" else tuple(pattern.lstrip("/").split("/"))
        return cls(pattern=segs, read=read, write=write, validate=validate)

    def matches(self, path: Path) -> bool:
        if len(self.pattern) != len(path.segments):
            return False
        return all(
            pat.startswith("$") or pat == seg
            for pat, seg in zip(self.pattern, path.segments)
        )

    def pattern_text(self) -> str:
        return "/" + "/".join(self.pattern)


@dataclass(frozen=True)
class Decision:
    allowed: bool
    reason: Optional[str] = None

    def __bool__(self):
        return self.allowed


ALLOW = Decision(True)


@dataclass(frozen=True)
class RuleSet:
    """Ordered first-match-wins rule list with deny-by-default."""

    entries: tuple[RuleEntry, ...]

    def _match(self, path: Path) -> Optional[RuleEntry]:
        return _match_cached(self, path)

    def evaluate_read(self, auth: AuthContext, path: Path) -> Decision:
        entry = self._match(path)
        if entry is None:
            return Decision(False, "NoMatchingRule")
        if not auth.satisfies(entry.read):
            return Decision(False, _auth_reason(auth, entry.read))
        return ALLOW

    def evaluate_write(
        self,
        auth: AuthContext,
        path: Path,
        candidate: Any,
        current: Any,
        now_ms: int,
    ) -> Decision:
        entry = self._match(path)
        if entry is None:
            return Decision(False, "NoMatchingRule")
        if not auth.satisfies(entry.write):
            return Decision(False, _auth_reason(auth, entry.write))
        if entry.validate is not None:
            reason = entry.validate.check(candidate, current, now_ms)
            if reason is not None:
                return Decision(False, reason)
        return ALLOW


@lru_cache(maxsize=4096)
def _match_cached(rules: "RuleSet", path: Path) -> Optional[RuleEntry]:
    for entry in rules.entries:
        if entry.matches(path):
            return entry
    return None


def _auth_reason(auth: AuthContext, req: Requirement) -> str:
    if req is Requirement.DENY:
        return "Forbidden"
    if not auth.authenticated:
        return "AuthRequired"
    return "DeviceRequired"


def default_ruleset() -> RuleSet:
    """Shipped policy: authenticated reads everywhere under the known roots,
    device-only sensor/metadata writes with range and staleness constraints,
    boolean-only LED control for any authenticated principal."""
    E = RuleEntry.make
    R = Requirement
    return RuleSet(
        entries=(
            E("/", read=R.AUTH),
            E("/sensors", read=R.AUTH),
            E("/sensors/temperature", read=R.AUTH, write=R.DEVICE, validate=number_range(0, 50)),
            E("/sensors/humidity", read=R.AUTH, write=R.DEVICE, validate=number_range(0, 100)),
            E("/sensors/distance", read=R.AUTH, write=R.DEVICE, validate=number_range(2, 400)),
            E("/leds", read=R.AUTH),
            E("/leds/$led", read=R.AUTH, write=R.AUTH, validate=must_be_boolean()),
            E("/metadata", read=R.AUTH),
            E("/metadata/last_update", read=R.AUTH, write=R.DEVICE, validate=timestamp_not_older()),
            E("/metadata/device_id", read=R.AUTH, write=R.DEVICE, validate=text_max_length(64)),
            E("/metadata/status", read=R.AUTH, write=R.DEVICE),
            E("/metadata/ack", read=R.AUTH),
            E("/metadata/ack/$target", read=R.AUTH, write=R.DEVICE),
        )
    )


# -- JSON file format -------------------------------------------------------
# {"rules": {"<pattern>": {"read": "auth", "write": "device",
#            "validate": {"kind": "number_range", "lo": 0, "hi": 50}}}}
# Object order is evaluation order.


def ruleset_to_json(rules: RuleSet) -> dict:
    out: dict[str, Any] = {}
    for e in rules.entries:
        entry: dict[str, Any] = {"read": e.read.value, "write": e.write.value}
        if e.validate is not None:
            c = e.validate
            v: dict[str, Any] = {"kind": c.kind}
            if c.kind == "number_range":
                v["lo"], v["hi"] = c.lo, c.hi
            elif c.kind == "text_max_length":
                v["max_length"] = c.max_length
            entry["validate"] = v
        out[e.pattern_text()] = entry
    return {"rules": out}


def ruleset_from_json(doc: dict) -> RuleSet:
    try:
        raw = doc["rules"]
        entries = []
        for pattern, fields in raw.items():
            validate = None
            if "validate" in fields and fields["validate"] is not None:
                v = fields["validate"]
                validate = Constraint(
                    kind=v["kind"],
                    lo=float(v.get("lo", 0.0)),
                    hi=float(v.get("hi", 0.0)),
                    max_length=int(v.get("max_length", 0)),
                )
            entries.append(
                RuleEntry.make(
                    pattern,
                    read=Requirement(fields.get("read", "deny")),
                    write=Requirement(fields.get("write", "deny")),
                    validate=validate,
                )
            )
        return RuleSet(entries=tuple(entries))
    except (KeyError, TypeError, ValueError, AttributeError) as exc:
        raise TreeError(f"malformed ruleset document: {exc}") from exc


def load_ruleset(path: str | FsPath) -> RuleSet:
    with open(path, "r", encoding="utf-8") as fh:
        return ruleset_from_json(json.load(fh))


def save_ruleset(rules: RuleSet, path: str | FsPath) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(ruleset_to_json(rules), fh, indent=2)
        fh.write("\n")
