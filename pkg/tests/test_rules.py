"""Rules engine: first-match-wins, deny-by-default, value constraints."""

from __future__ import annotations

import random

import pytest

from iotsync.datatree import ABSENT, Path
from iotsync.rules import (
    ANONYMOUS,
    AuthContext,
    Requirement,
    RuleEntry,
    RuleSet,
    default_ruleset,
    load_ruleset,
    must_be_boolean,
    number_range,
    ruleset_from_json,
    ruleset_to_json,
    save_ruleset,
    text_max_length,
    timestamp_not_older,
)

DEVICE = AuthContext(authenticated=True, principal="esp32-1", role="device")
USER = AuthContext(authenticated=True, principal="alice", role="user")
RULES = default_ruleset()

SENSOR_RANGES = {
    "/sensors/temperature": (0.0, 50.0),
    "/sensors/humidity": (0.0, 100.0),
    "/sensors/distance": (2.0, 400.0),
}


# -- matching semantics ------------------------------------------------------


def test_unmatched_paths_deny_both_read_and_write():
    for path in ["/secret", "/sensors/unknown", "/leds/led1/extra", "/a/b/c/d"]:
        p = Path.parse(path)
        assert not RULES.evaluate_read(DEVICE, p)
        assert not RULES.evaluate_write(DEVICE, p, 1.0, ABSENT, 0)


def test_first_matching_entry_wins():
    rules = RuleSet(
        entries=(
            RuleEntry.make("/x/special", read=Requirement.AUTH),
            RuleEntry.make("/x/$any", read=Requirement.DENY),
        )
    )
    assert rules.evaluate_read(USER, Path.parse("/x/special"))
    assert not rules.evaluate_read(USER, Path.parse("/x/other"))
    # Reversed order shadows the specific entry.
    flipped = RuleSet(entries=tuple(reversed(rules.entries)))
    assert not flipped.evaluate_read(USER, Path.parse("/x/special"))


def test_wildcard_matches_exactly_one_segment():
    entry = RuleEntry.make("/leds/$led", read=Requirement.AUTH)
    assert entry.matches(Path.parse("/leds/led1"))
    assert entry.matches(Path.parse("/leds/anything"))
    assert not entry.matches(Path.parse("/leds"))
    assert not entry.matches(Path.parse("/leds/led1/deep"))


def test_anonymous_denied_everywhere_in_default_rules():
    for path in ["/", "/sensors/temperature", "/leds/led1", "/metadata/status"]:
        p = Path.parse(path)
        assert not RULES.evaluate_read(ANONYMOUS, p)
        assert not RULES.evaluate_write(ANONYMOUS, p, True, ABSENT, 0)


def test_user_cannot_write_sensor_paths_but_device_can():
    p = Path.parse("/sensors/temperature")
    assert not RULES.evaluate_write(USER, p, 25.0, ABSENT, 0)
    assert RULES.evaluate_write(DEVICE, p, 25.0, ABSENT, 0)


def test_both_roles_may_write_leds_booleans_only():
    p = Path.parse("/leds/led1")
    for auth in (USER, DEVICE):
        assert RULES.evaluate_write(auth, p, True, ABSENT, 0)
        assert not RULES.evaluate_write(auth, p, 1.0, ABSENT, 0)
        assert not RULES.evaluate_write(auth, p, "on", ABSENT, 0)
        assert not RULES.evaluate_write(auth, p, {"on": True}, ABSENT, 0)


# -- constraints -------------------------------------------------------------


@pytest.mark.parametrize(
    "path,lo,hi",
    [(p, lo, hi) for p, (lo, hi) in SENSOR_RANGES.items()],
)
def test_sensor_range_boundaries_are_inclusive(path, lo, hi):
    p = Path.parse(path)
    for ok in (lo, hi, (lo + hi) / 2):
        assert RULES.evaluate_write(DEVICE, p, ok, ABSENT, 0)
    for bad in (lo - 0.001, hi + 0.001, True, "22", {"v": 1.0}):
        assert not RULES.evaluate_write(DEVICE, p, bad, ABSENT, 0)


def test_text_max_length_constraint():
    p = Path.parse("/metadata/device_id")
    assert RULES.evaluate_write(DEVICE, p, "x" * 64, ABSENT, 0)
    assert not RULES.evaluate_write(DEVICE, p, "x" * 65, ABSENT, 0)
    assert not RULES.evaluate_write(DEVICE, p, 123, ABSENT, 0)


def test_timestamp_not_older_compares_against_stored_value():
    p = Path.parse("/metadata/last_update")
    old, new = "2025-01-01T00:00:00.000Z", "2025-01-01T00:00:01.000Z"
    assert RULES.evaluate_write(DEVICE, p, new, old, 0)
    assert RULES.evaluate_write(DEVICE, p, old, old, 0)  # equal allowed
    assert not RULES.evaluate_write(DEVICE, p, old, new, 0)
    assert RULES.evaluate_write(DEVICE, p, old, ABSENT, 0)  # first write


def test_timestamp_constraint_accepts_numeric_epochs():
    c = timestamp_not_older()
    assert c.check(1000.0, 999.0, 0) is None
    assert c.check(1000.0, 1000.0, 0) is None
    assert c.check(999.0, 1000.0, 0) is not None
    assert c.check(True, 1000.0, 0) is not None  # booleans are not timestamps


# -- generated grid ----------------------------------------------------------


def _expected_write(path: str, value, auth: AuthContext) -> bool:
    """Independent restatement of the intended default policy."""
    if not auth.authenticated:
        return False
    if path in SENSOR_RANGES:
        if auth.role != "device":
            return False
        lo, hi = SENSOR_RANGES[path]
        return (
            isinstance(value, (int, float))
            and not isinstance(value, bool)
            and lo <= value <= hi
        )
    if path.startswith("/leds/") and path.count("/") == 2:
        return isinstance(value, bool)
    return False


def test_write_policy_grid_of_1000_cases():
    rng = random.Random(42)
    paths = list(SENSOR_RANGES) + ["/leds/led1", "/leds/led2", "/leds/other", "/nope", "/sensors/extra"]
    values = [True, False, -1.0, 0.0, 1.0, 25.0, 50.0, 100.0, 400.0, 401.0, "text", 2.0]
    auths = [ANONYMOUS, USER, DEVICE]
    checked = 0
    while checked < 1000:
        path, value, auth = rng.choice(paths), rng.choice(values), rng.choice(auths)
        got = bool(RULES.evaluate_write(auth, Path.parse(path), value, ABSENT, 0))
        assert got == _expected_write(path, value, auth), (path, value, auth)
        checked += 1


# -- serialization -----------------------------------------------------------


def test_ruleset_json_round_trip_preserves_behavior():
    doc = ruleset_to_json(RULES)
    restored = ruleset_from_json(doc)
    assert restored == RULES


def test_ruleset_file_round_trip(tmp_path):
    target = tmp_path / "rules.json"
    save_ruleset(RULES, target)
    assert load_ruleset(target) == RULES


def test_shipped_rules_file_matches_built_in_default():
    from importlib.resources import files

    shipped = files("iotsync").joinpath("data/default_rules.json")
    import json

    assert ruleset_from_json(json.loads(shipped.read_text())) == RULES


def test_constraint_constructors():
    assert number_range(0, 50).check(25.0, ABSENT, 0) is None
    assert must_be_boolean().check(True, ABSENT, 0) is None
    assert text_max_length(3).check("abcd", ABSENT, 0) is not None
