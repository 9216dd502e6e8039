import hashlib
import random
import struct
from datetime import datetime, timedelta, timezone

import pytest

from enclave_gate.audit import (
    GENESIS_HASH,
    AuditAction,
    AuditCorrupt,
    AuditLog,
    verify_log,
)


def fixed_clock(start="2026-01-15T12:00:00+00:00", step=1.0):
    moment = datetime.fromisoformat(start)
    delta = timedelta(seconds=step)

    def tick():
        nonlocal moment
        now = moment
        moment = moment + delta
        return now

    return tick


def hand_encode(*fields):
    out = b""
    for f in fields:
        raw = f.encode("utf-8")
        out += struct.pack(">I", len(raw)) + raw
    return out


def test_genesis_entry(tmp_path):
    log = AuditLog(tmp_path / "a.log", clock=fixed_clock())
    e = log.append("alice", AuditAction.INGEST, "Patient/p1", "ok")
    assert e.seq == 0
    assert e.prev_hash == GENESIS_HASH == b"\x00" * 32
    log.close()


def test_chain_links_and_pinned_hashes(tmp_path):
    log = AuditLog(tmp_path / "a.log", clock=fixed_clock())
    e0 = log.append("alice", AuditAction.INGEST, "Patient/p1", "ok")
    e1 = log.append("alice", AuditAction.CLEARED, "Patient/p1", "ok")
    assert e1.prev_hash == e0.entry_hash
    # frozen via an independent digest implementation
    assert e0.entry_hash.hex() == "3e130d1a6270c704b266edb96206477880bc04afaa327ce459ce0aa23a322275"
    assert e1.entry_hash.hex() == "13029320bd73a2217275f0a26302529d529140a87f35d912a2f790f7674c4936"
    log.close()


def test_hash_matches_hand_oracle(tmp_path):
    log = AuditLog(tmp_path / "a.log", clock=fixed_clock())
    entries = [
        log.append("alice", AuditAction.LOGIN, "session", "ok"),
        log.append("bob", AuditAction.REIDENTIFY, "PSN-" + "0" * 32, "forbidden"),
        log.append("alice", AuditAction.OBJECT_PUT, "raw/dump.bin", "ok"),
    ]
    prev = GENESIS_HASH
    for e in entries:
        fields = hand_encode(
            str(e.seq), e.timestamp, e.principal, e.action.value, e.resource_ref, e.outcome
        )
        assert e.entry_hash == hashlib.sha256(prev + fields).digest()
        prev = e.entry_hash
    log.close()


def test_persistence_and_reopen(tmp_path):
    path = tmp_path / "a.log"
    log = AuditLog(path, clock=fixed_clock())
    log.append("alice", AuditAction.INGEST, "r1", "ok")
    log.append("alice", AuditAction.QUARANTINED, "r2", "ticket t1")
    head = log.head
    log.close()
    again = AuditLog(path, clock=fixed_clock("2026-01-16T00:00:00+00:00"))
    assert len(again) == 2
    assert again.head == head
    e = again.append("carol", AuditAction.APPROVE, "t1", "ok")
    assert e.seq == 2
    assert e.prev_hash == head
    again.close()


def test_durable_before_return(tmp_path):
    path = tmp_path / "a.log"
    log = AuditLog(path, clock=fixed_clock())
    log.append("alice", AuditAction.INGEST, "r1", "ok")
    # a second reader sees the entry without any close/flush from the writer
    report = verify_log(path)
    assert report.ok and report.checked == 1
    log.close()


def test_verify_empty_and_clean(tmp_path):
    path = tmp_path / "a.log"
    log = AuditLog(path, clock=fixed_clock())
    assert log.verify() == log.verify()
    assert log.verify().ok
    assert log.verify().checked == 0
    for i in range(50):
        log.append("p", AuditAction.INGEST, f"r{i}", "ok")
    rep = log.verify()
    assert rep.ok and rep.first_bad_seq is None and rep.checked == 50
    log.close()


def build_log(path, n):
    log = AuditLog(path, clock=fixed_clock())
    actions = list(AuditAction)
    rng = random.Random(7)
    offsets = []
    for i in range(n):
        start = path.stat().st_size if path.exists() else 0
        log.append(
            f"user{rng.randrange(5)}",
            actions[rng.randrange(len(actions))],
            f"resource/{i}",
            rng.choice(["ok", "denied", "rejected"]),
        )
        offsets.append((start, path.stat().st_size))
    log.close()
    return offsets


def test_byte_flips_detected_with_correct_seq(tmp_path):
    path = tmp_path / "big.log"
    spans = build_log(path, 1000)
    pristine = path.read_bytes()
    assert verify_log(path).ok
    rng = random.Random(99)
    for _ in range(120):
        pos = rng.randrange(len(pristine))
        expected_seq = next(i for i, (a, b) in enumerate(spans) if a <= pos < b)
        flipped = bytearray(pristine)
        flipped[pos] ^= 1 << rng.randrange(8)
        path.write_bytes(bytes(flipped))
        report = verify_log(path)
        assert not report.ok
        assert report.first_bad_seq == expected_seq
    path.write_bytes(pristine)
    assert verify_log(path).ok


def test_truncated_tail_detected(tmp_path):
    path = tmp_path / "a.log"
    build_log(path, 10)
    data = path.read_bytes()
    path.write_bytes(data[:-5])
    report = verify_log(path)
    assert not report.ok
    assert report.first_bad_seq == 9


def test_corrupt_log_refuses_append_mode(tmp_path):
    path = tmp_path / "a.log"
    build_log(path, 5)
    data = bytearray(path.read_bytes())
    data[10] ^= 0xFF
    path.write_bytes(bytes(data))
    with pytest.raises(AuditCorrupt):
        AuditLog(path)


def test_query_filters(tmp_path):
    log = AuditLog(tmp_path / "a.log", clock=fixed_clock())
    log.append("alice", AuditAction.LOGIN, "s", "ok")
    log.append("bob", AuditAction.REIDENTIFY, "PSN-" + "1" * 32, "ok")
    log.append("alice", AuditAction.REIDENTIFY, "PSN-" + "2" * 32, "forbidden")
    log.append("alice", AuditAction.INGEST, "r", "ok")
    assert len(log.query()) == 4
    reid = log.query(action=AuditAction.REIDENTIFY)
    assert [e.seq for e in reid] == [1, 2]
    assert [e.seq for e in log.query(principal="alice")] == [0, 2, 3]
    assert [e.seq for e in log.query(principal="alice", action="Reidentify")] == [2]
    assert log.query(seq_from=2, seq_to=3) == log.entries()[2:4]
    assert log.query(seq_from=10, seq_to=20) == ()
    log.close()


def test_rejects_unknown_action(tmp_path):
    log = AuditLog(tmp_path / "a.log", clock=fixed_clock())
    with pytest.raises(ValueError):
        log.append("alice", "Tamper", "r", "ok")
    log.close()


def test_unicode_fields_round_trip(tmp_path):
    path = tmp_path / "a.log"
    log = AuditLog(path, clock=fixed_clock())
    log.append("müller", AuditAction.INGEST, "Bericht/äöü", "ok ✓")
    log.close()
    again = AuditLog(path)
    e = again.entries()[0]
    assert e.principal == "müller"
    assert e.resource_ref == "Bericht/äöü"
    assert e.outcome == "ok ✓"
    assert again.verify().ok
    again.close()
