"""Hash-chained append-only audit log.

Every record is chained to its predecessor through SHA-256, so any
after-the-fact edit of the file is detectable and attributable to a
sequence number.  The byte layout is documented in the README so an
external tool can re-verify the chain without importing this package.

On-disk layout, one record per entry:

    u32-BE body_len || body
    body := field{6} || prev_hash(32) || entry_hash(32)
    field := u32-BE n || n bytes of UTF-8

The six fields, in order: seq (decimal), timestamp, principal, action,
resource-ref, outcome.  entry_hash = SHA-256(prev_hash || field bytes);
the first entry uses a prev_hash of 32 zero bytes.
"""

from __future__ import annotations

import hashlib
import os
import struct
import threading
from dataclasses import dataclass
from datetime import datetime, timezone
from enum import Enum
from pathlib import Path
from typing import Callable, Iterable, Optional


class AuditError(Exception):
    pass


class StorageFailure(AuditError):
    """The log could not be read or durably extended."""


class AuditCorrupt(AuditError):
    """Existing log bytes do not form a valid chain."""


class AuditAction(str, Enum):
    INGEST = "Ingest"
    CLEARED = "Cleared"
    QUARANTINED = "Quarantined"
    REVIEW_EDIT = "ReviewEdit"
    APPROVE = "Approve"
    REJECT = "Reject"
    REIDENTIFY = "Reidentify"
    LOGIN = "Login"
    LOGIN_FAILED = "LoginFailed"
    POLICY_DENY = "PolicyDeny"
    OBJECT_PUT = "ObjectPut"
    OBJECT_GET = "ObjectGet"


GENESIS_HASH = b"\x00" * 32

_U32 = struct.Struct(">I")


@dataclass(frozen=True)
class AuditEntry:
    seq: int
    timestamp: str
    principal: str
    action: AuditAction
    resource_ref: str
    outcome: str
    prev_hash: bytes
    entry_hash: bytes

    def to_json(self) -> dict:
        return {
            "seq": self.seq,
            "timestamp": self.timestamp,
            "principal": self.principal,
            "action": self.action.value,
            "resource_ref": self.resource_ref,
            "outcome": self.outcome,
            "prev_hash": self.prev_hash.hex(),
            "entry_hash": self.entry_hash.hex(),
        }


@dataclass(frozen=True)
class VerifyReport:
    ok: bool
    first_bad_seq: Optional[int]
    checked: int

    def to_json(self) -> dict:
        return {"ok": self.ok, "first_bad_seq": self.first_bad_seq, "checked": self.checked}


def _utc_now() -> datetime:
    return datetime.now(timezone.utc)


def format_timestamp(moment: datetime) -> str:
    if moment.tzinfo is None:
        moment = moment.replace(tzinfo=timezone.utc)
    text = moment.astimezone(timezone.utc).isoformat(timespec="microseconds")
    return text.replace("+00:00", "Z")


def encode_fields(
    seq: int, timestamp: str, principal: str, action: str, resource_ref: str, outcome: str
) -> bytes:
    out = bytearray()
    for field in (str(seq), timestamp, principal, action, resource_ref, outcome):
        raw = field.encode("utf-8")
        out += _U32.pack(len(raw))
        out += raw
    return bytes(out)


def compute_entry_hash(prev_hash: bytes, fields: bytes) -> bytes:
    return hashlib.sha256(prev_hash + fields).digest()


def _encode_record(entry: AuditEntry) -> bytes:
    fields = encode_fields(
        entry.seq,
        entry.timestamp,
        entry.principal,
        entry.action.value,
        entry.resource_ref,
        entry.outcome,
    )
    body = fields + entry.prev_hash + entry.entry_hash
    return _U32.pack(len(body)) + body


def _parse_body(body: bytes) -> tuple[list[str], bytes, bytes]:
    """Split a record body into its six fields and the two hashes."""
    if len(body) < 64:
        raise ValueError("record too short")
    fields_raw, hashes = body[:-64], body[-64:]
    fields: list[str] = []
    pos = 0
    for _ in range(6):
        if pos + 4 > len(fields_raw):
            raise ValueError("truncated field length")
        (n,) = _U32.unpack_from(fields_raw, pos)
        pos += 4
        if pos + n > len(fields_raw):
            raise ValueError("truncated field")
        fields.append(fields_raw[pos : pos + n].decode("utf-8"))
        pos += n
    if pos != len(fields_raw):
        raise ValueError("trailing bytes in record")
    return fields, hashes[:32], hashes[32:]


def _entry_from_body(body: bytes) -> AuditEntry:
    fields, prev_hash, entry_hash = _parse_body(body)
    seq_text, timestamp, principal, action, resource_ref, outcome = fields
    return AuditEntry(
        seq=int(seq_text),
        timestamp=timestamp,
        principal=principal,
        action=AuditAction(action),
        resource_ref=resource_ref,
        outcome=outcome,
        prev_hash=prev_hash,
        entry_hash=entry_hash,
    )


def _walk_records(data: bytes) -> Iterable[bytes]:
    pos = 0
    while pos < len(data):
        if pos + 4 > len(data):
            raise ValueError("truncated record length")
        (body_len,) = _U32.unpack_from(data, pos)
        pos += 4
        if pos + body_len > len(data):
            raise ValueError("truncated record body")
        yield data[pos : pos + body_len]
        pos += body_len


def verify_log(path: str | os.PathLike) -> VerifyReport:
    """Recompute the whole chain from the stored bytes.

    Tolerant reader: corruption is reported, never raised.  A record is
    bad if its framing breaks, its fields fail to parse, its embedded
    seq is out of order, or either hash disagrees with recomputation.
    """
    data = Path(path).read_bytes()
    prev = GENESIS_HASH
    index = 0
    pos = 0
    while pos < len(data):
        if pos + 4 > len(data):
            return VerifyReport(False, index, index)
        (body_len,) = _U32.unpack_from(data, pos)
        if pos + 4 + body_len > len(data):
            return VerifyReport(False, index, index)
        body = data[pos + 4 : pos + 4 + body_len]
        try:
            fields, prev_hash, entry_hash = _parse_body(body)
            seq = int(fields[0])
            AuditAction(fields[3])
        except (ValueError, UnicodeDecodeError):
            return VerifyReport(False, index, index)
        if seq != index or prev_hash != prev:
            return VerifyReport(False, index, index)
        fields_raw = body[:-64]
        if compute_entry_hash(prev_hash, fields_raw) != entry_hash:
            return VerifyReport(False, index, index)
        prev = entry_hash
        index += 1
        pos += 4 + body_len
    return VerifyReport(True, None, index)


class AuditLog:
    """Single-writer append log; concurrent reads are safe.

    append() returns only after the record is flushed and fsynced, so a
    caller may acknowledge the triggering request knowing the trail
    already survives a crash.
    """

    def __init__(self, path: str | os.PathLike, clock: Callable[[], datetime] = _utc_now):
        self._path = Path(path)
        self._clock = clock
        self._lock = threading.Lock()
        self._entries: list[AuditEntry] = []
        self._head = GENESIS_HASH
        self._load()
        self._fh = open(self._path, "ab")

    def _load(self) -> None:
        if not self._path.exists():
            self._path.parent.mkdir(parents=True, exist_ok=True)
            self._path.touch()
            return
        data = self._path.read_bytes()
        try:
            for body in _walk_records(data):
                entry = _entry_from_body(body)
                if entry.seq != len(self._entries) or entry.prev_hash != self._head:
                    raise AuditCorrupt(f"broken chain at seq {len(self._entries)}")
                if compute_entry_hash(entry.prev_hash, body[:-64]) != entry.entry_hash:
                    raise AuditCorrupt(f"hash mismatch at seq {entry.seq}")
                self._entries.append(entry)
                self._head = entry.entry_hash
        except ValueError as exc:
            raise AuditCorrupt(f"unreadable record after seq {len(self._entries) - 1}") from exc

    @property
    def path(self) -> Path:
        return self._path

    @property
    def head(self) -> bytes:
        return self._head

    def __len__(self) -> int:
        return len(self._entries)

    def append(
        self,
        principal: str,
        action: AuditAction | str,
        resource_ref: str,
        outcome: str,
    ) -> AuditEntry:
        action = AuditAction(action)
        with self._lock:
            seq = len(self._entries)
            timestamp = format_timestamp(self._clock())
            fields = encode_fields(
                seq, timestamp, principal, action.value, resource_ref, outcome
            )
            entry = AuditEntry(
                seq=seq,
                timestamp=timestamp,
                principal=principal,
                action=action,
                resource_ref=resource_ref,
                outcome=outcome,
                prev_hash=self._head,
                entry_hash=compute_entry_hash(self._head, fields),
            )
            try:
                self._fh.write(_encode_record(entry))
                self._fh.flush()
                os.fsync(self._fh.fileno())
            except OSError as exc:
                raise StorageFailure(str(exc)) from exc
            self._entries.append(entry)
            self._head = entry.entry_hash
            return entry

    def entries(self) -> tuple[AuditEntry, ...]:
        return tuple(self._entries)

    def query(
        self,
        principal: Optional[str] = None,
        action: Optional[AuditAction | str] = None,
        seq_from: Optional[int] = None,
        seq_to: Optional[int] = None,
    ) -> tuple[AuditEntry, ...]:
        if action is not None:
            action = AuditAction(action)
        picked = []
        for entry in self._entries:
            if principal is not None and entry.principal != principal:
                continue
            if action is not None and entry.action != action:
                continue
            if seq_from is not None and entry.seq < seq_from:
                continue
            if seq_to is not None and entry.seq > seq_to:
                continue
            picked.append(entry)
        return tuple(picked)

    def verify(self) -> VerifyReport:
        return verify_log(self._path)

    def close(self) -> None:
        self._fh.close()
