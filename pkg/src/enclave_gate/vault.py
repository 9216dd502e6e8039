"""Pseudonym vault: the hospital-side mapping from source ids to pseudonyms.

Pseudonyms are derived deterministically from a 32-byte secret, so separate
gateway processes with the same key mint identical values without
coordination; the store exists for re-identification and audit, not for
uniqueness. Re-identification is the only reversal path and every call is
audited, whether it succeeds or not.
"""

from __future__ import annotations

import hashlib
import hmac
import json
import re
import sqlite3
import struct
import threading
from dataclasses import dataclass
from datetime import datetime, timezone
from enum import Enum
from typing import Callable


class VaultError(Exception):
    pass


class BadKeyLength(VaultError):
    pass


class StorageFailure(VaultError):
    """Vault storage broke; callers must fail closed, never pass data through."""


class Forbidden(VaultError):
    pass


class NotFound(VaultError):
    pass


class ExportTampered(VaultError):
    pass


class PseudonymScope(str, Enum):
    PATIENT_ID = "PatientId"
    RESOURCE_ID = "ResourceId"
    DICOM_UID = "DicomUid"


@dataclass(frozen=True)
class Privilege:
    grants: frozenset[str]

    @classmethod
    def of(cls, *names: str) -> "Privilege":
        return cls(frozenset(names))

    def allows(self, name: str) -> bool:
        return name in self.grants


NO_PRIVILEGE = Privilege(frozenset())

PSEUDONYM_RE = re.compile(r"^PSN-[0-9a-f]{32}$")

KEY_LEN = 32


def check_key(key: bytes) -> bytes:
    if not isinstance(key, bytes) or len(key) != KEY_LEN:
        raise BadKeyLength(f"vault key must be exactly {KEY_LEN} bytes")
    return key


def derive_pseudonym(key: bytes, scope: PseudonymScope, source_id: str) -> str:
    """PSN- plus the first 16 bytes (hex) of HMAC-SHA256(key, scope||0x00||id)."""
    check_key(key)
    scope = PseudonymScope(scope)
    if not source_id:
        raise ValueError("empty source id")
    msg = scope.value.encode() + b"\x00" + source_id.encode()
    digest = hmac.new(key, msg, hashlib.sha256).digest()
    return "PSN-" + digest[:16].hex()


def is_pseudonym(text: str) -> bool:
    return bool(PSEUDONYM_RE.match(text))


@dataclass(frozen=True)
class VaultEntry:
    source_id: str
    pseudonym: str
    scope: PseudonymScope
    created_at: str


# audit hook signature: (action, resource_ref, outcome, principal)
AuditHook = Callable[[str, str, str, str], None]

EXPORT_VERSION = 1


class PseudonymVault:
    """Single-writer embedded store; get_or_create is atomic per (scope, id)."""

    def __init__(self, db_path: str, key: bytes, audit_hook: AuditHook | None = None):
        self._key = check_key(key)
        self._audit = audit_hook
        self._lock = threading.Lock()
        try:
            self._db = sqlite3.connect(db_path, check_same_thread=False)
            self._db.execute("PRAGMA journal_mode=WAL")
            self._db.execute("PRAGMA synchronous=NORMAL")
            self._db.execute(
                "CREATE TABLE IF NOT EXISTS mappings ("
                " scope TEXT NOT NULL,"
                " source_id TEXT NOT NULL,"
                " pseudonym TEXT NOT NULL,"
                " created_at TEXT NOT NULL,"
                " PRIMARY KEY (scope, source_id),"
                " UNIQUE (scope, pseudonym))"
            )
            self._db.commit()
        except sqlite3.Error as exc:
            raise StorageFailure(f"cannot open vault store: {exc}") from exc

    @property
    def key(self) -> bytes:
        return self._key

    def close(self) -> None:
        self._db.close()

    def get_or_create(self, source_id: str, scope: PseudonymScope) -> str:
        if not source_id:
            raise ValueError("empty source id")
        pseudonym = derive_pseudonym(self._key, scope, source_id)
        now = datetime.now(timezone.utc).isoformat(timespec="seconds")
        try:
            with self._lock:
                self._db.execute(
                    "INSERT OR IGNORE INTO mappings (scope, source_id, pseudonym, created_at)"
                    " VALUES (?, ?, ?, ?)",
                    (scope.value, source_id, pseudonym, now),
                )
                self._db.commit()
                row = self._db.execute(
                    "SELECT pseudonym FROM mappings WHERE scope = ? AND source_id = ?",
                    (scope.value, source_id),
                ).fetchone()
        except sqlite3.Error as exc:
            raise StorageFailure(f"vault write failed: {exc}") from exc
        if row is None or row[0] != pseudonym:
            # stored mapping disagrees with derivation: wrong key for this store
            raise StorageFailure("stored mapping does not match derivation key")
        return pseudonym

    def reidentify(self, pseudonym: str, scope: PseudonymScope, authz: Privilege,
                   principal: str = "") -> str:
        # Lookup happens before the privilege check so Forbidden and NotFound
        # take the same code path and are indistinguishable in timing.
        try:
            row = self._db.execute(
                "SELECT source_id FROM mappings WHERE scope = ? AND pseudonym = ?",
                (scope.value, pseudonym),
            ).fetchone()
        except sqlite3.Error as exc:
            raise StorageFailure(f"vault read failed: {exc}") from exc
        allowed = authz.allows("reidentify")
        if not allowed:
            self._audit_reidentify(pseudonym, "forbidden", principal)
            raise Forbidden("reidentify privilege required")
        if row is None:
            self._audit_reidentify(pseudonym, "not-found", principal)
            raise NotFound("unknown pseudonym")
        self._audit_reidentify(pseudonym, "ok", principal)
        return row[0]

    def _audit_reidentify(self, pseudonym: str, outcome: str, principal: str) -> None:
        if self._audit is not None:
            self._audit("Reidentify", pseudonym, outcome, principal)

    def entries(self) -> list[VaultEntry]:
        rows = self._db.execute(
            "SELECT scope, source_id, pseudonym, created_at FROM mappings"
            " ORDER BY scope, source_id"
        ).fetchall()
        return [
            VaultEntry(source_id=r[1], pseudonym=r[2], scope=PseudonymScope(r[0]), created_at=r[3])
            for r in rows
        ]

    def count(self) -> int:
        return self._db.execute("SELECT COUNT(*) FROM mappings").fetchone()[0]

    def export_mappings(self, authz: Privilege) -> bytes:
        """Sealed dump: one JSON header line, then length-prefixed UTF-8 fields.

        Each record is four fields (scope, source_id, pseudonym, created_at),
        each encoded as a 4-byte big-endian length followed by the UTF-8
        bytes. The header carries the record count and the SHA-256 of the
        body, so tampering is detectable before import.
        """
        if not authz.allows("export"):
            raise Forbidden("export privilege required")
        body = bytearray()
        entries = self.entries()
        for e in entries:
            for field_text in (e.scope.value, e.source_id, e.pseudonym, e.created_at):
                raw = field_text.encode("utf-8")
                body += struct.pack(">I", len(raw)) + raw
        header = {
            "version": EXPORT_VERSION,
            "count": len(entries),
            "content_digest": hashlib.sha256(bytes(body)).hexdigest(),
        }
        return json.dumps(header, sort_keys=True).encode("utf-8") + b"\n" + bytes(body)

    def import_mappings(self, document: bytes, authz: Privilege) -> int:
        if not authz.allows("export"):
            raise Forbidden("export privilege required")
        entries = parse_export(document)
        try:
            with self._lock:
                for e in entries:
                    row = self._db.execute(
                        "SELECT pseudonym FROM mappings WHERE scope = ? AND source_id = ?",
                        (e.scope.value, e.source_id),
                    ).fetchone()
                    if row is not None:
                        if row[0] != e.pseudonym:
                            raise StorageFailure(
                                f"import conflicts with existing mapping for {e.source_id!r}"
                            )
                        continue
                    self._db.execute(
                        "INSERT INTO mappings (scope, source_id, pseudonym, created_at)"
                        " VALUES (?, ?, ?, ?)",
                        (e.scope.value, e.source_id, e.pseudonym, e.created_at),
                    )
                self._db.commit()
        except sqlite3.Error as exc:
            raise StorageFailure(f"vault import failed: {exc}") from exc
        return len(entries)


def parse_export(document: bytes) -> list[VaultEntry]:
    """Verify a sealed export document and return its entries."""
    newline = document.find(b"\n")
    if newline < 0:
        raise ExportTampered("missing header line")
    try:
        header = json.loads(document[:newline].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ExportTampered(f"bad header: {exc}") from exc
    if header.get("version") != EXPORT_VERSION:
        raise ExportTampered(f"unsupported export version {header.get('version')!r}")
    body = document[newline + 1:]
    digest = hashlib.sha256(body).hexdigest()
    if digest != header.get("content_digest"):
        raise ExportTampered("content digest mismatch")
    count = header.get("count")
    entries: list[VaultEntry] = []
    pos = 0
    fields: list[str] = []
    while pos < len(body):
        if pos + 4 > len(body):
            raise ExportTampered("truncated length prefix")
        (length,) = struct.unpack(">I", body[pos:pos + 4])
        pos += 4
        if pos + length > len(body):
            raise ExportTampered("truncated field")
        try:
            fields.append(body[pos:pos + length].decode("utf-8"))
        except UnicodeDecodeError as exc:
            raise ExportTampered(f"bad field text: {exc}") from exc
        pos += length
        if len(fields) == 4:
            scope_text, source_id, pseudonym, created_at = fields
            try:
                scope = PseudonymScope(scope_text)
            except ValueError as exc:
                raise ExportTampered(f"unknown scope {scope_text!r}") from exc
            entries.append(VaultEntry(source_id, pseudonym, scope, created_at))
            fields = []
    if fields:
        raise ExportTampered("dangling fields at end of body")
    if count != len(entries):
        raise ExportTampered(f"header count {count} != {len(entries)} records")
    return entries
