"""Quarantine tickets: the human-review half of the ingress pipeline.

A ticket holds the untouched original, a working copy with every
automatic action already applied, and the findings the engine could not
clear on its own.  Reviewers edit the working copy; every edit re-runs
the scanner, and approval is only possible once that rescan is empty.

State machine: Quarantined -> InReview -> {Approved, Rejected}.
approve/reject on a still-Quarantined ticket pass through InReview
implicitly; no other transition exists.
"""

from __future__ import annotations

import json
import secrets
import threading
from dataclasses import dataclass, replace
from datetime import date, datetime, timezone
from enum import Enum
from pathlib import Path
from typing import Optional

from .deid import VaultLike, derive_offset, patient_source_id, scan, shift_date
from .model import (
    ElementValue,
    Resource,
    ResourceKind,
    element_at,
    normalize,
    parse_resource,
    remove_subtree,
    serialize_resource,
    set_element,
)
from .rules import Finding, RuleSet
from .vault import PseudonymScope


class TicketError(Exception):
    pass


class TicketNotFound(TicketError):
    pass


class IllegalTransition(TicketError):
    pass


class FindingsRemain(TicketError):
    """Approval attempted while the rescan still reports findings."""


class TicketState(str, Enum):
    QUARANTINED = "Quarantined"
    IN_REVIEW = "InReview"
    APPROVED = "Approved"
    REJECTED = "Rejected"


class EditAction(str, Enum):
    REDACT = "Redact"
    REPLACE_PSEUDONYM = "ReplacePseudonym"
    SHIFT_DATE = "ShiftDate"


@dataclass(frozen=True)
class Edit:
    path: str
    action: EditAction
    actor: str
    timestamp: str

    def to_json(self) -> dict:
        return {
            "path": self.path,
            "action": self.action.value,
            "actor": self.actor,
            "timestamp": self.timestamp,
        }


@dataclass(frozen=True)
class QuarantineTicket:
    id: str
    original: Resource
    working: Optional[Resource]
    findings: tuple[Finding, ...]
    state: TicketState
    edits: tuple[Edit, ...]
    created_at: str
    reject_reason: str = ""

    def summary(self) -> dict:
        return {
            "id": self.id,
            "kind": self.original.kind.value,
            "state": self.state.value,
            "findings": len(self.findings),
            "created_at": self.created_at,
        }


_EDITABLE = (TicketState.QUARANTINED, TicketState.IN_REVIEW)


class TicketStore:
    """File-backed ticket collection; one JSON document per ticket.

    Lives on the hospital side of the boundary: nothing in here is ever
    served from the enclave store.
    """

    def __init__(self, root, rules: RuleSet, vault: VaultLike, as_of: Optional[date] = None):
        self._root = Path(root)
        self._root.mkdir(parents=True, exist_ok=True)
        self._rules = rules
        self._vault = vault
        self._as_of = as_of
        self._lock = threading.Lock()
        self._tickets: dict[str, QuarantineTicket] = {}
        for path in sorted(self._root.glob("QT-*.json")):
            ticket = _ticket_from_json(json.loads(path.read_text(encoding="utf-8")))
            self._tickets[ticket.id] = ticket

    def _persist(self, ticket: QuarantineTicket) -> None:
        path = self._root / f"{ticket.id}.json"
        tmp = path.with_suffix(".tmp")
        tmp.write_text(json.dumps(_ticket_to_json(ticket), sort_keys=True), encoding="utf-8")
        tmp.replace(path)

    @staticmethod
    def new_id() -> str:
        return "QT-" + secrets.token_hex(6)

    def create(
        self,
        original: Resource,
        working: Resource,
        findings: tuple[Finding, ...],
        ticket_id: Optional[str] = None,
    ) -> QuarantineTicket:
        with self._lock:
            ticket = QuarantineTicket(
                id=ticket_id or self.new_id(),
                original=original,
                working=working,
                findings=tuple(findings),
                state=TicketState.QUARANTINED,
                edits=(),
                created_at=datetime.now(timezone.utc).isoformat(),
            )
            self._persist(ticket)
            self._tickets[ticket.id] = ticket
            return ticket

    def discard(self, ticket_id: str) -> None:
        """Remove a ticket entirely; rollback helper for failed ingests."""
        with self._lock:
            self._tickets.pop(ticket_id, None)
            (self._root / f"{ticket_id}.json").unlink(missing_ok=True)

    def get(self, ticket_id: str) -> QuarantineTicket:
        with self._lock:
            ticket = self._tickets.get(ticket_id)
            if ticket is None:
                raise TicketNotFound(ticket_id)
            return ticket

    def list(self) -> list[QuarantineTicket]:
        with self._lock:
            return sorted(self._tickets.values(), key=lambda t: (t.created_at, t.id))

    def _rescan(self, working: Resource) -> tuple[Finding, ...]:
        return tuple(scan(working, self._rules, as_of=self._as_of))

    def apply_edit(self, ticket_id: str, path: str, action: EditAction, actor: str) -> QuarantineTicket:
        action = EditAction(action)
        with self._lock:
            ticket = self._tickets.get(ticket_id)
            if ticket is None:
                raise TicketNotFound(ticket_id)
            if ticket.state not in _EDITABLE:
                raise IllegalTransition(f"ticket {ticket_id} is {ticket.state.value}")
            working = _perform_edit(ticket, path, action, self._vault)
            edit = Edit(
                path=path,
                action=action,
                actor=actor,
                timestamp=datetime.now(timezone.utc).isoformat(),
            )
            ticket = replace(
                ticket,
                working=working,
                findings=self._rescan(working),
                state=TicketState.IN_REVIEW,
                edits=ticket.edits + (edit,),
            )
            self._persist(ticket)
            self._tickets[ticket_id] = ticket
            return ticket

    def approve(self, ticket_id: str, actor: str) -> QuarantineTicket:
        """Final verifier pass; only a clean rescan may leave quarantine."""
        with self._lock:
            ticket = self._tickets.get(ticket_id)
            if ticket is None:
                raise TicketNotFound(ticket_id)
            if ticket.state not in _EDITABLE:
                raise IllegalTransition(f"ticket {ticket_id} is {ticket.state.value}")
            remaining = self._rescan(ticket.working)
            if remaining:
                raise FindingsRemain(f"{len(remaining)} findings remain")
            ticket = replace(ticket, findings=(), state=TicketState.APPROVED)
            self._persist(ticket)
            self._tickets[ticket_id] = ticket
            return ticket

    def reject(self, ticket_id: str, reason: str, actor: str) -> QuarantineTicket:
        with self._lock:
            ticket = self._tickets.get(ticket_id)
            if ticket is None:
                raise TicketNotFound(ticket_id)
            if ticket.state not in _EDITABLE:
                raise IllegalTransition(f"ticket {ticket_id} is {ticket.state.value}")
            ticket = replace(
                ticket, working=None, state=TicketState.REJECTED, reject_reason=reason
            )
            self._persist(ticket)
            self._tickets[ticket_id] = ticket
            return ticket

    # used by tests simulating storage trouble
    def revert(self, ticket: QuarantineTicket) -> None:
        with self._lock:
            self._persist(ticket)
            self._tickets[ticket.id] = ticket


def _perform_edit(
    ticket: QuarantineTicket, path: str, action: EditAction, vault: VaultLike
) -> Resource:
    working = ticket.working
    if action is EditAction.REDACT:
        return normalize(remove_subtree(working, path))
    current = element_at(working, path)
    if current is None:
        return working
    if action is EditAction.REPLACE_PSEUDONYM:
        if not isinstance(current.value, str):
            return working  # only textual values can carry a pseudonym
        pseudonym = vault.get_or_create(current.text, PseudonymScope.RESOURCE_ID)
        return set_element(working, path, ElementValue.string(pseudonym))
    # ShiftDate: offset comes from the original resource's patient, and the
    # shifted value is derived from the original element so the edit is
    # idempotent no matter how often the reviewer clicks it
    offset = derive_offset(patient_source_id(ticket.original), vault.key)
    source = element_at(ticket.original, path) or current
    try:
        shifted = shift_date(source, offset)
    except ValueError:
        return working
    return set_element(working, path, shifted)


def _ticket_to_json(ticket: QuarantineTicket) -> dict:
    return {
        "id": ticket.id,
        "kind": ticket.original.kind.value,
        "state": ticket.state.value,
        "created_at": ticket.created_at,
        "reject_reason": ticket.reject_reason,
        "original": serialize_resource(ticket.original),
        "working": None if ticket.working is None else serialize_resource(ticket.working),
        "findings": [f.to_json() for f in ticket.findings],
        "edits": [e.to_json() for e in ticket.edits],
    }


def _ticket_from_json(doc: dict) -> QuarantineTicket:
    kind = ResourceKind(doc["kind"])
    return QuarantineTicket(
        id=doc["id"],
        original=parse_resource(doc["original"], kind_hint=kind),
        working=None
        if doc["working"] is None
        else parse_resource(doc["working"], kind_hint=kind),
        findings=tuple(Finding.from_json(f) for f in doc["findings"]),
        state=TicketState(doc["state"]),
        edits=tuple(
            Edit(e["path"], EditAction(e["action"]), e["actor"], e["timestamp"])
            for e in doc["edits"]
        ),
        created_at=doc["created_at"],
        reject_reason=doc.get("reject_reason", ""),
    )
