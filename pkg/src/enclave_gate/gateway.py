"""The HTTP gateway: authenticated ingress, object pathway, quarantine
review, policy checks, and audit access in one service.

Ordering discipline for every mutating endpoint: validate and authorize
first, append the audit entry, then apply the change.  If the audit
trail cannot be extended the request fails with 503 and any staged
change is rolled back; a record that cannot be accounted for must not
exist.  The enclave object store and the hospital-side quarantine root
are distinct directory trees wired at construction, so quarantined
originals are unreachable through the object endpoints by construction.
"""

from __future__ import annotations

import hashlib
import time
from dataclasses import dataclass, replace as dc_replace
from datetime import date
from typing import Callable, Optional

from fastapi import FastAPI, Request, Response
from fastapi.responses import JSONResponse

from . import __version__
from .audit import AuditAction, AuditCorrupt, AuditLog
from .audit import StorageFailure as AuditStorageFailure
from .auth import Authenticator, Session, Unauthorized
from .config import Config, load_accounts, load_vault_key
from .deid import DeidOutcome, deidentify, deidentify_dicom, split_bundle
from .model import (
    MalformedPayload,
    Resource,
    ResourceKind,
    UnsupportedKind,
    parse_resource,
    serialize_resource,
)
from .policy import (
    Channel,
    ContextFlag,
    FlowRequest,
    PayloadClass,
    PolicySet,
    Principal,
    PrincipalMode,
    Verdict,
    Zone,
    check_flow,
)
from .policy import load_default as load_default_policy
from .policy import load_rules as load_policy_file
from .rules import RuleSet, Strictness
from .rules import load_default as load_default_rules
from .rules import load_rules as load_rules_file
from .store import Attestation, BadName, ObjectStore, check_bucket, check_key
from .store import NotFound as ObjectNotFound
from .store import StorageFailure as StoreStorageFailure
from .tickets import (
    EditAction,
    FindingsRemain,
    IllegalTransition,
    TicketNotFound,
    TicketStore,
)
from .vault import PseudonymVault
from .vault import StorageFailure as VaultStorageFailure

FHIR_BUCKET = "fhir"
DICOM_BUCKET = "dicom-meta"

_STORAGE_ERRORS = (AuditStorageFailure, AuditCorrupt, VaultStorageFailure, StoreStorageFailure)


@dataclass
class GatewayContext:
    config: Config
    rules: RuleSet
    policy: PolicySet
    vault: PseudonymVault
    audit: AuditLog
    enclave: ObjectStore
    tickets: TicketStore
    auth: Authenticator
    as_of: Optional[date] = None


def load_ruleset(config: Config) -> RuleSet:
    if config.rules_path is not None:
        rules = load_rules_file(config.rules_path)
        if config.strictness:
            rules = dc_replace(rules, strictness=Strictness(config.strictness))
        return rules
    return load_default_rules(
        strictness=Strictness(config.strictness) if config.strictness else None
    )


def build_context(
    config: Config,
    clock: Callable[[], float] = time.time,
    as_of: Optional[date] = None,
) -> GatewayContext:
    rules = load_ruleset(config)
    policy = (
        load_policy_file(config.policy_path)
        if config.policy_path is not None
        else load_default_policy()
    )
    key = load_vault_key(config.vault_key_path)
    audit = AuditLog(config.audit_path)
    vault = PseudonymVault(
        str(config.vault_path),
        key,
        audit_hook=lambda action, ref, outcome, principal: audit.append(
            principal or "vault", action, ref, outcome
        ),
    )
    accounts = load_accounts(config.accounts_path) if config.accounts_path else {}
    auth = Authenticator(
        accounts,
        clock=clock,
        session_ttl=config.session_ttl_seconds,
        audit_hook=lambda principal, action, ref, outcome: audit.append(
            principal, action, ref, outcome
        ),
    )
    tickets = TicketStore(config.quarantine_root, rules, vault, as_of=as_of)
    enclave = ObjectStore(config.enclave_root)
    return GatewayContext(
        config=config,
        rules=rules,
        policy=policy,
        vault=vault,
        audit=audit,
        enclave=enclave,
        tickets=tickets,
        auth=auth,
        as_of=as_of,
    )


def _error(status: int, message: str) -> JSONResponse:
    return JSONResponse(status_code=status, content={"error": message})


def _bearer_token(request: Request) -> Optional[str]:
    header = request.headers.get("authorization", "")
    if header.lower().startswith("bearer "):
        return header.split(" ", 1)[1].strip()
    return None


def _object_flow(session: Session, source: Zone) -> FlowRequest:
    return FlowRequest(
        principal=Principal(session.principal, session.mfa_verified, PrincipalMode.SERVICE),
        source=source,
        dest=Zone.ENCLAVE,
        channel=Channel.S3,
        payload=PayloadClass.OPAQUE,
    )


def _ingress_flow(session: Session) -> FlowRequest:
    # the pipeline only ever writes de-identified output; the policy
    # question is whether that write is admissible at all
    return FlowRequest(
        principal=Principal(session.principal, session.mfa_verified, PrincipalMode.SERVICE),
        source=Zone.HOSPITAL_NET,
        dest=Zone.ENCLAVE,
        channel=Channel.FHIR,
        payload=PayloadClass.DEID_VERIFIED,
    )


def _cleared_key(resource: Resource) -> tuple[str, str]:
    if resource.kind is ResourceKind.DICOM_STUDY_META:
        rid = resource.id or "study-" + hashlib.sha256(
            serialize_resource(resource).encode()
        ).hexdigest()[:16]
        return DICOM_BUCKET, f"{rid}.json"
    return FHIR_BUCKET, f"{resource.kind.value}/{resource.id}.json"


def build_app(
    config: Config,
    clock: Callable[[], float] = time.time,
    as_of: Optional[date] = None,
) -> FastAPI:
    ctx = build_context(config, clock=clock, as_of=as_of)
    app = FastAPI(title="enclave-gate", version=__version__)
    app.state.ctx = ctx

    def session_of(request: Request) -> Optional[Session]:
        token = _bearer_token(request)
        if token is None:
            return None
        return ctx.auth.session(token)

    async def storage_failure_handler(request: Request, exc: Exception):
        return _error(503, "storage failure")

    for _exc_cls in _STORAGE_ERRORS:
        app.add_exception_handler(_exc_cls, storage_failure_handler)

    # ------------------------------------------------------------------
    # auth and health
    # ------------------------------------------------------------------

    @app.post("/auth/login")
    async def login(request: Request):
        try:
            body = await request.json()
        except ValueError:
            return _error(422, "body must be JSON")
        if not isinstance(body, dict):
            return _error(422, "body must be a JSON object")
        principal = body.get("principal", "")
        password = body.get("password", "")
        totp_code = body.get("totp_code", "")
        if not all(isinstance(v, str) for v in (principal, password, totp_code)):
            return _error(422, "principal, password, totp_code must be strings")
        try:
            session = ctx.auth.login(principal, password, totp_code)
        except Unauthorized:
            return _error(401, "unauthorized")
        return {
            "token": session.token,
            "principal": session.principal,
            "privileges": sorted(session.privileges),
            "expires_at": session.expires_at,
        }

    @app.get("/healthz")
    async def healthz():
        return {"status": "ok", "version": __version__}

    # ------------------------------------------------------------------
    # ingress pipeline
    # ------------------------------------------------------------------

    async def _ingest(request: Request, kind_hint: Optional[ResourceKind], ref: str):
        session = session_of(request)
        if session is None:
            ctx.audit.append("anonymous", AuditAction.INGEST, ref, "rejected: no session")
            return _error(401, "unauthorized")
        if not session.allows("ingest"):
            ctx.audit.append(
                session.principal, AuditAction.INGEST, ref, "rejected: missing privilege"
            )
            return _error(403, "forbidden")

        body = await request.body()
        try:
            parsed = parse_resource(body, kind_hint=kind_hint)
            if parsed.kind is ResourceKind.BUNDLE:
                resources = [sub for _, sub in split_bundle(parsed)[1]]
            else:
                resources = [parsed]
        except (MalformedPayload, UnsupportedKind) as exc:
            ctx.audit.append(
                session.principal, AuditAction.INGEST, ref, f"rejected: {exc}"
            )
            return _error(422, str(exc))
        if not resources:
            ctx.audit.append(session.principal, AuditAction.INGEST, ref, "rejected: empty bundle")
            return _error(422, "empty bundle")

        decision = check_flow(_ingress_flow(session), ctx.policy)
        if decision.verdict is Verdict.DENY:
            ctx.audit.append(
                session.principal,
                AuditAction.POLICY_DENY,
                ref,
                f"denied by {decision.trace[-1]}",
            )
            return _error(403, f"policy denied by {decision.trace[-1]}")

        # phase 1: everything fallible that needs the vault
        outcomes: list[DeidOutcome] = []
        for resource in resources:
            if resource.kind is ResourceKind.DICOM_STUDY_META:
                outcomes.append(deidentify_dicom(resource, ctx.rules, ctx.vault, as_of=ctx.as_of))
            else:
                outcomes.append(deidentify(resource, ctx.rules, ctx.vault, as_of=ctx.as_of))

        # phase 2: account for every resource in the audit trail
        planned: list[tuple[DeidOutcome, str, str, str]] = []
        for outcome in outcomes:
            if outcome.cleared:
                bucket, key = _cleared_key(outcome.resource)
                ctx.audit.append(
                    session.principal,
                    AuditAction.CLEARED,
                    f"{bucket}/{key}",
                    "ok",
                )
                planned.append((outcome, bucket, key, ""))
            else:
                ticket_id = ctx.tickets.new_id()
                ctx.audit.append(
                    session.principal,
                    AuditAction.QUARANTINED,
                    ticket_id,
                    f"{len(outcome.findings)} findings",
                )
                planned.append((outcome, "", "", ticket_id))

        # phase 3: apply
        cleared_ids: list[str] = []
        ticket_ids: list[str] = []
        for outcome, bucket, key, ticket_id in planned:
            if outcome.cleared:
                ctx.enclave.put(
                    bucket,
                    key,
                    serialize_resource(outcome.resource).encode("utf-8"),
                    Attestation.DEID_VERIFIED,
                    session.principal,
                )
                cleared_ids.append(outcome.resource.id)
            else:
                ctx.tickets.create(
                    outcome.resource, outcome.working, outcome.findings, ticket_id=ticket_id
                )
                ticket_ids.append(ticket_id)

        status = 202 if ticket_ids else 200
        return JSONResponse(
            status_code=status,
            content={"cleared": cleared_ids, "quarantined": ticket_ids},
        )

    @app.post("/ingress/fhir")
    async def ingress_fhir(request: Request):
        return await _ingest(request, None, "ingress/fhir")

    @app.post("/ingress/dicom-meta")
    async def ingress_dicom(request: Request):
        return await _ingest(request, ResourceKind.DICOM_STUDY_META, "ingress/dicom-meta")

    # ------------------------------------------------------------------
    # object pathway
    # ------------------------------------------------------------------

    def _object_gate(
        request: Request, bucket: str, key: str, action: AuditAction, source: Zone
    ):
        """Common auth + policy front for the object endpoints.

        Returns (session, None) when the request may proceed, or
        (None, response) with the rejection already audited.
        """
        ref = f"{bucket}/{key}" if key else bucket
        session = session_of(request)
        if session is None:
            ctx.audit.append("anonymous", action, ref, "rejected: no session")
            return None, _error(401, "unauthorized")
        if not session.allows("object-rw"):
            ctx.audit.append(session.principal, action, ref, "rejected: missing privilege")
            return None, _error(403, "forbidden")
        decision = check_flow(_object_flow(session, source), ctx.policy)
        if decision.verdict is Verdict.DENY:
            ctx.audit.append(
                session.principal,
                AuditAction.POLICY_DENY,
                ref,
                f"denied by {decision.trace[-1]}",
            )
            return None, _error(403, f"policy denied by {decision.trace[-1]}")
        return session, None

    @app.put("/objects/{bucket}/{key:path}")
    async def put_object(bucket: str, key: str, request: Request):
        session, rejection = _object_gate(
            request, bucket, key, AuditAction.OBJECT_PUT, Zone.HOSPITAL_NET
        )
        if rejection is not None:
            return rejection
        ref = f"{bucket}/{key}"
        try:
            check_bucket(bucket)
            check_key(key)
        except BadName as exc:
            ctx.audit.append(session.principal, AuditAction.OBJECT_PUT, ref, "rejected: bad name")
            return _error(400, str(exc))
        attestation = request.headers.get("x-attestation")
        if attestation is None:
            ctx.audit.append(
                session.principal, AuditAction.OBJECT_PUT, ref, "rejected: no attestation"
            )
            return _error(400, "X-Attestation header required")
        if attestation != Attestation.OPERATOR_ATTESTED.value:
            # DeidVerified is earned through the pipeline, never claimed
            ctx.audit.append(
                session.principal,
                AuditAction.OBJECT_PUT,
                ref,
                f"rejected: bad attestation {attestation!r}",
            )
            return _error(400, "attestation must be OperatorAttested")
        data = await request.body()
        ctx.audit.append(session.principal, AuditAction.OBJECT_PUT, ref, "ok")
        obj = ctx.enclave.put(
            bucket, key, data, Attestation.OPERATOR_ATTESTED, session.principal
        )
        return JSONResponse(
            status_code=201,
            content={
                "bucket": bucket,
                "key": key,
                "content_digest": obj.content_digest.hex(),
                "size": len(data),
            },
        )

    @app.get("/objects/{bucket}/{key:path}")
    async def get_object(bucket: str, key: str, request: Request):
        session, rejection = _object_gate(
            request, bucket, key, AuditAction.OBJECT_GET, Zone.ENCLAVE
        )
        if rejection is not None:
            return rejection
        ref = f"{bucket}/{key}"
        try:
            obj = ctx.enclave.get(bucket, key)
        except (ObjectNotFound, BadName):
            ctx.audit.append(session.principal, AuditAction.OBJECT_GET, ref, "rejected: not found")
            return _error(404, "no such object")
        ctx.audit.append(session.principal, AuditAction.OBJECT_GET, ref, "ok")
        return Response(
            content=obj.data,
            media_type="application/octet-stream",
            headers={
                "X-Content-Digest": obj.content_digest.hex(),
                "X-Attestation": obj.attestation.value,
            },
        )

    @app.delete("/objects/{bucket}/{key:path}")
    async def delete_object(bucket: str, key: str, request: Request):
        session, rejection = _object_gate(
            request, bucket, key, AuditAction.OBJECT_PUT, Zone.ENCLAVE
        )
        if rejection is not None:
            return rejection
        ref = f"{bucket}/{key}"
        if not ctx.enclave.exists(bucket, key):
            ctx.audit.append(session.principal, AuditAction.OBJECT_PUT, ref, "rejected: not found")
            return _error(404, "no such object")
        ctx.audit.append(session.principal, AuditAction.OBJECT_PUT, ref, "deleted")
        try:
            ctx.enclave.delete(bucket, key)
        except ObjectNotFound:
            return _error(404, "no such object")
        return {"deleted": ref}

    @app.get("/objects/{bucket}")
    async def list_objects(bucket: str, request: Request):
        session, rejection = _object_gate(
            request, bucket, "", AuditAction.OBJECT_GET, Zone.ENCLAVE
        )
        if rejection is not None:
            return rejection
        try:
            summaries = ctx.enclave.list(bucket)
        except BadName as exc:
            return _error(400, str(exc))
        ctx.audit.append(session.principal, AuditAction.OBJECT_GET, bucket, "list")
        return {"bucket": bucket, "objects": [s.to_json() for s in summaries]}

    # ------------------------------------------------------------------
    # quarantine review
    # ------------------------------------------------------------------

    def _review_session(request: Request):
        session = session_of(request)
        if session is None:
            return None, _error(401, "unauthorized")
        if not session.allows("review"):
            return None, _error(403, "forbidden")
        return session, None

    def _ticket_json(ticket) -> dict:
        shown = ticket.working if ticket.working is not None else ticket.original
        return {
            "id": ticket.id,
            "kind": ticket.original.kind.value,
            "state": ticket.state.value,
            "created_at": ticket.created_at,
            "reject_reason": ticket.reject_reason,
            "findings": [f.to_json() for f in ticket.findings],
            "edits": [e.to_json() for e in ticket.edits],
            "elements": [
                {"path": path, "kind": value.kind.value, "text": value.display_text}
                for path, value in sorted(shown.elements.items())
            ],
            "remaining": len(ticket.findings),
        }

    @app.get("/quarantine")
    async def list_quarantine(request: Request):
        session, rejection = _review_session(request)
        if rejection is not None:
            return rejection
        return {"tickets": [t.summary() for t in ctx.tickets.list()]}

    @app.get("/quarantine/{ticket_id}")
    async def get_ticket(ticket_id: str, request: Request):
        session, rejection = _review_session(request)
        if rejection is not None:
            return rejection
        try:
            ticket = ctx.tickets.get(ticket_id)
        except TicketNotFound:
            return _error(404, "no such ticket")
        return _ticket_json(ticket)

    @app.post("/quarantine/{ticket_id}/edits")
    async def post_edit(ticket_id: str, request: Request):
        session, rejection = _review_session(request)
        if rejection is not None:
            return rejection
        try:
            body = await request.json()
        except ValueError:
            return _error(422, "body must be JSON")
        path = body.get("path") if isinstance(body, dict) else None
        action_raw = body.get("action") if isinstance(body, dict) else None
        if not isinstance(path, str) or not path:
            return _error(422, "path required")
        try:
            action = EditAction(action_raw)
        except ValueError:
            return _error(422, f"action must be one of {[a.value for a in EditAction]}")
        try:
            before = ctx.tickets.get(ticket_id)
        except TicketNotFound:
            return _error(404, "no such ticket")
        if before.state.value not in ("Quarantined", "InReview"):
            return _error(409, f"ticket {ticket_id} is {before.state.value}")
        ctx.audit.append(
            session.principal,
            AuditAction.REVIEW_EDIT,
            ticket_id,
            f"{action.value} {path}",
        )
        try:
            ticket = ctx.tickets.apply_edit(ticket_id, path, action, session.principal)
        except IllegalTransition as exc:
            return _error(409, str(exc))
        return _ticket_json(ticket)

    @app.post("/quarantine/{ticket_id}/approve")
    async def post_approve(ticket_id: str, request: Request):
        session, rejection = _review_session(request)
        if rejection is not None:
            return rejection
        try:
            before = ctx.tickets.get(ticket_id)
        except TicketNotFound:
            return _error(404, "no such ticket")
        try:
            ticket = ctx.tickets.approve(ticket_id, session.principal)
        except FindingsRemain as exc:
            return _error(412, f"findings remain: {exc}")
        except IllegalTransition as exc:
            return _error(409, str(exc))
        bucket, key = _cleared_key(ticket.working)
        try:
            ctx.audit.append(session.principal, AuditAction.APPROVE, ticket_id, f"{bucket}/{key}")
            ctx.enclave.put(
                bucket,
                key,
                serialize_resource(ticket.working).encode("utf-8"),
                Attestation.DEID_VERIFIED,
                session.principal,
            )
        except _STORAGE_ERRORS:
            ctx.tickets.revert(before)
            return _error(503, "storage failure")
        return {
            "id": ticket_id,
            "state": ticket.state.value,
            "cleared_id": ticket.working.id,
            "object": f"{bucket}/{key}",
        }

    @app.post("/quarantine/{ticket_id}/reject")
    async def post_reject(ticket_id: str, request: Request):
        session, rejection = _review_session(request)
        if rejection is not None:
            return rejection
        try:
            body = await request.json()
        except ValueError:
            body = {}
        reason = body.get("reason", "") if isinstance(body, dict) else ""
        try:
            before = ctx.tickets.get(ticket_id)
        except TicketNotFound:
            return _error(404, "no such ticket")
        if before.state.value not in ("Quarantined", "InReview"):
            return _error(409, f"ticket {ticket_id} is {before.state.value}")
        ctx.audit.append(session.principal, AuditAction.REJECT, ticket_id, reason or "rejected")
        try:
            ticket = ctx.tickets.reject(ticket_id, reason, session.principal)
        except IllegalTransition as exc:
            return _error(409, str(exc))
        return {"id": ticket_id, "state": ticket.state.value}

    # ------------------------------------------------------------------
    # policy and audit access
    # ------------------------------------------------------------------

    @app.post("/policy/check")
    async def policy_check(request: Request):
        session = session_of(request)
        if session is None:
            return _error(401, "unauthorized")
        try:
            body = await request.json()
        except ValueError:
            return _error(422, "body must be JSON")
        if not isinstance(body, dict):
            return _error(422, "body must be a JSON object")
        try:
            flow = FlowRequest(
                principal=Principal(
                    session.principal,
                    bool(body.get("mfa", False)),
                    PrincipalMode(body.get("mode", "Service")),
                ),
                source=Zone(body["from"]),
                dest=Zone(body["to"]),
                channel=Channel(body["channel"]),
                payload=PayloadClass(body.get("payload", "Opaque")),
                flags=frozenset(ContextFlag(f) for f in body.get("flags", [])),
            )
        except KeyError as exc:
            return _error(422, f"missing field {exc.args[0]!r}")
        except ValueError as exc:
            return _error(422, str(exc))
        decision = check_flow(flow, ctx.policy)
        return decision.to_json()

    @app.get("/audit")
    async def audit_query(request: Request):
        session = session_of(request)
        if session is None:
            return _error(401, "unauthorized")
        params = request.query_params
        try:
            action = AuditAction(params["action"]) if "action" in params else None
            seq_from = int(params["seq_from"]) if "seq_from" in params else None
            seq_to = int(params["seq_to"]) if "seq_to" in params else None
        except ValueError as exc:
            return _error(422, str(exc))
        entries = ctx.audit.query(
            principal=params.get("principal"),
            action=action,
            seq_from=seq_from,
            seq_to=seq_to,
        )
        return {"entries": [e.to_json() for e in entries]}

    @app.get("/audit/verify")
    async def audit_verify(request: Request):
        session = session_of(request)
        if session is None:
            return _error(401, "unauthorized")
        return ctx.audit.verify().to_json()

    return app


def serve(config: Config) -> None:  # pragma: no cover - thin uvicorn wrapper
    import uvicorn

    host, _, port = config.listen.partition(":")
    uvicorn.run(build_app(config), host=host or "127.0.0.1", port=int(port or 8470))
