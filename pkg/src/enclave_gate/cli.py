"""Operator command line: batch de-identification, vault administration,
audit verification, policy queries, and serving the HTTP gateway.

Output discipline: commands that finish with exit code 0 or 1 print exactly
one JSON document on standard output.  Usage problems (bad flags, unreadable
paths, invalid config) go to standard error with exit code 2.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import re
import secrets
import sys
from dataclasses import replace as dc_replace
from datetime import date
from pathlib import Path
from typing import Optional, Sequence

from .audit import AuditError, AuditLog, verify_log
from .config import Config, ConfigError, load_config, load_vault_key
from .deid import deidentify
from .gateway import load_ruleset
from .model import MalformedPayload, UnsupportedKind, parse_resource, serialize_resource
from .policy import (
    Channel,
    ContextFlag,
    FlowRequest,
    PayloadClass,
    PolicyParseError,
    Principal,
    PrincipalMode,
    Verdict,
    Zone,
    check_flow,
    enumerate_matrix,
    load_default,
    load_rules,
)
from .vault import (
    ExportTampered,
    Forbidden,
    NotFound,
    Privilege,
    PseudonymScope,
    PseudonymVault,
)
from .vault import StorageFailure as VaultStorageFailure

MANIFEST_NAME = "quarantine-manifest.json"
CLI_PRINCIPAL = "operator-cli"


def _kebab(name: str) -> str:
    return re.sub(r"(?<=[a-z0-9])(?=[A-Z])", "-", name).lower()


def _choice_map(enum_cls) -> dict[str, object]:
    return {_kebab(member.value): member for member in enum_cls}


ZONES = _choice_map(Zone)
ZONES["hospital"] = Zone.HOSPITAL_NET  # short spelling, same zone
CHANNELS = _choice_map(Channel)
PAYLOADS = _choice_map(PayloadClass)
MODES = _choice_map(PrincipalMode)
FLAGS = _choice_map(ContextFlag)
SCOPES = _choice_map(PseudonymScope)


def _emit(doc: dict) -> None:
    json.dump(doc, sys.stdout, indent=2)
    sys.stdout.write("\n")


def _fail_usage(message: str) -> int:
    print(f"enclave-gate: error: {message}", file=sys.stderr)
    return 2


def _config_from(args: argparse.Namespace) -> Config:
    return load_config(getattr(args, "config", None))


def cmd_serve(args: argparse.Namespace) -> int:  # pragma: no cover - blocks
    from .gateway import serve

    serve(_config_from(args))
    return 0


def _batch_deidentify(input_dir: Path, output_dir: Path, rules, vault,
                      as_of: Optional[date]) -> dict:
    cleared = 0
    held: list[dict] = []
    failures: list[dict] = []
    for path in sorted(p for p in input_dir.iterdir() if p.is_file()):
        try:
            outcome = deidentify(parse_resource(path.read_bytes()), rules, vault, as_of)
        except VaultStorageFailure:
            raise  # fail closed: a broken vault poisons every later file
        except (MalformedPayload, UnsupportedKind, OSError, ValueError) as exc:
            failures.append({"file": path.name, "error": str(exc)})
            continue
        if outcome.cleared:
            out = output_dir / path.name
            out.write_bytes(serialize_resource(outcome.resource).encode("utf-8"))
            cleared += 1
        else:
            held.append({
                "file": path.name,
                "findings": [f.to_json() for f in outcome.findings],
            })
    manifest = output_dir / MANIFEST_NAME
    manifest.write_text(
        json.dumps({"quarantined": held}, indent=2) + "\n", encoding="utf-8"
    )
    return {
        "cleared": cleared,
        "quarantined": len(held),
        "errors": len(failures),
        "failures": failures,
        "manifest": str(manifest),
    }


def cmd_deid(args: argparse.Namespace) -> int:
    input_dir = Path(args.input_dir)
    if not input_dir.is_dir():
        return _fail_usage(f"input dir not found: {input_dir}")
    config = _config_from(args)
    if args.rules:
        config = dc_replace(config, rules_path=Path(args.rules))
    if args.strictness:
        config = dc_replace(config, strictness=args.strictness)
    if args.vault:
        config = dc_replace(config, vault_path=Path(args.vault))
    if args.key:
        config = dc_replace(config, vault_key_path=Path(args.key))
    as_of = date.fromisoformat(args.as_of) if args.as_of else None

    rules = load_ruleset(config)
    key = load_vault_key(config.vault_key_path)
    output_dir = Path(args.output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    vault = PseudonymVault(str(config.vault_path), key)
    try:
        summary = _batch_deidentify(input_dir, output_dir, rules, vault, as_of)
    finally:
        vault.close()
    _emit(summary)
    return 0 if summary["errors"] == 0 else 1


def _open_vault(config: Config, with_audit: bool) -> PseudonymVault:
    hook = None
    if with_audit:
        audit = AuditLog(config.audit_path)
        hook = lambda action, ref, outcome, principal: audit.append(
            principal or CLI_PRINCIPAL, action, ref, outcome
        )
    return PseudonymVault(str(config.vault_path), load_vault_key(config.vault_key_path),
                          audit_hook=hook)


def cmd_vault_keygen(args: argparse.Namespace) -> int:
    out = Path(args.out)
    if out.exists():
        return _fail_usage(f"refusing to overwrite existing key file {out}")
    key = secrets.token_bytes(32)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(key.hex() + "\n", encoding="utf-8")
    out.chmod(0o600)
    _emit({"out": str(out), "fingerprint": hashlib.sha256(key).hexdigest()[:16]})
    return 0


def cmd_vault_export(args: argparse.Namespace) -> int:
    config = _config_from(args)
    vault = _open_vault(config, with_audit=False)
    try:
        document = vault.export_mappings(Privilege.of("export"))
        count = vault.count()
    finally:
        vault.close()
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_bytes(document)
    _emit({"out": str(out), "count": count, "bytes": len(document)})
    return 0


def cmd_vault_import(args: argparse.Namespace) -> int:
    config = _config_from(args)
    document = Path(args.document).read_bytes()
    vault = _open_vault(config, with_audit=False)
    try:
        imported = vault.import_mappings(document, Privilege.of("export"))
    except ExportTampered as exc:
        _emit({"error": str(exc)})
        return 1
    finally:
        vault.close()
    _emit({"imported": imported})
    return 0


def cmd_vault_reidentify(args: argparse.Namespace) -> int:
    config = _config_from(args)
    scope = SCOPES[args.scope]
    vault = _open_vault(config, with_audit=True)
    try:
        source_id = vault.reidentify(
            args.pseudonym, scope, Privilege.of("reidentify"), principal=CLI_PRINCIPAL
        )
    except (NotFound, Forbidden) as exc:
        _emit({"error": str(exc)})
        return 1
    finally:
        vault.close()
    _emit({"pseudonym": args.pseudonym, "scope": scope.value, "source_id": source_id})
    return 0


def cmd_audit_verify(args: argparse.Namespace) -> int:
    config = _config_from(args)
    path = Path(args.log) if args.log else config.audit_path
    if not path.exists():
        return _fail_usage(f"audit log not found: {path}")
    report = verify_log(path)
    _emit(report.to_json())
    return 0 if report.ok else 1


def _load_policy(args: argparse.Namespace, config: Config):
    if getattr(args, "policy", None):
        return load_rules(args.policy)
    if config.policy_path is not None:
        return load_rules(config.policy_path)
    return load_default()


def cmd_policy_check(args: argparse.Namespace) -> int:
    config = _config_from(args)
    rules = _load_policy(args, config)
    request = FlowRequest(
        principal=Principal(CLI_PRINCIPAL, args.mfa, MODES[args.mode]),
        source=ZONES[getattr(args, "from")],
        dest=ZONES[args.to],
        channel=CHANNELS[args.channel],
        payload=PAYLOADS[args.payload],
        flags=frozenset(FLAGS[f] for f in args.flag or []),
    )
    decision = check_flow(request, rules)
    _emit(decision.to_json())
    return 0 if decision.verdict is Verdict.ALLOW else 1


def cmd_policy_matrix(args: argparse.Namespace) -> int:
    config = _config_from(args)
    rules = _load_policy(args, config)
    rows = []
    for request, decision in enumerate_matrix(rules):
        rows.append({
            "from": request.source.value,
            "to": request.dest.value,
            "channel": request.channel.value,
            "payload": request.payload.value,
            "mode": request.principal.mode.value,
            "flags": sorted(f.value for f in request.flags),
            "mfa": request.principal.mfa_verified,
            "verdict": decision.verdict.value,
            "rule": decision.trace[-1],
        })
    json.dump({"count": len(rows), "rows": rows}, sys.stdout, separators=(",", ":"))
    sys.stdout.write("\n")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="enclave-gate",
        description="De-identification gateway operations",
    )
    parser.add_argument("--config", help="path to the JSON config file")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name: str, func, **kwargs) -> argparse.ArgumentParser:
        p = sub.add_parser(name, **kwargs)
        p.add_argument("--config", default=argparse.SUPPRESS,
                       help="path to the JSON config file")
        p.set_defaults(func=func)
        return p

    add("serve", cmd_serve, help="run the HTTP gateway")

    deid = add("deid", cmd_deid, help="de-identify a directory of JSON files")
    deid.add_argument("--input-dir", required=True)
    deid.add_argument("--output-dir", required=True)
    deid.add_argument("--rules", help="detection rule set (JSON)")
    deid.add_argument("--strictness", choices=["standard", "strict"])
    deid.add_argument("--vault", help="pseudonym vault database")
    deid.add_argument("--key", help="vault key file")
    deid.add_argument("--as-of", help="reference date for age checks (YYYY-MM-DD)")

    vault = sub.add_parser("vault", help="pseudonym vault administration")
    vsub = vault.add_subparsers(dest="vault_command", required=True)

    def add_vault(name: str, func, **kwargs) -> argparse.ArgumentParser:
        p = vsub.add_parser(name, **kwargs)
        p.add_argument("--config", default=argparse.SUPPRESS,
                       help="path to the JSON config file")
        p.set_defaults(func=func)
        return p

    keygen = add_vault("keygen", cmd_vault_keygen, help="generate a new vault key file")
    keygen.add_argument("--out", required=True)
    export = add_vault("export", cmd_vault_export, help="write a sealed mapping export")
    export.add_argument("--out", required=True)
    imp = add_vault("import", cmd_vault_import, help="import a sealed mapping export")
    imp.add_argument("--document", required=True)
    reid = add_vault("reidentify", cmd_vault_reidentify,
                     help="resolve a pseudonym back to its source id")
    reid.add_argument("--pseudonym", required=True)
    reid.add_argument("--scope", required=True, choices=sorted(SCOPES))

    audit = sub.add_parser("audit", help="audit log operations")
    asub = audit.add_subparsers(dest="audit_command", required=True)
    verify = asub.add_parser("verify", help="verify the hash chain")
    verify.add_argument("--config", default=argparse.SUPPRESS)
    verify.add_argument("--log", help="audit log path (defaults to the config)")
    verify.set_defaults(func=cmd_audit_verify)

    policy = sub.add_parser("policy", help="zone policy queries")
    psub = policy.add_subparsers(dest="policy_command", required=True)
    check = psub.add_parser("check", help="evaluate one flow request")
    check.add_argument("--config", default=argparse.SUPPRESS)
    check.add_argument("--policy", help="policy rules file (defaults to the config)")
    check.add_argument("--from", required=True, choices=sorted(ZONES))
    check.add_argument("--to", required=True, choices=sorted(ZONES))
    check.add_argument("--channel", required=True, choices=sorted(CHANNELS))
    check.add_argument("--payload", default="opaque", choices=sorted(PAYLOADS))
    check.add_argument("--mode", default="service", choices=sorted(MODES))
    check.add_argument("--flag", action="append", choices=sorted(FLAGS))
    check.add_argument("--mfa", action="store_true")
    check.set_defaults(func=cmd_policy_check)
    matrix = psub.add_parser("matrix", help="dump every decision in the finite domain")
    matrix.add_argument("--config", default=argparse.SUPPRESS)
    matrix.add_argument("--policy", help="policy rules file (defaults to the config)")
    matrix.set_defaults(func=cmd_policy_matrix)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, PolicyParseError) as exc:
        return _fail_usage(str(exc))
    except (AuditError, VaultStorageFailure) as exc:
        return _fail_usage(f"storage failure: {exc}")
    except OSError as exc:
        return _fail_usage(str(exc))
    except ValueError as exc:
        return _fail_usage(str(exc))


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
