"""Configuration: one JSON file, overridable per key from the environment.

Environment variables use the ENCLAVE_GATE_ prefix and win over the
file; the file wins over built-in defaults.  Paths in the file are
resolved relative to the file's directory so a config directory can be
moved as a unit.
"""

from __future__ import annotations

import base64
import json
import os
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Mapping, Optional

from .auth import Account, hash_password  # noqa: F401  (hash_password re-exported for ops)


class ConfigError(Exception):
    pass


ENV_PREFIX = "ENCLAVE_GATE_"

_PATH_KEYS = (
    "enclave_root",
    "quarantine_root",
    "vault_path",
    "vault_key_path",
    "audit_path",
    "policy_path",
    "rules_path",
    "accounts_path",
)


@dataclass(frozen=True)
class Config:
    listen: str = "127.0.0.1:8470"
    enclave_root: Path = Path("data/enclave")
    quarantine_root: Path = Path("data/quarantine")
    vault_path: Path = Path("data/vault.db")
    vault_key_path: Path = Path("data/vault.key")
    audit_path: Path = Path("data/audit.log")
    policy_path: Optional[Path] = None  # None -> packaged default rules
    rules_path: Optional[Path] = None
    accounts_path: Optional[Path] = None
    session_ttl_seconds: int = 12 * 3600
    strictness: Optional[str] = None

    @staticmethod
    def for_dir(base: str | os.PathLike) -> "Config":
        base = Path(base)
        return Config(
            enclave_root=base / "enclave",
            quarantine_root=base / "quarantine",
            vault_path=base / "vault.db",
            vault_key_path=base / "vault.key",
            audit_path=base / "audit.log",
        )


def _coerce(key: str, value, base: Optional[Path]):
    if key in _PATH_KEYS:
        if value is None:
            return None
        path = Path(value)
        if base is not None and not path.is_absolute():
            path = base / path
        return path
    if key == "session_ttl_seconds":
        ttl = int(value)
        if ttl <= 0:
            raise ConfigError("session_ttl_seconds must be positive")
        return ttl
    return value


def load_config(path: Optional[str | os.PathLike] = None, env: Mapping[str, str] = os.environ) -> Config:
    config = Config()
    if path is not None:
        file_path = Path(path)
        try:
            doc = json.loads(file_path.read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from exc
        except ValueError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError("config root must be a JSON object")
        known = set(Config.__dataclass_fields__)
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        base = file_path.resolve().parent
        config = replace(
            config, **{k: _coerce(k, v, base) for k, v in doc.items()}
        )
    for key in Config.__dataclass_fields__:
        raw = env.get(ENV_PREFIX + key.upper())
        if raw is not None:
            config = replace(config, **{key: _coerce(key, raw, None)})
    return config


def load_vault_key(path: str | os.PathLike) -> bytes:
    """Accepts 32 raw bytes or 64 hex characters (optionally newline-ended)."""
    raw = Path(path).read_bytes()
    if len(raw) == 32:
        return raw
    text = raw.decode("ascii", errors="replace").strip()
    if len(text) == 64:
        try:
            return bytes.fromhex(text)
        except ValueError:
            pass
    raise ConfigError(f"vault key file must hold 32 raw bytes or 64 hex chars, got {len(raw)} bytes")


def load_accounts(path: str | os.PathLike) -> dict[str, Account]:
    """Accounts file: {"accounts": [{principal, password_hash,
    totp_secret_base32, privileges}, ...]}"""
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot load accounts: {exc}") from exc
    accounts: dict[str, Account] = {}
    for row in doc.get("accounts", []):
        try:
            principal = row["principal"]
            secret = base64.b32decode(row["totp_secret_base32"], casefold=True)
            account = Account(
                principal=principal,
                password_hash=row["password_hash"],
                totp_secret=secret,
                privileges=frozenset(row.get("privileges", [])),
            )
        except (KeyError, ValueError) as exc:
            raise ConfigError(f"bad account entry: {exc}") from exc
        if principal in accounts:
            raise ConfigError(f"duplicate account {principal!r}")
        accounts[principal] = account
    return accounts
