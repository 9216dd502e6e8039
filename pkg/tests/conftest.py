import base64
import json
import time
from dataclasses import replace

from fastapi.testclient import TestClient

from enclave_gate.auth import hash_password, totp
from enclave_gate.config import Config
from enclave_gate.gateway import build_app

RFC_SECRET = b"12345678901234567890"
SECRET_B32 = base64.b32encode(RFC_SECRET).decode()

ACCOUNT_PRIVS = {
    "ingestor": ["ingest"],
    "reviewer": ["review"],
    "operator": ["object-rw"],
    "admin": ["ingest", "review", "reidentify", "export", "object-rw"],
}


def gateway_env(tmp_path, as_of=None, strictness=None, key=b"\x00" * 32):
    """A complete gateway on a throwaway directory tree.

    Returns (client, ctx); ctx is the GatewayContext so tests can reach
    the underlying stores directly.
    """
    base = tmp_path / "gw"
    cfg = Config.for_dir(base)
    base.mkdir(parents=True, exist_ok=True)
    cfg.vault_key_path.parent.mkdir(parents=True, exist_ok=True)
    cfg.vault_key_path.write_bytes(key)
    accounts = {
        "accounts": [
            {
                "principal": name,
                "password_hash": hash_password(f"pw-{name}", iterations=1000),
                "totp_secret_base32": SECRET_B32,
                "privileges": privs,
            }
            for name, privs in ACCOUNT_PRIVS.items()
        ]
    }
    accounts_path = base / "accounts.json"
    accounts_path.write_text(json.dumps(accounts), encoding="utf-8")
    cfg = replace(cfg, accounts_path=accounts_path, strictness=strictness)
    app = build_app(cfg, as_of=as_of)
    client = TestClient(app)
    return client, app.state.ctx


def login(client, principal):
    code = totp(RFC_SECRET, time.time())
    r = client.post(
        "/auth/login",
        json={"principal": principal, "password": f"pw-{principal}", "totp_code": code},
    )
    assert r.status_code == 200, r.text
    return r.json()["token"]


def bearer(token):
    return {"Authorization": f"Bearer {token}"}
