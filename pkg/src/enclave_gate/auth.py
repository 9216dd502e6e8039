"""Two-factor authentication and server-side sessions.

The second factor is a time-based one-time password (30 second steps,
SHA-1, 6 or 8 digits, one step of clock tolerance either way).  Login
failures are deliberately uninformative: the caller learns only
"Unauthorized", never which factor failed.  Sessions are plain server
records keyed by an unguessable bearer token, so revocation is a dict
delete rather than a token-format concern.
"""

from __future__ import annotations

import hashlib
import hmac
import secrets
import struct
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

PRIVILEGES = frozenset({"ingest", "review", "reidentify", "export", "object-rw"})

TOTP_STEP_SECONDS = 30
TOTP_WINDOW_STEPS = 1
SESSION_TTL_SECONDS = 12 * 3600
LOCKOUT_THRESHOLD = 5
LOCKOUT_WINDOW_SECONDS = 60
LOCKOUT_SECONDS = 30

PBKDF2_ITERATIONS = 60_000


class AuthError(Exception):
    pass


class Unauthorized(AuthError):
    """Single generic failure; carries no hint about which factor failed."""


def hotp(secret: bytes, counter: int, digits: int = 6) -> str:
    if not secret:
        raise ValueError("empty secret")
    mac = hmac.new(secret, struct.pack(">Q", counter), hashlib.sha1).digest()
    offset = mac[-1] & 0x0F
    code = struct.unpack(">I", mac[offset : offset + 4])[0] & 0x7FFFFFFF
    return str(code % (10**digits)).zfill(digits)


def totp(secret: bytes, unix_time: float, digits: int = 6, step: int = TOTP_STEP_SECONDS) -> str:
    return hotp(secret, int(unix_time // step), digits)


def verify_totp(secret: bytes, code: str, unix_time: float) -> bool:
    """True iff code matches the current, previous, or next time step.

    All three candidates are always computed and compared in constant
    time; malformed codes return False rather than raising.
    """
    if not secret:
        raise ValueError("empty secret")
    if not isinstance(code, str) or len(code) not in (6, 8) or not code.isdigit():
        return False
    step_now = int(unix_time // TOTP_STEP_SECONDS)
    good = 0
    for offset in (-TOTP_WINDOW_STEPS, 0, TOTP_WINDOW_STEPS):
        step = step_now + offset
        if step < 0:
            # counters start at zero; a window reaching before the epoch
            # has no candidate there
            continue
        candidate = hotp(secret, step, len(code))
        good |= int(hmac.compare_digest(candidate, code))
    return bool(good)


def hash_password(password: str, *, salt: Optional[bytes] = None, iterations: int = PBKDF2_ITERATIONS) -> str:
    if salt is None:
        salt = secrets.token_bytes(16)
    digest = hashlib.pbkdf2_hmac("sha256", password.encode("utf-8"), salt, iterations)
    return f"pbkdf2${iterations}${salt.hex()}${digest.hex()}"


def check_password(password: str, stored: str) -> bool:
    try:
        scheme, iter_text, salt_hex, digest_hex = stored.split("$")
        if scheme != "pbkdf2":
            return False
        iterations = int(iter_text)
        salt = bytes.fromhex(salt_hex)
        expected = bytes.fromhex(digest_hex)
    except (ValueError, AttributeError):
        return False
    digest = hashlib.pbkdf2_hmac("sha256", password.encode("utf-8"), salt, iterations)
    return hmac.compare_digest(digest, expected)


# burned on unknown principals so both paths pay the same pbkdf2 cost
_DUMMY_HASH = hash_password("decoy", salt=b"\x00" * 16)


@dataclass(frozen=True)
class Account:
    principal: str
    password_hash: str
    totp_secret: bytes
    privileges: frozenset[str] = frozenset()

    def __post_init__(self):
        unknown = self.privileges - PRIVILEGES
        if unknown:
            raise ValueError(f"unknown privileges: {sorted(unknown)}")


@dataclass(frozen=True)
class Session:
    token: str
    principal: str
    privileges: frozenset[str]
    mfa_verified: bool
    expires_at: float

    def allows(self, privilege: str) -> bool:
        return privilege in self.privileges


@dataclass
class _FailureState:
    times: list[float] = field(default_factory=list)
    locked_until: float = 0.0


class Authenticator:
    """Login, session issue/lookup, and brute-force lockout.

    audit_hook(principal, action, resource_ref, outcome) is invoked for
    every login attempt; wiring it to the audit log is the caller's job.
    """

    def __init__(
        self,
        accounts: dict[str, Account],
        clock: Callable[[], float] = time.time,
        session_ttl: float = SESSION_TTL_SECONDS,
        audit_hook: Optional[Callable[[str, str, str, str], None]] = None,
    ):
        self._accounts = dict(accounts)
        self._clock = clock
        self._ttl = session_ttl
        self._audit = audit_hook or (lambda *a: None)
        self._sessions: dict[str, Session] = {}
        self._failures: dict[str, _FailureState] = {}
        self._lock = threading.Lock()

    def _note_failure(self, principal: str, now: float) -> None:
        state = self._failures.setdefault(principal, _FailureState())
        state.times = [t for t in state.times if now - t < LOCKOUT_WINDOW_SECONDS]
        state.times.append(now)
        if len(state.times) >= LOCKOUT_THRESHOLD:
            state.locked_until = now + LOCKOUT_SECONDS
            state.times.clear()

    def login(self, principal: str, password: str, totp_code: str) -> Session:
        now = self._clock()
        with self._lock:
            state = self._failures.get(principal)
            if state and now < state.locked_until:
                self._audit(principal, "LoginFailed", "session", "locked-out")
                raise Unauthorized()
            account = self._accounts.get(principal)
            if account is None:
                check_password(password, _DUMMY_HASH)
                self._note_failure(principal, now)
                self._audit(principal, "LoginFailed", "session", "bad-credentials")
                raise Unauthorized()
            password_ok = check_password(password, account.password_hash)
            totp_ok = verify_totp(account.totp_secret, totp_code, now)
            if not (password_ok and totp_ok):
                self._note_failure(principal, now)
                self._audit(principal, "LoginFailed", "session", "bad-credentials")
                raise Unauthorized()
            self._failures.pop(principal, None)
            token = secrets.token_urlsafe(16)
            session = Session(
                token=token,
                principal=principal,
                privileges=account.privileges,
                mfa_verified=True,
                expires_at=now + self._ttl,
            )
            # audit before install: a failing audit trail must not leave
            # a usable session behind
            self._audit(principal, "Login", "session", "ok")
            self._sessions[token] = session
            return session

    def session(self, token: str) -> Optional[Session]:
        with self._lock:
            session = self._sessions.get(token)
            if session is None:
                return None
            if self._clock() >= session.expires_at:
                del self._sessions[token]
                return None
            return session

    def revoke(self, token: str) -> None:
        with self._lock:
            self._sessions.pop(token, None)

    # test seam: lets suites exercise authorization paths that real
    # logins cannot produce, e.g. a session without verified MFA
    def install_session(self, session: Session) -> None:
        with self._lock:
            self._sessions[session.token] = session
