"""Zone flow policy: who may move what, over which channel, between which zones.

The rule language is a flat list of ALLOW/DENY lines evaluated top to
bottom; the first matching rule decides and anything unmatched is
denied.  Small enough that an auditor can replay any decision by hand.

Grammar, one rule per line (# starts a comment):

    ALLOW|DENY <id>: <predicate> [<predicate> ...]

    predicate := from=<zone>[|<zone>...]   source zone is one of the listed
                 to=<zone>[|<zone>...]
                 channel=<ch>[|<ch>...]
                 payload=<pc>[|<pc>...]
                 mode=<m>[|<m>...]
                 mfa=true|false
                 flag=<flag>               flag must be present
                 !flag=<flag>              flag must be absent

Predicates on one line are a conjunction.  flag/!flag may repeat;
the other keys may appear at most once per rule.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from importlib import resources
from itertools import product
from pathlib import Path
from typing import Iterator, Optional


class Zone(str, Enum):
    HOSPITAL_NET = "HospitalNet"
    ENCLAVE = "Enclave"
    INTERNET = "Internet"
    LAB_VLAN = "LabVlan"


class Channel(str, Enum):
    SSH = "SSH"
    HTTP = "HTTP"
    NFS = "NFS"
    SMB = "SMB"
    S3 = "S3"
    FHIR = "FHIR"


class PayloadClass(str, Enum):
    PHI = "PHI"
    DEID_VERIFIED = "DeidVerified"
    ANONYMOUS_RESEARCH = "AnonymousResearch"
    OPAQUE = "Opaque"


class PrincipalMode(str, Enum):
    MANAGED_CLUSTER = "ManagedCluster"
    SELF_PROVISIONED = "SelfProvisioned"
    SERVICE = "Service"
    EXTERNAL = "External"


class ContextFlag(str, Enum):
    VIA_BASTION = "ViaBastion"
    VIA_PROXY = "ViaProxy"
    CONTAINER_USER_NS = "ContainerUserNs"
    HOST_UID_WRITE = "HostUidWrite"


class Verdict(str, Enum):
    ALLOW = "Allow"
    DENY = "Deny"


class PolicyParseError(Exception):
    def __init__(self, message: str, line: Optional[int] = None, rule_id: Optional[str] = None):
        self.line = line
        self.rule_id = rule_id
        where = []
        if line is not None:
            where.append(f"line {line}")
        if rule_id is not None:
            where.append(f"rule {rule_id}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)


@dataclass(frozen=True)
class Principal:
    id: str
    mfa_verified: bool
    mode: PrincipalMode


@dataclass(frozen=True)
class FlowRequest:
    principal: Principal
    source: Zone
    dest: Zone
    channel: Channel
    payload: PayloadClass
    flags: frozenset[ContextFlag] = frozenset()


@dataclass(frozen=True)
class PolicyRule:
    verdict: Verdict
    rule_id: str
    sources: Optional[frozenset[Zone]] = None
    dests: Optional[frozenset[Zone]] = None
    channels: Optional[frozenset[Channel]] = None
    payloads: Optional[frozenset[PayloadClass]] = None
    modes: Optional[frozenset[PrincipalMode]] = None
    mfa: Optional[bool] = None
    require_flags: frozenset[ContextFlag] = frozenset()
    forbid_flags: frozenset[ContextFlag] = frozenset()

    def matches(self, request: FlowRequest) -> bool:
        if self.sources is not None and request.source not in self.sources:
            return False
        if self.dests is not None and request.dest not in self.dests:
            return False
        if self.channels is not None and request.channel not in self.channels:
            return False
        if self.payloads is not None and request.payload not in self.payloads:
            return False
        if self.modes is not None and request.principal.mode not in self.modes:
            return False
        if self.mfa is not None and request.principal.mfa_verified != self.mfa:
            return False
        if not self.require_flags <= request.flags:
            return False
        if self.forbid_flags & request.flags:
            return False
        return True


@dataclass(frozen=True)
class PolicySet:
    rules: tuple[PolicyRule, ...] = ()


@dataclass(frozen=True)
class Decision:
    verdict: Verdict
    trace: tuple[str, ...] = field(default_factory=tuple)

    def to_json(self) -> dict:
        return {"verdict": self.verdict.value, "trace": list(self.trace)}


DEFAULT_RULE_ID = "default"


def check_flow(request: FlowRequest, rules: PolicySet) -> Decision:
    trace: list[str] = []
    for rule in rules.rules:
        trace.append(rule.rule_id)
        if rule.matches(request):
            return Decision(rule.verdict, tuple(trace))
    trace.append(DEFAULT_RULE_ID)
    return Decision(Verdict.DENY, tuple(trace))


FLAG_ORDER = tuple(ContextFlag)


def enumerate_matrix(rules: PolicySet) -> Iterator[tuple[FlowRequest, Decision]]:
    """Every combination of the finite request domain, in a fixed order.

    Iteration order: source, dest, channel, payload, mode in enum
    declaration order; flag subsets by bitmask over FLAG_ORDER; mfa
    False before True.
    """
    for source, dest, channel, payload, mode in product(
        Zone, Zone, Channel, PayloadClass, PrincipalMode
    ):
        for bits in range(1 << len(FLAG_ORDER)):
            flags = frozenset(f for i, f in enumerate(FLAG_ORDER) if bits >> i & 1)
            for mfa in (False, True):
                request = FlowRequest(
                    principal=Principal("matrix", mfa, mode),
                    source=source,
                    dest=dest,
                    channel=channel,
                    payload=payload,
                    flags=flags,
                )
                yield request, check_flow(request, rules)


def _parse_values(enum_cls, raw: str, line_no: int, rule_id: str) -> frozenset:
    values = []
    for part in raw.split("|"):
        try:
            values.append(enum_cls(part))
        except ValueError:
            raise PolicyParseError(
                f"unknown {enum_cls.__name__} value {part!r}", line_no, rule_id
            ) from None
    return frozenset(values)


_SINGLE_KEYS = ("from", "to", "channel", "payload", "mode", "mfa")


def parse_rules(text: str) -> PolicySet:
    rules: list[PolicyRule] = []
    seen_ids: set[str] = set()
    for line_no, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.split("#", 1)[0].strip()
        if not line:
            continue
        head, sep, rest = line.partition(":")
        if not sep:
            raise PolicyParseError("missing ':' after rule id", line_no)
        head_parts = head.split()
        if len(head_parts) != 2:
            raise PolicyParseError(f"malformed rule head {head!r}", line_no)
        verdict_word, rule_id = head_parts
        if verdict_word not in ("ALLOW", "DENY"):
            raise PolicyParseError(f"unknown verdict {verdict_word!r}", line_no)
        if rule_id in seen_ids:
            raise PolicyParseError("duplicate rule id", line_no, rule_id)
        seen_ids.add(rule_id)
        verdict = Verdict.ALLOW if verdict_word == "ALLOW" else Verdict.DENY

        fields: dict[str, object] = {}
        require: set[ContextFlag] = set()
        forbid: set[ContextFlag] = set()
        seen_keys: set[str] = set()
        tokens = rest.split()
        if not tokens:
            raise PolicyParseError("rule has no predicates", line_no, rule_id)
        for token in tokens:
            key, sep, value = token.partition("=")
            if not sep or not value:
                raise PolicyParseError(f"malformed predicate {token!r}", line_no, rule_id)
            if key in _SINGLE_KEYS:
                if key in seen_keys:
                    raise PolicyParseError(f"repeated predicate {key!r}", line_no, rule_id)
                seen_keys.add(key)
            if key == "from":
                fields["sources"] = _parse_values(Zone, value, line_no, rule_id)
            elif key == "to":
                fields["dests"] = _parse_values(Zone, value, line_no, rule_id)
            elif key == "channel":
                fields["channels"] = _parse_values(Channel, value, line_no, rule_id)
            elif key == "payload":
                fields["payloads"] = _parse_values(PayloadClass, value, line_no, rule_id)
            elif key == "mode":
                fields["modes"] = _parse_values(PrincipalMode, value, line_no, rule_id)
            elif key == "mfa":
                if value not in ("true", "false"):
                    raise PolicyParseError(f"mfa must be true or false, not {value!r}", line_no, rule_id)
                fields["mfa"] = value == "true"
            elif key == "flag":
                require.update(_parse_values(ContextFlag, value, line_no, rule_id))
            elif key == "!flag":
                forbid.update(_parse_values(ContextFlag, value, line_no, rule_id))
            else:
                raise PolicyParseError(f"unknown predicate key {key!r}", line_no, rule_id)
        if require & forbid:
            raise PolicyParseError("flag required and forbidden at once", line_no, rule_id)
        rules.append(
            PolicyRule(
                verdict=verdict,
                rule_id=rule_id,
                require_flags=frozenset(require),
                forbid_flags=frozenset(forbid),
                **fields,
            )
        )
    return PolicySet(tuple(rules))


def _dump_values(values) -> str:
    order = {member: i for i, member in enumerate(type(next(iter(values))))}
    return "|".join(v.value for v in sorted(values, key=order.__getitem__))


def dump_rules(rules: PolicySet) -> str:
    lines = []
    for rule in rules.rules:
        parts = [f"{'ALLOW' if rule.verdict is Verdict.ALLOW else 'DENY'} {rule.rule_id}:"]
        if rule.sources is not None:
            parts.append(f"from={_dump_values(rule.sources)}")
        if rule.dests is not None:
            parts.append(f"to={_dump_values(rule.dests)}")
        if rule.channels is not None:
            parts.append(f"channel={_dump_values(rule.channels)}")
        if rule.payloads is not None:
            parts.append(f"payload={_dump_values(rule.payloads)}")
        if rule.modes is not None:
            parts.append(f"mode={_dump_values(rule.modes)}")
        if rule.mfa is not None:
            parts.append(f"mfa={'true' if rule.mfa else 'false'}")
        for flag in sorted(rule.require_flags, key=FLAG_ORDER.index):
            parts.append(f"flag={flag.value}")
        for flag in sorted(rule.forbid_flags, key=FLAG_ORDER.index):
            parts.append(f"!flag={flag.value}")
        lines.append(" ".join(parts))
    return "\n".join(lines) + "\n"


def load_rules(path: str | Path) -> PolicySet:
    return parse_rules(Path(path).read_text(encoding="utf-8"))


def load_default() -> PolicySet:
    text = resources.files("enclave_gate.data").joinpath("policy.rules").read_text("utf-8")
    return parse_rules(text)
