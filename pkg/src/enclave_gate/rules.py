"""De-identification rule set: path rules, DICOM tag rules, and detectors.

Rules are declarative and versioned; the packaged default set is a
defensible stand-in, not a certified profile (see README). Path patterns
use dotted segments where `*` matches one segment and `**` matches any run
of segments.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from enum import Enum
from importlib import resources

from .vault import PseudonymScope


class RuleParseError(ValueError):
    pass


class FindingCategory(str, Enum):
    NAME = "Name"
    MRN_OR_ID = "MRN-or-ID"
    ADDRESS = "Address"
    PHONE = "Phone"
    EMAIL = "Email"
    DATE = "Date"
    AGE_OVER_89 = "AgeOver89"
    FREE_TEXT_HIT = "FreeTextHit"
    DICOM_IDENTITY_TAG = "DicomIdentityTag"


class Strictness(str, Enum):
    STANDARD = "standard"
    STRICT = "strict"


class RuleAction(str, Enum):
    REMOVE = "remove"
    PSEUDONYMIZE = "pseudonymize"
    AGE = "age"


@dataclass(frozen=True)
class Finding:
    """One thing that must be removed before a resource may cross the boundary.

    span is (start, end) byte offsets into the element's text; whole-value
    findings span the full text. detector names the rule or detector that
    fired.
    """

    path: str
    category: FindingCategory
    span: tuple[int, int]
    detector: str

    def to_json(self) -> dict:
        return {
            "path": self.path,
            "category": self.category.value,
            "span": [self.span[0], self.span[1]],
            "detector": self.detector,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Finding":
        return cls(
            path=obj["path"],
            category=FindingCategory(obj["category"]),
            span=(obj["span"][0], obj["span"][1]),
            detector=obj["detector"],
        )


@dataclass(frozen=True)
class PathRule:
    id: str
    pattern: str
    action: RuleAction
    category: FindingCategory
    scope: PseudonymScope | None = None


@dataclass(frozen=True)
class TagRule:
    id: str
    tag: str
    action: RuleAction
    category: FindingCategory
    scope: PseudonymScope | None = None


@dataclass(frozen=True)
class Detector:
    id: str
    category: FindingCategory
    pattern: str
    min_digits: int = 0

    @property
    def regex(self) -> re.Pattern:
        return _compiled(self.pattern)


_REGEX_CACHE: dict[str, re.Pattern] = {}


def _compiled(pattern: str) -> re.Pattern:
    rx = _REGEX_CACHE.get(pattern)
    if rx is None:
        rx = re.compile(pattern)
        _REGEX_CACHE[pattern] = rx
    return rx


# synthetic detector ids that never come from the rules file
DICT_DETECTOR_ID = "det-name-dict"
STRICT_DETECTOR_ID = "strict-narrative"
VR_RULE_ID_PREFIX = "dcm-vr-"


@dataclass(frozen=True)
class RuleSet:
    version: str
    strictness: Strictness
    fhir_rules: dict[str, tuple[PathRule, ...]]
    tag_rules: tuple[TagRule, ...]
    vr_remove: frozenset[str]
    exempt_vrs: frozenset[str]
    detectors: tuple[Detector, ...]
    names: frozenset[str]
    exempt_segments: frozenset[str]
    dictionary_file: str

    def rules_for_kind(self, kind_name: str) -> tuple[PathRule, ...]:
        # kind-specific rules take precedence over the "*" block
        return self.fhir_rules.get(kind_name, ()) + self.fhir_rules.get("*", ())

    def tag_rule_for(self, tag: str) -> TagRule | None:
        for rule in self.tag_rules:
            if rule.tag == tag:
                return rule
        return None

    def coverable_ids(self) -> frozenset[str]:
        """Rule ids whose findings the automatic engine can clear itself."""
        ids = {r.id for rules in self.fhir_rules.values() for r in rules}
        ids.update(r.id for r in self.tag_rules)
        ids.update(VR_RULE_ID_PREFIX + vr for vr in self.vr_remove)
        return frozenset(ids)

    def is_coverable(self, finding: Finding) -> bool:
        return finding.detector in self.coverable_ids()


def pattern_prefix_len(pattern: str, path: str) -> int | None:
    """Segments of ``path`` consumed by a full match of ``pattern`` as a
    prefix, or None. Shortest match wins so `**.display` claims the first
    display segment on the path."""
    pat = pattern.split(".")
    segs = path.split(".")

    def rec(pi: int, si: int) -> int | None:
        if pi == len(pat):
            return si
        if pat[pi] == "**":
            for j in range(si, len(segs) + 1):
                r = rec(pi + 1, j)
                if r is not None:
                    return r
            return None
        if si >= len(segs):
            return None
        if pat[pi] == "*" or pat[pi] == segs[si]:
            return rec(pi + 1, si + 1)
        return None

    return rec(0, 0)


def match_rule(rules: tuple[PathRule, ...], path: str) -> tuple[PathRule, str] | None:
    """First rule whose pattern prefix-matches ``path``, with the matched
    subtree root."""
    segs = path.split(".")
    for rule in rules:
        plen = pattern_prefix_len(rule.pattern, path)
        if plen is not None:
            return rule, ".".join(segs[:plen])
    return None


_CATEGORIES = {c.value: c for c in FindingCategory}
_SCOPES = {s.value: s for s in PseudonymScope}
_ACTIONS = {a.value: a for a in RuleAction}


def _parse_path_rule(obj: dict, seen_ids: set[str]) -> PathRule:
    rule_id = obj.get("id", "")
    if not rule_id or rule_id in seen_ids:
        raise RuleParseError(f"missing or duplicate rule id {rule_id!r}")
    seen_ids.add(rule_id)
    try:
        action = _ACTIONS[obj["action"]]
        category = _CATEGORIES[obj["category"]]
    except KeyError as exc:
        raise RuleParseError(f"rule {rule_id}: unknown field value {exc}") from exc
    scope = None
    if action == RuleAction.PSEUDONYMIZE:
        try:
            scope = _SCOPES[obj["scope"]]
        except KeyError as exc:
            raise RuleParseError(f"rule {rule_id}: pseudonymize needs a scope") from exc
    return PathRule(id=rule_id, pattern=obj["path"], action=action, category=category, scope=scope)


def _parse_tag_rule(obj: dict, seen_ids: set[str]) -> TagRule:
    rule_id = obj.get("id", "")
    if not rule_id or rule_id in seen_ids:
        raise RuleParseError(f"missing or duplicate rule id {rule_id!r}")
    seen_ids.add(rule_id)
    tag = obj.get("tag", "")
    if not re.match(r"^[0-9A-F]{8}$", tag):
        raise RuleParseError(f"rule {rule_id}: bad tag {tag!r}")
    try:
        action = _ACTIONS[obj["action"]]
        category = _CATEGORIES[obj["category"]]
    except KeyError as exc:
        raise RuleParseError(f"rule {rule_id}: unknown field value {exc}") from exc
    scope = None
    if action == RuleAction.PSEUDONYMIZE:
        try:
            scope = _SCOPES[obj["scope"]]
        except KeyError as exc:
            raise RuleParseError(f"rule {rule_id}: pseudonymize needs a scope") from exc
    return TagRule(id=rule_id, tag=tag, action=action, category=category, scope=scope)


def parse_rules(text: str, names: frozenset[str]) -> RuleSet:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise RuleParseError(f"rules file is not JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise RuleParseError("rules document must be an object")
    seen: set[str] = set()
    try:
        strictness = Strictness(doc.get("strictness", "standard"))
    except ValueError as exc:
        raise RuleParseError(f"unknown strictness: {exc}") from exc

    fhir_rules: dict[str, tuple[PathRule, ...]] = {}
    for kind_name, rule_list in doc.get("fhir", {}).items():
        fhir_rules[kind_name] = tuple(_parse_path_rule(o, seen) for o in rule_list)

    dicom = doc.get("dicom", {})
    tag_rules = tuple(_parse_tag_rule(o, seen) for o in dicom.get("tags", []))
    vr_remove = frozenset(dicom.get("vr_remove", []))
    exempt_vrs = frozenset(dicom.get("exempt_vrs", []))

    detectors = []
    for obj in doc.get("detectors", []):
        det_id = obj.get("id", "")
        if not det_id or det_id in seen:
            raise RuleParseError(f"missing or duplicate detector id {det_id!r}")
        seen.add(det_id)
        try:
            category = _CATEGORIES[obj["category"]]
            pattern = obj["pattern"]
            re.compile(pattern)
        except (KeyError, re.error) as exc:
            raise RuleParseError(f"detector {det_id}: {exc}") from exc
        detectors.append(Detector(id=det_id, category=category, pattern=pattern,
                                  min_digits=int(obj.get("min_digits", 0))))

    return RuleSet(
        version=str(doc.get("version", "")),
        strictness=strictness,
        fhir_rules=fhir_rules,
        tag_rules=tag_rules,
        vr_remove=vr_remove,
        exempt_vrs=exempt_vrs,
        detectors=tuple(detectors),
        names=names,
        exempt_segments=frozenset(doc.get("exempt_segments", [])),
        dictionary_file=str(doc.get("dictionary", "")),
    )


def dump_rules(rules: RuleSet) -> str:
    def path_rule_json(r: PathRule) -> dict:
        obj = {"id": r.id, "path": r.pattern, "action": r.action.value, "category": r.category.value}
        if r.scope is not None:
            obj["scope"] = r.scope.value
        return obj

    def tag_rule_json(r: TagRule) -> dict:
        obj = {"id": r.id, "tag": r.tag, "action": r.action.value, "category": r.category.value}
        if r.scope is not None:
            obj["scope"] = r.scope.value
        return obj

    def detector_json(d: Detector) -> dict:
        obj = {"id": d.id, "category": d.category.value, "pattern": d.pattern}
        if d.min_digits:
            obj["min_digits"] = d.min_digits
        return obj

    doc = {
        "version": rules.version,
        "strictness": rules.strictness.value,
        "dictionary": rules.dictionary_file,
        "exempt_segments": sorted(rules.exempt_segments),
        "fhir": {k: [path_rule_json(r) for r in v] for k, v in rules.fhir_rules.items()},
        "dicom": {
            "tags": [tag_rule_json(r) for r in rules.tag_rules],
            "vr_remove": sorted(rules.vr_remove),
            "exempt_vrs": sorted(rules.exempt_vrs),
        },
        "detectors": [detector_json(d) for d in rules.detectors],
    }
    return json.dumps(doc, indent=2, ensure_ascii=False)


def load_names(text: str) -> frozenset[str]:
    names = set()
    for line in text.splitlines():
        token = line.strip().lower()
        if token and not token.startswith("#"):
            names.add(token)
    return frozenset(names)


def load_rules(path: str) -> RuleSet:
    import os

    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    # resolve the dictionary next to the rules file
    doc = json.loads(text)
    dict_name = doc.get("dictionary", "") if isinstance(doc, dict) else ""
    names: frozenset[str] = frozenset()
    if dict_name:
        dict_path = os.path.join(os.path.dirname(os.path.abspath(path)), dict_name)
        with open(dict_path, encoding="utf-8") as fh:
            names = load_names(fh.read())
    return parse_rules(text, names)


def load_default(strictness: Strictness | None = None) -> RuleSet:
    pkg = resources.files("enclave_gate.data")
    text = (pkg / "rules.json").read_text(encoding="utf-8")
    names = load_names((pkg / "names.txt").read_text(encoding="utf-8"))
    ruleset = parse_rules(text, names)
    if strictness is not None and strictness != ruleset.strictness:
        ruleset = RuleSet(
            version=ruleset.version,
            strictness=strictness,
            fhir_rules=ruleset.fhir_rules,
            tag_rules=ruleset.tag_rules,
            vr_remove=ruleset.vr_remove,
            exempt_vrs=ruleset.exempt_vrs,
            detectors=ruleset.detectors,
            names=ruleset.names,
            exempt_segments=ruleset.exempt_segments,
            dictionary_file=ruleset.dictionary_file,
        )
    return ruleset
