"""De-identification engine: scan for PHI, apply the rule set, clear or
quarantine.

The clearance decision is structural: the engine applies every automatic
action, rescans the result, and clears only when the rescan is empty. There
is no code path that returns a resource as cleared while findings remain.
Free text is never auto-cleared when a detector fires; those resources go to
quarantine for human review.
"""

from __future__ import annotations

import hashlib
import hmac
import re
from dataclasses import dataclass, field
from datetime import date, datetime, timedelta
from typing import Protocol

from .model import (
    ElementValue,
    MalformedPayload,
    Resource,
    ResourceKind,
    UnsupportedKind,
    ValueKind,
    element_at,
    normalize,
    remove_subtree,
    serialize_resource,
    set_element,
)
from .rules import (
    DICT_DETECTOR_ID,
    Finding,
    FindingCategory,
    RuleAction,
    RuleSet,
    STRICT_DETECTOR_ID,
    Strictness,
    VR_RULE_ID_PREFIX,
    match_rule,
)
from .vault import BadKeyLength, KEY_LEN, PseudonymScope, is_pseudonym


class VaultLike(Protocol):
    @property
    def key(self) -> bytes: ...

    def get_or_create(self, source_id: str, scope: PseudonymScope) -> str: ...


@dataclass(frozen=True)
class PatientOffset:
    patient_source_id: str
    offset_days: int


@dataclass(frozen=True)
class DeidOutcome:
    """Cleared carries the de-identified resource plus the actions applied;
    quarantined carries the untouched original, a working copy with all
    automatic actions already applied, and the findings that remain on it."""

    cleared: bool
    resource: Resource
    findings: tuple[Finding, ...] = ()
    applied: tuple[tuple[str, str], ...] = ()
    working: Resource | None = None


OFFSET_SPAN = 729  # days in [-364, +364]
OFFSET_ZERO_SUBSTITUTE = 182


def derive_offset(patient_source_id: str, vault_key: bytes) -> PatientOffset:
    """Deterministic per-patient day offset in [-364, +364], never 0."""
    if not isinstance(vault_key, bytes) or len(vault_key) != KEY_LEN:
        raise BadKeyLength(f"vault key must be exactly {KEY_LEN} bytes")
    digest = hmac.new(vault_key, patient_source_id.encode(), hashlib.sha256).digest()
    off = int.from_bytes(digest, "big") % OFFSET_SPAN - 364
    if off == 0:
        off = OFFSET_ZERO_SUBSTITUTE
    return PatientOffset(patient_source_id, off)


_DA_RE = re.compile(r"^\d{8}$")


def shift_date(value, offset):
    """Shift a temporal value by a patient offset, calendar-correct.

    Accepts a datetime.date/datetime (returned as the same type) or an
    ElementValue of kind DATE/DATETIME, where the stored text keeps its
    format: ISO with whatever timezone/fraction suffix it had, or the
    8-digit compact form.
    """
    days = offset.offset_days if isinstance(offset, PatientOffset) else int(offset)
    delta = timedelta(days=days)
    if isinstance(value, datetime):
        return value + delta
    if isinstance(value, date):
        return value + delta
    if isinstance(value, ElementValue):
        text = value.value
        if value.kind == ValueKind.DATE:
            if _DA_RE.match(text):
                d = datetime.strptime(text, "%Y%m%d").date() + delta
                return ElementValue(ValueKind.DATE, d.strftime("%Y%m%d"))
            d = date.fromisoformat(text) + delta
            return ElementValue(ValueKind.DATE, d.isoformat())
        if value.kind == ValueKind.DATETIME:
            # day offsets only touch the date part; the rest of the text
            # (time, fraction, zone) is preserved byte for byte
            if text[:4].isdigit() and "-" in text[:8]:
                d = date.fromisoformat(text[:10]) + delta
                return ElementValue(ValueKind.DATETIME, d.isoformat() + text[10:])
            d = datetime.strptime(text[:8], "%Y%m%d").date() + delta
            return ElementValue(ValueKind.DATETIME, d.strftime("%Y%m%d") + text[8:])
    raise ValueError("shift_date needs a date, datetime, or temporal element")


_AS_RE = re.compile(r"^(\d{1,3})([DWMY])$")
_YEAR_RE = re.compile(r"^\d{4}$")
_YEAR_MONTH_RE = re.compile(r"^\d{4}-\d{2}$")

AGE_LIMIT = 89
AGE_GENERALIZED = "90+"


def age_in_years(value: ElementValue, as_of: date) -> int | None:
    """Age implied by a birth-date or age element; None if unparseable."""
    text = value.value if isinstance(value.value, str) else str(value.value)
    born: date | None = None
    if value.kind in (ValueKind.DATE, ValueKind.DATETIME):
        try:
            if _DA_RE.match(text[:8]) and (len(text) == 8 or value.kind == ValueKind.DATETIME):
                born = datetime.strptime(text[:8], "%Y%m%d").date()
            else:
                born = date.fromisoformat(text[:10])
        except ValueError:
            return None
    elif value.kind == ValueKind.STRING:
        m = _AS_RE.match(text)
        if m:
            n, unit = int(m.group(1)), m.group(2)
            return {"Y": n, "M": n // 12, "W": n // 52, "D": n // 365}[unit]
        if _YEAR_RE.match(text):
            return as_of.year - int(text)
        if _YEAR_MONTH_RE.match(text):
            y, mth = int(text[:4]), int(text[5:7])
            return as_of.year - y - (1 if as_of.month < mth else 0)
        return None
    else:
        return None
    if born is None:
        return None
    return as_of.year - born.year - (1 if (as_of.month, as_of.day) < (born.month, born.day) else 0)


def patient_source_id(resource: Resource) -> str:
    """The identifier that keys a patient's offset and pseudonym.

    Patients use their resource id; clinical resources use the bare id from
    their subject/patient reference; DICOM studies use the PatientID tag.
    Resources with none of those fall back to a digest of their content.
    """
    if resource.kind == ResourceKind.DICOM_STUDY_META:
        pid = element_at(resource, "00100020.Value.0")
        if pid is not None and isinstance(pid.value, str) and pid.value:
            return pid.value
    elif resource.kind == ResourceKind.PATIENT:
        if resource.id:
            return resource.id
    else:
        for path in ("subject.reference", "patient.reference"):
            ref = element_at(resource, path)
            if ref is not None and isinstance(ref.value, str) and ref.value:
                text = ref.value
                return text[len("Patient/"):] if text.startswith("Patient/") else text
    if resource.id:
        return resource.id
    return "sha256:" + hashlib.sha256(serialize_resource(resource).encode()).hexdigest()


# ---------------------------------------------------------------------------
# Scanning
# ---------------------------------------------------------------------------

_PSN_ANYWHERE_RE = re.compile(r"PSN-[0-9a-f]{32}")
_NAME_TOKEN_RE = re.compile(r"\b[A-ZÄÖÜ][A-Za-zÄÖÜäöüß'-]+\b")
_TAG_SEG_RE = re.compile(r"^[0-9A-F]{8}$")

_STRING_KINDS = (ValueKind.STRING, ValueKind.NARRATIVE)


def _mask_pseudonyms(text: str) -> str:
    return _PSN_ANYWHERE_RE.sub(lambda m: "#" * len(m.group()), text)


def _sweep(path: str, text: str, rules: RuleSet, out: list[Finding]) -> None:
    masked = _mask_pseudonyms(text)
    for det in rules.detectors:
        for m in det.regex.finditer(masked):
            if det.min_digits and sum(c.isdigit() for c in m.group()) < det.min_digits:
                continue
            out.append(Finding(path, det.category, (m.start(), m.end()), det.id))
    for m in _NAME_TOKEN_RE.finditer(masked):
        if m.group().lower() in rules.names:
            out.append(Finding(path, FindingCategory.NAME, m.span(), DICT_DETECTOR_ID))


def _merge_findings(raw: list[Finding]) -> list[Finding]:
    # overlapping same-category matches on one path collapse into one finding
    raw.sort(key=lambda f: (f.path, f.span, f.detector))
    merged: list[Finding] = []
    for f in raw:
        if merged:
            last = merged[-1]
            if (
                last.path == f.path
                and last.category == f.category
                and f.span[0] < last.span[1]
            ):
                merged[-1] = Finding(
                    last.path, last.category,
                    (last.span[0], max(last.span[1], f.span[1])), last.detector,
                )
                continue
        merged.append(f)
    merged.sort(key=lambda f: (f.path, f.span))
    return merged


def _whole(text: str) -> tuple[int, int]:
    return (0, len(text))


def _text_of(value: ElementValue) -> str:
    return value.value if isinstance(value.value, str) else str(value.value)


def _owning_tag(path: str) -> tuple[str, str] | None:
    """Innermost DICOM tag segment and the subtree prefix it owns."""
    segs = path.split(".")
    for i in range(len(segs) - 1, -1, -1):
        if _TAG_SEG_RE.match(segs[i]):
            return segs[i], ".".join(segs[: i + 1])
    return None


def _scan_fhir(resource: Resource, rules: RuleSet, as_of: date) -> list[Finding]:
    out: list[Finding] = []
    kind_rules = rules.rules_for_kind(resource.kind.value)
    for path, value in resource.elements.items():
        m = match_rule(kind_rules, path)
        if m is not None:
            rule, _prefix = m
            if rule.action == RuleAction.REMOVE:
                if value.kind in _STRING_KINDS:
                    out.append(Finding(path, rule.category, _whole(value.value), rule.id))
            elif rule.action == RuleAction.PSEUDONYMIZE:
                text = _text_of(value)
                if not is_pseudonym(text):
                    out.append(Finding(path, rule.category, _whole(text), rule.id))
            elif rule.action == RuleAction.AGE:
                age = age_in_years(value, as_of)
                if age is not None and age > AGE_LIMIT:
                    out.append(Finding(path, rule.category, _whole(_text_of(value)), rule.id))
            continue
        if value.kind == ValueKind.NARRATIVE:
            _sweep(path, value.value, rules, out)
            if rules.strictness == Strictness.STRICT and value.value:
                out.append(Finding(path, FindingCategory.FREE_TEXT_HIT,
                                   _whole(value.value), STRICT_DETECTOR_ID))
        elif value.kind == ValueKind.STRING:
            if path.split(".")[-1] in rules.exempt_segments:
                continue
            _sweep(path, value.value, rules, out)
    return _merge_findings(out)


def _scan_dicom(resource: Resource, rules: RuleSet, as_of: date) -> list[Finding]:
    out: list[Finding] = []
    for path, value in resource.elements.items():
        last_seg = path.split(".")[-1]
        if last_seg in rules.exempt_segments:
            continue
        owner = _owning_tag(path)
        tag, prefix = owner if owner else ("", "")
        rule = rules.tag_rule_for(tag) if tag else None
        vr_el = resource.elements.get(f"{prefix}.vr") if prefix else None
        vr = vr_el.value if vr_el is not None else ""
        if rule is not None:
            if rule.action == RuleAction.REMOVE:
                if value.kind in _STRING_KINDS:
                    out.append(Finding(path, rule.category, _whole(value.value), rule.id))
            elif rule.action == RuleAction.PSEUDONYMIZE:
                text = _text_of(value)
                if not is_pseudonym(text):
                    out.append(Finding(path, rule.category, _whole(text), rule.id))
            elif rule.action == RuleAction.AGE:
                age = age_in_years(value, as_of)
                if age is not None and age > AGE_LIMIT:
                    out.append(Finding(path, rule.category, _whole(_text_of(value)), rule.id))
            continue
        if vr in rules.vr_remove:
            if value.kind in _STRING_KINDS:
                out.append(Finding(path, FindingCategory.DICOM_IDENTITY_TAG,
                                   _whole(value.value), VR_RULE_ID_PREFIX + vr))
            continue
        if value.kind == ValueKind.NARRATIVE:
            _sweep(path, value.value, rules, out)
            if rules.strictness == Strictness.STRICT and value.value:
                out.append(Finding(path, FindingCategory.FREE_TEXT_HIT,
                                   _whole(value.value), STRICT_DETECTOR_ID))
        elif value.kind == ValueKind.STRING and vr not in rules.exempt_vrs:
            _sweep(path, value.value, rules, out)
    return _merge_findings(out)


_ENTRY_RE = re.compile(r"^entry\.(\d+)\.resource\.(.+)$")


def split_bundle(resource: Resource) -> tuple[Resource, list[tuple[int, Resource]]]:
    """Bundle's own elements (entry paths stripped) and its entry resources."""
    own: dict[str, ElementValue] = {}
    per_entry: dict[int, dict[str, ElementValue]] = {}
    for path, value in resource.elements.items():
        m = _ENTRY_RE.match(path)
        if m is not None:
            per_entry.setdefault(int(m.group(1)), {})[m.group(2)] = value
        elif not path.startswith("entry."):
            own[path] = value
        # entry.* members outside .resource (fullUrl, search, request) are
        # carrier metadata; they are dropped from the rebuilt bundle
    subs: list[tuple[int, Resource]] = []
    for idx in sorted(per_entry):
        sub_elements = per_entry[idx]
        rtype = sub_elements.pop("resourceType", None)
        if rtype is None or not isinstance(rtype.value, str):
            raise MalformedPayload(f"bundle entry {idx} resource has no resourceType")
        try:
            kind = ResourceKind(rtype.value)
        except ValueError:
            raise UnsupportedKind(
                f"unsupported resourceType {rtype.value!r} in bundle entry {idx}"
            ) from None
        rid_el = sub_elements.pop("id", None)
        rid = rid_el.value if rid_el is not None and isinstance(rid_el.value, str) else ""
        subs.append((idx, Resource(kind=kind, id=rid, elements=sub_elements)))
    own_res = Resource(kind=ResourceKind.BUNDLE, id=resource.id, elements=own)
    return own_res, subs


def scan(resource: Resource, rules: RuleSet, as_of: date | None = None) -> list[Finding]:
    """All findings on a resource, sorted by (path, span). Deterministic."""
    ref = as_of or date.today()
    if resource.kind == ResourceKind.DICOM_STUDY_META:
        return _scan_dicom(resource, rules, ref)
    if resource.kind == ResourceKind.BUNDLE:
        own, subs = split_bundle(resource)
        out = _scan_fhir(own, rules, ref)
        for idx, sub in subs:
            prefix = f"entry.{idx}.resource."
            for f in scan(sub, rules, ref):
                out.append(Finding(prefix + f.path, f.category, f.span, f.detector))
        out.sort(key=lambda f: (f.path, f.span))
        return out
    return _scan_fhir(resource, rules, ref)


# ---------------------------------------------------------------------------
# Applying automatic actions
# ---------------------------------------------------------------------------


def _reference_target(text: str) -> str | None:
    """Bare id of a relative Type/id reference, None for other forms."""
    parts = text.split("/")
    if len(parts) == 2 and parts[0] and parts[1]:
        return parts[1]
    return None


def _content_source_id(resource: Resource) -> str:
    return f"{resource.kind.value}/" + (
        resource.id
        or "sha256:" + hashlib.sha256(serialize_resource(resource).encode()).hexdigest()
    )


def _apply_fhir(resource: Resource, rules: RuleSet, vault: VaultLike,
                as_of: date) -> tuple[Resource, list[tuple[str, str]]]:
    kind_rules = rules.rules_for_kind(resource.kind.value)
    offset = derive_offset(patient_source_id(resource), vault.key)
    applied: list[tuple[str, str]] = []
    work = resource
    removed: set[str] = set()
    age_paths: list[str] = []
    for path, value in list(resource.elements.items()):
        m = match_rule(kind_rules, path)
        if m is None:
            continue
        rule, prefix = m
        if rule.action == RuleAction.REMOVE:
            if prefix not in removed:
                work = remove_subtree(work, prefix)
                removed.add(prefix)
                applied.append((prefix, "remove"))
        elif rule.action == RuleAction.PSEUDONYMIZE:
            if any(path == r or path.startswith(r + ".") for r in removed):
                continue
            text = _text_of(value)
            if not is_pseudonym(text):
                psn = vault.get_or_create(text, rule.scope)
                work = set_element(work, path, ElementValue.string(psn))
                applied.append((path, "pseudonymize"))
        elif rule.action == RuleAction.AGE:
            age_paths.append(path)

    for path, value in list(work.elements.items()):
        if value.kind in (ValueKind.DATE, ValueKind.DATETIME):
            work = set_element(work, path, shift_date(value, offset))
            applied.append((path, "shift-date"))

    for path in age_paths:
        value = element_at(work, path)
        if value is None:
            continue
        age = age_in_years(value, as_of)
        if age is not None and age > AGE_LIMIT:
            work = set_element(work, path, ElementValue.string(AGE_GENERALIZED))
            applied.append((path, "generalize-age"))

    for path, value in list(work.elements.items()):
        if not path.endswith("reference") or value.kind != ValueKind.STRING:
            continue
        text = value.value
        bare = _reference_target(text)
        if bare is not None and not is_pseudonym(bare):
            psn = vault.get_or_create(text, PseudonymScope.RESOURCE_ID)
            new_text = text.rsplit("/", 1)[0] + "/" + psn
            work = set_element(work, path, ElementValue.string(new_text))
            applied.append((path, "pseudonymize"))
        elif bare is None and text and not is_pseudonym(text):
            psn = vault.get_or_create(text, PseudonymScope.RESOURCE_ID)
            work = set_element(work, path, ElementValue.string(psn))
            applied.append((path, "pseudonymize"))

    if not is_pseudonym(work.id):
        new_id = vault.get_or_create(_content_source_id(resource), PseudonymScope.RESOURCE_ID)
        work = Resource(kind=work.kind, id=new_id, elements=work.elements)
        applied.append(("id", "pseudonymize"))
    return normalize(work), applied


def _apply_dicom(resource: Resource, rules: RuleSet, vault: VaultLike,
                 as_of: date) -> tuple[Resource, list[tuple[str, str]]]:
    offset = derive_offset(patient_source_id(resource), vault.key)
    applied: list[tuple[str, str]] = []
    work = resource
    removed: set[str] = set()
    age_paths: list[str] = []
    for path, value in list(resource.elements.items()):
        owner = _owning_tag(path)
        if owner is None:
            continue
        tag, prefix = owner
        rule = rules.tag_rule_for(tag)
        vr_el = resource.elements.get(f"{prefix}.vr")
        vr = vr_el.value if vr_el is not None else ""
        if rule is not None:
            if rule.action == RuleAction.REMOVE:
                if prefix not in removed:
                    work = remove_subtree(work, prefix)
                    removed.add(prefix)
                    applied.append((prefix, "remove"))
            elif rule.action == RuleAction.PSEUDONYMIZE:
                if path == f"{prefix}.vr":
                    continue
                text = _text_of(value)
                if not is_pseudonym(text):
                    psn = vault.get_or_create(text, rule.scope)
                    work = set_element(work, path, ElementValue.string(psn))
                    applied.append((path, "pseudonymize"))
            elif rule.action == RuleAction.AGE:
                if path != f"{prefix}.vr":
                    age_paths.append(path)
        elif vr in rules.vr_remove and prefix not in removed:
            work = remove_subtree(work, prefix)
            removed.add(prefix)
            applied.append((prefix, "remove"))

    for path, value in list(work.elements.items()):
        if value.kind in (ValueKind.DATE, ValueKind.DATETIME):
            work = set_element(work, path, shift_date(value, offset))
            applied.append((path, "shift-date"))

    for path in age_paths:
        value = element_at(work, path)
        if value is None:
            continue
        age = age_in_years(value, as_of)
        if age is not None and age > AGE_LIMIT:
            work = set_element(work, path, ElementValue.string(AGE_GENERALIZED))
            applied.append((path, "generalize-age"))

    new_uid = element_at(work, "0020000D.Value.0")
    new_id = new_uid.value if new_uid is not None and isinstance(new_uid.value, str) else ""
    work = Resource(kind=work.kind, id=new_id, elements=work.elements)
    return normalize(work), applied


def _apply_bundle(resource: Resource, rules: RuleSet, vault: VaultLike,
                  as_of: date) -> tuple[Resource, list[tuple[str, str]]]:
    own, subs = split_bundle(resource)
    work_own, applied = _apply_fhir(own, rules, vault, as_of)
    elements = dict(work_own.elements)
    for idx, sub in subs:
        sub_work, sub_applied = _apply_one(sub, rules, vault, as_of)
        prefix = f"entry.{idx}.resource."
        elements[prefix + "resourceType"] = ElementValue.string(sub_work.kind.value)
        if sub_work.id:
            elements[prefix + "id"] = ElementValue.string(sub_work.id)
        for p, v in sub_work.elements.items():
            elements[prefix + p] = v
        applied.extend((prefix + p, a) for p, a in sub_applied)
    rebuilt = Resource(kind=ResourceKind.BUNDLE, id=work_own.id, elements=elements)
    return normalize(rebuilt), applied


def _apply_one(resource: Resource, rules: RuleSet, vault: VaultLike,
               as_of: date) -> tuple[Resource, list[tuple[str, str]]]:
    if resource.kind == ResourceKind.DICOM_STUDY_META:
        return _apply_dicom(resource, rules, vault, as_of)
    if resource.kind == ResourceKind.BUNDLE:
        return _apply_bundle(resource, rules, vault, as_of)
    return _apply_fhir(resource, rules, vault, as_of)


def deidentify(resource: Resource, rules: RuleSet, vault: VaultLike,
               as_of: date | None = None) -> DeidOutcome:
    """Apply every automatic action, rescan, and clear only on a clean rescan.

    Anything else (detector hits in free text or plain strings, strict-mode
    narrative) quarantines the original together with the prepared working
    copy, so a reviewer only has to resolve what the engine could not.
    """
    ref = as_of or date.today()
    work, applied = _apply_one(resource, rules, vault, ref)
    remaining = scan(work, rules, ref)
    if remaining:
        return DeidOutcome(
            cleared=False,
            resource=resource,
            findings=tuple(remaining),
            working=work,
        )
    return DeidOutcome(cleared=True, resource=work, findings=(), applied=tuple(applied))


def deidentify_dicom(meta: Resource, rules: RuleSet, vault: VaultLike,
                     as_of: date | None = None) -> DeidOutcome:
    if meta.kind != ResourceKind.DICOM_STUDY_META:
        raise ValueError("deidentify_dicom requires a DicomStudyMeta resource")
    return deidentify(meta, rules, vault, as_of)
