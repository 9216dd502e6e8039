"""Uniform element-tree model for the payload formats the gateway accepts.

Two carrier formats parse into the same ``Resource`` shape: a FHIR R4 JSON
subset (keyed by ``resourceType``) and DICOMweb JSON metadata (keyed by
8-hex-digit tags with ``vr``/``Value`` members). A resource is a flat,
ordered mapping of dotted element paths (``name.0.family``) to typed leaf
values; serialization is canonical (sorted keys, no insignificant
whitespace) and round-trip stable.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from decimal import Decimal
from enum import Enum
from typing import Any, Iterator


class MalformedPayload(ValueError):
    """Input is not a parseable payload (bad JSON, missing resourceType, nulls)."""


class UnsupportedKind(ValueError):
    """The resourceType is outside the supported subset."""


class ResourceKind(str, Enum):
    PATIENT = "Patient"
    OBSERVATION = "Observation"
    DIAGNOSTIC_REPORT = "DiagnosticReport"
    CONDITION = "Condition"
    ENCOUNTER = "Encounter"
    BUNDLE = "Bundle"
    DICOM_STUDY_META = "DicomStudyMeta"


class ValueKind(str, Enum):
    STRING = "string"
    DATE = "date"
    DATETIME = "datetime"
    INTEGER = "integer"
    DECIMAL = "decimal"
    BOOLEAN = "boolean"
    CODED = "coded"
    NARRATIVE = "narrative"


# Leaf value payload type by kind: str for STRING/DATE/DATETIME/NARRATIVE
# (temporal values keep their verbatim text so serialization is byte-stable),
# int, Decimal, bool, and (system, code) for CODED.
@dataclass(frozen=True)
class ElementValue:
    kind: ValueKind
    value: Any

    @property
    def text(self) -> str:
        """The value as text; only meaningful for string-backed kinds."""
        if isinstance(self.value, str):
            return self.value
        raise TypeError(f"{self.kind.value} value has no text form")

    @property
    def display_text(self) -> str:
        """A text rendering for any kind; used by review surfaces."""
        if isinstance(self.value, str):
            return self.value
        if self.kind == ValueKind.CODED:
            system, code = self.value
            return f"{system}|{code}"
        if self.kind == ValueKind.BOOLEAN:
            return "true" if self.value else "false"
        if isinstance(self.value, Decimal):
            return _format_decimal(self.value)
        return str(self.value)

    @classmethod
    def string(cls, s: str) -> "ElementValue":
        return cls(ValueKind.STRING, s)

    @classmethod
    def narrative(cls, s: str) -> "ElementValue":
        return cls(ValueKind.NARRATIVE, s)

    @classmethod
    def date(cls, s: str) -> "ElementValue":
        return cls(ValueKind.DATE, s)

    @classmethod
    def datetime(cls, s: str) -> "ElementValue":
        return cls(ValueKind.DATETIME, s)


@dataclass(frozen=True)
class Resource:
    """A parsed clinical payload as a flat element tree.

    ``elements`` maps dotted paths to leaf values, in document order, and
    excludes the envelope fields (``resourceType`` and FHIR ``id``), which
    live in ``kind`` and ``id``. Instances are treated as immutable; the
    editing helpers below return new resources.
    """

    kind: ResourceKind
    id: str
    elements: dict[str, ElementValue] = field(default_factory=dict)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Resource):
            return NotImplemented
        return (
            self.kind == other.kind
            and self.id == other.id
            and self.elements == other.elements
        )


@dataclass(frozen=True)
class DicomTag:
    group: int
    element: int
    vr: str
    value: ElementValue | None

    def render(self) -> str:
        return f"{self.group:04X}{self.element:04X}"


_ISO_DATE_RE = re.compile(r"^\d{4}-\d{2}-\d{2}$")
_ISO_DATETIME_RE = re.compile(
    r"^\d{4}-\d{2}-\d{2}T\d{2}:\d{2}:\d{2}(\.\d+)?(Z|[+-]\d{2}:\d{2})?$"
)
_DICOM_TAG_RE = re.compile(r"^[0-9A-F]{8}$")
_DICOM_DA_RE = re.compile(r"^\d{8}$")
# Array detection: digit segments without leading zeros (so 8-digit DICOM
# tags like "00100030" stay object keys).
_ARRAY_INDEX_RE = re.compile(r"^(0|[1-9]\d*)$")

# FHIR element paths whose string content is human free text. The flag is
# structural: free text is the only content the automatic engine may not
# clear on its own say-so.
_NARRATIVE_LAST_SEGMENTS = {"conclusion", "comment"}

# DICOM VRs that carry free text.
_DICOM_NARRATIVE_VRS = {"LT", "ST", "UT"}


def is_narrative_path(path: str) -> bool:
    segs = path.split(".")
    if len(segs) >= 2 and segs[-2] == "text" and segs[-1] == "div":
        return True
    if segs[-1] in _NARRATIVE_LAST_SEGMENTS:
        return True
    if len(segs) >= 3 and segs[-3] == "note" and segs[-2].isdigit() and segs[-1] == "text":
        return True
    return False


def _classify_fhir_string(path: str, s: str) -> ElementValue:
    if is_narrative_path(path):
        return ElementValue(ValueKind.NARRATIVE, s)
    if _ISO_DATE_RE.match(s) and _valid_iso_date(s):
        return ElementValue(ValueKind.DATE, s)
    if _ISO_DATETIME_RE.match(s) and _valid_iso_date(s[:10]):
        return ElementValue(ValueKind.DATETIME, s)
    return ElementValue(ValueKind.STRING, s)


def _valid_iso_date(s: str) -> bool:
    import datetime as _dt

    try:
        _dt.date.fromisoformat(s)
        return True
    except ValueError:
        return False


def _valid_dicom_date(s: str) -> bool:
    import datetime as _dt

    try:
        _dt.datetime.strptime(s, "%Y%m%d")
        return True
    except ValueError:
        return False


def _is_coded_dict(obj: dict) -> bool:
    return (
        set(obj.keys()) == {"system", "code"}
        and isinstance(obj.get("system"), str)
        and isinstance(obj.get("code"), str)
    )


def _flatten_fhir(obj: Any, prefix: list[str], out: dict[str, ElementValue]) -> None:
    path = ".".join(prefix)
    if obj is None:
        raise MalformedPayload(f"null value at {path or '<root>'}")
    if isinstance(obj, dict):
        if _is_coded_dict(obj):
            out[path] = ElementValue(ValueKind.CODED, (obj["system"], obj["code"]))
            return
        for key, val in obj.items():
            if not isinstance(key, str) or not key:
                raise MalformedPayload(f"bad object key at {path or '<root>'}")
            _flatten_fhir(val, prefix + [key], out)
        return
    if isinstance(obj, list):
        for i, val in enumerate(obj):
            _flatten_fhir(val, prefix + [str(i)], out)
        return
    if isinstance(obj, bool):
        out[path] = ElementValue(ValueKind.BOOLEAN, obj)
    elif isinstance(obj, int):
        out[path] = ElementValue(ValueKind.INTEGER, obj)
    elif isinstance(obj, Decimal):
        out[path] = ElementValue(ValueKind.DECIMAL, obj)
    elif isinstance(obj, str):
        out[path] = _classify_fhir_string(path, obj)
    else:
        raise MalformedPayload(f"unsupported value type at {path}")


def _classify_dicom_leaf(vr: str, obj: Any, path: str) -> ElementValue:
    if isinstance(obj, bool):
        return ElementValue(ValueKind.BOOLEAN, obj)
    if isinstance(obj, int):
        return ElementValue(ValueKind.INTEGER, obj)
    if isinstance(obj, Decimal):
        return ElementValue(ValueKind.DECIMAL, obj)
    if isinstance(obj, str):
        if vr == "DA" and _DICOM_DA_RE.match(obj) and _valid_dicom_date(obj):
            return ElementValue(ValueKind.DATE, obj)
        if vr == "DT" and len(obj) >= 8 and obj[:8].isdigit() and _valid_dicom_date(obj[:8]):
            return ElementValue(ValueKind.DATETIME, obj)
        if vr in _DICOM_NARRATIVE_VRS:
            return ElementValue(ValueKind.NARRATIVE, obj)
        return ElementValue(ValueKind.STRING, obj)
    raise MalformedPayload(f"unsupported value type at {path}")


def _is_nested_item(obj: dict) -> bool:
    # sequence items map tag keys to attribute objects with their own vr
    return bool(obj) and all(
        isinstance(k, str)
        and _DICOM_TAG_RE.match(k.upper())
        and isinstance(v, dict)
        and isinstance(v.get("vr"), str)
        for k, v in obj.items()
    )


def _flatten_dicom_value(vr: str, obj: Any, prefix: list[str], out: dict[str, ElementValue]) -> None:
    path = ".".join(prefix)
    if obj is None:
        raise MalformedPayload(f"null value at {path}")
    if isinstance(obj, dict):
        if _is_nested_item(obj):
            for key, val in obj.items():
                _flatten_dicom_attr(prefix + [key.upper()], val, out)
            return
        for key, val in obj.items():
            _flatten_dicom_value(vr, val, prefix + [key], out)
        return
    if isinstance(obj, list):
        for i, val in enumerate(obj):
            _flatten_dicom_value(vr, val, prefix + [str(i)], out)
        return
    out[path] = _classify_dicom_leaf(vr, obj, path)


def _flatten_dicom_attr(prefix: list[str], attr: dict, out: dict[str, ElementValue]) -> None:
    tag_path = ".".join(prefix)
    vr = attr.get("vr", "")
    if not isinstance(vr, str) or len(vr) != 2:
        raise MalformedPayload(f"tag {tag_path} has no 2-char vr")
    out[f"{tag_path}.vr"] = ElementValue(ValueKind.STRING, vr)
    for member, member_val in attr.items():
        if member == "vr":
            continue
        _flatten_dicom_value(vr, member_val, prefix + [member], out)


def _parse_dicom(root: dict) -> Resource:
    elements: dict[str, ElementValue] = {}
    for key, val in root.items():
        tag = key.upper() if isinstance(key, str) else ""
        if not _DICOM_TAG_RE.match(tag):
            raise MalformedPayload(f"bad DICOM tag key {key!r}")
        if not isinstance(val, dict):
            raise MalformedPayload(f"tag {tag} is not an attribute object")
        _flatten_dicom_attr([tag], val, elements)
    study_uid = elements.get("0020000D.Value.0")
    rid = study_uid.value if study_uid is not None and isinstance(study_uid.value, str) else ""
    return Resource(kind=ResourceKind.DICOM_STUDY_META, id=rid, elements=elements)


def _looks_like_dicom(root: dict) -> bool:
    if not root:
        return False
    return all(
        isinstance(k, str) and _DICOM_TAG_RE.match(k.upper()) for k in root.keys()
    )


def parse_resource(text: str | bytes, kind_hint: ResourceKind | None = None) -> Resource:
    """Parse a UTF-8 JSON document into a Resource.

    Kind is inferred from ``resourceType``; for DICOMweb metadata (which has
    no ``resourceType``) pass ``kind_hint=ResourceKind.DICOM_STUDY_META`` or
    rely on shape detection (all top-level keys 8-hex-digit tags).
    """
    if isinstance(text, bytes):
        try:
            text = text.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise MalformedPayload(f"not UTF-8: {exc}") from exc
    try:
        root = json.loads(text, parse_float=Decimal)
    except json.JSONDecodeError as exc:
        raise MalformedPayload(f"invalid JSON: {exc}") from exc
    if not isinstance(root, dict):
        raise MalformedPayload("top-level JSON value must be an object")

    rtype = root.get("resourceType")
    if rtype is None:
        if kind_hint == ResourceKind.DICOM_STUDY_META or _looks_like_dicom(root):
            return _parse_dicom(root)
        raise MalformedPayload("missing resourceType")
    if not isinstance(rtype, str):
        raise MalformedPayload("resourceType must be a string")
    try:
        kind = ResourceKind(rtype)
    except ValueError:
        raise UnsupportedKind(f"unsupported resourceType {rtype!r}") from None
    if kind == ResourceKind.DICOM_STUDY_META:
        raise UnsupportedKind("DicomStudyMeta is not a FHIR resourceType")

    rid = root.get("id", "")
    if not isinstance(rid, str):
        raise MalformedPayload("id must be a string")

    elements: dict[str, ElementValue] = {}
    for key, val in root.items():
        if key in ("resourceType", "id"):
            continue
        _flatten_fhir(val, [key], elements)
    return Resource(kind=kind, id=rid, elements=elements)


def element_at(resource: Resource, path: str) -> ElementValue | None:
    """Exact-path lookup; None when the path is not present."""
    return resource.elements.get(path)


def set_element(resource: Resource, path: str, value: ElementValue) -> Resource:
    elements = dict(resource.elements)
    elements[path] = value
    return Resource(kind=resource.kind, id=resource.id, elements=elements)


def remove_subtree(resource: Resource, path: str) -> Resource:
    """Remove the element at ``path`` and every element below it."""
    prefix = path + "."
    elements = {
        p: v
        for p, v in resource.elements.items()
        if p != path and not p.startswith(prefix)
    }
    return Resource(kind=resource.kind, id=resource.id, elements=elements)


def subtree_paths(resource: Resource, path: str) -> list[str]:
    prefix = path + "."
    return [p for p in resource.elements if p == path or p.startswith(prefix)]


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------


def _leaf_to_json(value: ElementValue) -> Any:
    if value.kind == ValueKind.CODED:
        system, code = value.value
        return {"system": system, "code": code}
    return value.value


def _unflatten(elements: dict[str, ElementValue], force_object_root: bool) -> Any:
    root: dict[str, Any] = {}
    for path, value in elements.items():
        segs = path.split(".")
        node = root
        for seg in segs[:-1]:
            node = node.setdefault(seg, {})
            if not isinstance(node, dict):
                raise MalformedPayload(f"path conflict under {path}")
        if segs[-1] in node:
            raise MalformedPayload(f"duplicate leaf at {path}")
        node[segs[-1]] = _leaf_to_json(value)
    return _materialize(root, is_root=True, force_object=force_object_root)


def _materialize(node: Any, is_root: bool = False, force_object: bool = False) -> Any:
    if not isinstance(node, dict):
        return node
    keys = list(node.keys())
    as_array = (
        not force_object
        and not is_root
        and keys
        and all(_ARRAY_INDEX_RE.match(k) for k in keys)
    )
    if as_array:
        # Sparse indices (possible after subtree removal) are compacted.
        ordered = sorted(keys, key=int)
        return [_materialize(node[k]) for k in ordered]
    return {k: _materialize(v) for k, v in node.items()}


def _emit_canonical(value: Any) -> str:
    if value is None:
        raise MalformedPayload("cannot serialize null")
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, int):
        return str(value)
    if isinstance(value, Decimal):
        return _format_decimal(value)
    if isinstance(value, str):
        return json.dumps(value, ensure_ascii=False)
    if isinstance(value, list):
        return "[" + ",".join(_emit_canonical(v) for v in value) + "]"
    if isinstance(value, dict):
        parts = []
        for k in sorted(value.keys()):
            parts.append(json.dumps(k, ensure_ascii=False) + ":" + _emit_canonical(value[k]))
        return "{" + ",".join(parts) + "}"
    raise MalformedPayload(f"cannot serialize {type(value).__name__}")


def _format_decimal(d: Decimal) -> str:
    # Canonical form keeps a trailing ".0" on integral decimals so the
    # integer/decimal distinction survives a round trip.
    n = d.normalize()
    plain = format(n, "f")
    if "." not in plain:
        plain += ".0"
    return plain


def serialize_resource(resource: Resource) -> str:
    """Canonical JSON: keys sorted, compact separators, round-trip stable."""
    if resource.kind == ResourceKind.DICOM_STUDY_META:
        tree = _unflatten(resource.elements, force_object_root=True)
        return _emit_canonical(tree)
    tree = _unflatten(resource.elements, force_object_root=False)
    tree["resourceType"] = resource.kind.value
    if resource.id:
        tree["id"] = resource.id
    return _emit_canonical(tree)


def normalize(resource: Resource) -> Resource:
    """Re-parse the canonical serialization (compacts arrays after edits)."""
    hint = resource.kind if resource.kind == ResourceKind.DICOM_STUDY_META else None
    return parse_resource(serialize_resource(resource), kind_hint=hint)


def dicom_tags(resource: Resource) -> list[DicomTag]:
    """Tag-level view of a DicomStudyMeta resource, ordered by tag."""
    if resource.kind != ResourceKind.DICOM_STUDY_META:
        raise ValueError("dicom_tags requires a DicomStudyMeta resource")
    tags: dict[str, DicomTag] = {}
    for path in resource.elements:
        tag = path.split(".", 1)[0]
        if tag in tags:
            continue
        vr_el = resource.elements.get(f"{tag}.vr")
        vr = vr_el.value if vr_el is not None else ""
        value = first_tag_value(resource, tag)
        tags[tag] = DicomTag(
            group=int(tag[:4], 16), element=int(tag[4:], 16), vr=vr, value=value
        )
    return [tags[t] for t in sorted(tags)]


def first_tag_value(resource: Resource, tag: str) -> ElementValue | None:
    """First leaf under ``<tag>.Value`` in document order, if any."""
    prefix = f"{tag}.Value"
    for path, value in resource.elements.items():
        if path == prefix or path.startswith(prefix + "."):
            return value
    return None


def iter_elements(resource: Resource) -> Iterator[tuple[str, ElementValue]]:
    return iter(resource.elements.items())
