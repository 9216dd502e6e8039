"""Minimal S3-style object store on the local filesystem.

Bucket and key map onto directories under one root; every object
carries a sidecar metadata record with its attestation, uploader, and
SHA-256 digest.  Reads re-hash the data file and fail closed on any
mismatch, so a corrupted or hand-edited object can never be served as
attested content.

Layout: <root>/<bucket>/data/<key> plus <root>/<bucket>/meta/<key>.json
"""

from __future__ import annotations

import hashlib
import json
import os
import re
import threading
from dataclasses import dataclass
from datetime import datetime, timezone
from enum import Enum
from pathlib import Path
from typing import Optional


class StoreError(Exception):
    pass


class NotFound(StoreError):
    pass


class BadName(StoreError):
    pass


class StorageFailure(StoreError):
    pass


class Attestation(str, Enum):
    DEID_VERIFIED = "DeidVerified"
    OPERATOR_ATTESTED = "OperatorAttested"


_BUCKET_RE = re.compile(r"^[a-z0-9][a-z0-9._-]{0,62}$")
_KEY_SEGMENT_RE = re.compile(r"^[A-Za-z0-9._-]+$")


def check_bucket(bucket: str) -> str:
    if not _BUCKET_RE.match(bucket):
        raise BadName(f"invalid bucket name {bucket!r}")
    return bucket


def check_key(key: str) -> str:
    segments = key.split("/")
    if not key or len(key) > 900:
        raise BadName("empty or oversized key")
    for seg in segments:
        if not _KEY_SEGMENT_RE.match(seg) or seg in (".", ".."):
            raise BadName(f"invalid key {key!r}")
    return key


@dataclass(frozen=True)
class StoredObject:
    bucket: str
    key: str
    data: bytes
    attestation: Attestation
    uploader: str
    content_digest: bytes

    def ref(self) -> str:
        return f"{self.bucket}/{self.key}"


@dataclass(frozen=True)
class ObjectSummary:
    key: str
    size: int
    attestation: Attestation
    uploader: str
    content_digest: bytes

    def to_json(self) -> dict:
        return {
            "key": self.key,
            "size": self.size,
            "attestation": self.attestation.value,
            "uploader": self.uploader,
            "content_digest": self.content_digest.hex(),
        }


class ObjectStore:
    def __init__(self, root: str | os.PathLike):
        self._root = Path(root)
        self._root.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()

    @property
    def root(self) -> Path:
        return self._root

    def _data_path(self, bucket: str, key: str) -> Path:
        return self._root / bucket / "data" / key

    def _meta_path(self, bucket: str, key: str) -> Path:
        return self._root / bucket / "meta" / (key + ".json")

    def put(
        self,
        bucket: str,
        key: str,
        data: bytes,
        attestation: Attestation,
        uploader: str,
    ) -> StoredObject:
        check_bucket(bucket)
        check_key(key)
        attestation = Attestation(attestation)
        digest = hashlib.sha256(data).digest()
        meta = {
            "attestation": attestation.value,
            "uploader": uploader,
            "content_digest": digest.hex(),
            "size": len(data),
            "created_at": datetime.now(timezone.utc).isoformat(),
        }
        data_path = self._data_path(bucket, key)
        meta_path = self._meta_path(bucket, key)
        with self._lock:
            try:
                data_path.parent.mkdir(parents=True, exist_ok=True)
                meta_path.parent.mkdir(parents=True, exist_ok=True)
                tmp_data = data_path.with_name(data_path.name + ".tmp")
                tmp_meta = meta_path.with_name(meta_path.name + ".tmp")
                tmp_data.write_bytes(data)
                tmp_meta.write_text(json.dumps(meta, sort_keys=True), encoding="utf-8")
                tmp_data.replace(data_path)
                tmp_meta.replace(meta_path)
            except OSError as exc:
                raise StorageFailure(str(exc)) from exc
        return StoredObject(bucket, key, data, attestation, uploader, digest)

    def get(self, bucket: str, key: str) -> StoredObject:
        check_bucket(bucket)
        check_key(key)
        data_path = self._data_path(bucket, key)
        meta_path = self._meta_path(bucket, key)
        if not data_path.is_file() or not meta_path.is_file():
            raise NotFound(f"{bucket}/{key}")
        try:
            data = data_path.read_bytes()
            meta = json.loads(meta_path.read_text(encoding="utf-8"))
        except (OSError, ValueError) as exc:
            raise StorageFailure(str(exc)) from exc
        digest = hashlib.sha256(data).digest()
        if digest.hex() != meta.get("content_digest"):
            raise StorageFailure(f"digest mismatch for {bucket}/{key}")
        return StoredObject(
            bucket=bucket,
            key=key,
            data=data,
            attestation=Attestation(meta["attestation"]),
            uploader=meta.get("uploader", ""),
            content_digest=digest,
        )

    def head(self, bucket: str, key: str) -> ObjectSummary:
        obj = self.get(bucket, key)
        return ObjectSummary(
            key=obj.key,
            size=len(obj.data),
            attestation=obj.attestation,
            uploader=obj.uploader,
            content_digest=obj.content_digest,
        )

    def exists(self, bucket: str, key: str) -> bool:
        try:
            check_bucket(bucket)
            check_key(key)
        except BadName:
            return False
        return self._data_path(bucket, key).is_file()

    def delete(self, bucket: str, key: str) -> None:
        check_bucket(bucket)
        check_key(key)
        data_path = self._data_path(bucket, key)
        meta_path = self._meta_path(bucket, key)
        with self._lock:
            if not data_path.is_file():
                raise NotFound(f"{bucket}/{key}")
            try:
                data_path.unlink()
                meta_path.unlink(missing_ok=True)
            except OSError as exc:
                raise StorageFailure(str(exc)) from exc

    def list(self, bucket: str) -> list[ObjectSummary]:
        check_bucket(bucket)
        base = self._root / bucket / "data"
        if not base.is_dir():
            return []
        keys = sorted(
            str(p.relative_to(base)).replace(os.sep, "/")
            for p in base.rglob("*")
            if p.is_file() and not p.name.endswith(".tmp")
        )
        return [self.head(bucket, k) for k in keys]

    def buckets(self) -> list[str]:
        return sorted(p.name for p in self._root.iterdir() if p.is_dir())
