"""Filesystem document store: snapshot reads, optimistic concurrency, and
all-or-nothing multi-document commits.

Documents are canonical-JSON files under the data directory. A commit
verifies expected digests under an exclusive lock, stages new contents, then
writes a commit marker before moving files into place; recovery rolls
forward marked transactions so a crash leaves either none or all of a
commit's writes visible.
"""
from __future__ import annotations

import fcntl
import os
import shutil
import uuid
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Iterable

from .canonical import canonical_bytes, canonical_digest, canonical_loads
from .model import ObjectRef

# Sentinel: skip the precondition check for this write.
ANY = "__any__"

WriteCheck = Callable[[str, "dict | None", "dict | None"], None]


class StoreError(Exception):
    pass


class StoreConflict(StoreError):
    """A precondition digest was stale at commit time."""


class CorruptStoreError(StoreError):
    pass


@dataclass(frozen=True)
class Write:
    """One document write: create/replace (doc) or delete (doc=None).

    ``expected`` is the digest the current document must still have, None
    for "must not exist", or ANY to write unconditionally.
    """

    path: str
    expected: str | None
    doc: dict | None


def _check_rel_path(path: str) -> str:
    if path.startswith("/") or ".." in path.split("/"):
        raise StoreError(f"illegal document path {path!r}")
    return path


class DocumentStore:
    def __init__(self, root: str | Path, write_check: WriteCheck | None = None) -> None:
        self.root = Path(root)
        self.write_check = write_check
        (self.root / "store" / "pending").mkdir(parents=True, exist_ok=True)
        self._lock_path = self.root / "store" / "lock"
        self._lock_path.touch(exist_ok=True)
        self._recover()

    @contextmanager
    def _lock(self, exclusive: bool):
        with open(self._lock_path) as fh:
            fcntl.flock(fh, fcntl.LOCK_EX if exclusive else fcntl.LOCK_SH)
            try:
                yield
            finally:
                fcntl.flock(fh, fcntl.LOCK_UN)

    def _doc_file(self, path: str) -> Path:
        return self.root / _check_rel_path(path)

    def _read_unlocked(self, path: str) -> dict | None:
        file = self._doc_file(path)
        try:
            raw = file.read_bytes()
        except FileNotFoundError:
            return None
        try:
            return canonical_loads(raw)
        except ValueError as exc:
            raise CorruptStoreError(f"unreadable document {path}: {exc}") from exc

    def read(self, path: str) -> dict | None:
        with self._lock(exclusive=False):
            return self._read_unlocked(path)

    def read_many(self, paths: Iterable[str]) -> dict[str, dict | None]:
        """Consistent snapshot of several documents."""
        with self._lock(exclusive=False):
            return {p: self._read_unlocked(p) for p in paths}

    def digest_of(self, path: str) -> str | None:
        doc = self.read(path)
        return None if doc is None else canonical_digest(doc)

    def list(self, prefix: str) -> list[str]:
        """Document paths under a directory prefix, sorted."""
        base = self.root / _check_rel_path(prefix)
        if not base.is_dir():
            return []
        found = []
        with self._lock(exclusive=False):
            for file in base.rglob("*.json"):
                found.append(str(file.relative_to(self.root)))
        return sorted(found)

    def commit(self, writes: list[Write]) -> None:
        """Apply all writes atomically or raise (StoreConflict on stale digests)."""
        if not writes:
            return
        paths = [w.path for w in writes]
        if len(set(paths)) != len(paths):
            raise StoreError("duplicate paths in one commit")
        with self._lock(exclusive=True):
            current = {w.path: self._read_unlocked(w.path) for w in writes}
            for w in writes:
                old = current[w.path]
                if w.expected is None:
                    if old is not None:
                        raise StoreConflict(f"{w.path} already exists")
                elif w.expected != ANY:
                    if old is None or canonical_digest(old) != w.expected:
                        raise StoreConflict(f"{w.path} changed since it was read")
                if self.write_check is not None:
                    self.write_check(w.path, old, w.doc)
            self._apply(writes)

    def _apply(self, writes: list[Write]) -> None:
        txid = uuid.uuid4().hex
        pending = self.root / "store" / "pending"
        stage = pending / txid
        stage.mkdir(parents=True)
        manifest: list[dict] = []
        for i, w in enumerate(writes):
            entry: dict[str, Any] = {"path": w.path}
            if w.doc is not None:
                staged = stage / f"{i}.json"
                with open(staged, "wb") as fh:
                    fh.write(canonical_bytes(w.doc))
                    fh.flush()
                    os.fsync(fh.fileno())
                entry["file"] = f"{i}.json"
            else:
                entry["file"] = None
            manifest.append(entry)
        marker_tmp = pending / f"{txid}.tmp"
        with open(marker_tmp, "wb") as fh:
            fh.write(canonical_bytes({"writes": manifest}))
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(marker_tmp, pending / f"{txid}.commit")  # commit point
        self._roll_forward(txid)

    def _roll_forward(self, txid: str) -> None:
        pending = self.root / "store" / "pending"
        marker = pending / f"{txid}.commit"
        manifest = canonical_loads(marker.read_bytes())
        stage = pending / txid
        for entry in manifest["writes"]:
            target = self._doc_file(entry["path"])
            if entry["file"] is None:
                try:
                    target.unlink()
                except FileNotFoundError:
                    pass
            else:
                staged = stage / entry["file"]
                if staged.exists():
                    target.parent.mkdir(parents=True, exist_ok=True)
                    os.replace(staged, target)
        marker.unlink()
        shutil.rmtree(stage, ignore_errors=True)

    def _recover(self) -> None:
        pending = self.root / "store" / "pending"
        with self._lock(exclusive=True):
            for marker in sorted(pending.glob("*.commit")):
                self._roll_forward(marker.stem)
            for leftover in pending.iterdir():
                if leftover.suffix == ".tmp":
                    leftover.unlink(missing_ok=True)
                elif leftover.is_dir():
                    shutil.rmtree(leftover, ignore_errors=True)


def object_path(ref: ObjectRef) -> str:
    return f"objects/{ref.kind}/{ref.owner}/{ref.name}/{ref.version}.json"


def ref_from_path(path: str) -> ObjectRef:
    parts = path.split("/")
    if len(parts) < 5 or parts[0] != "objects" or not parts[-1].endswith(".json"):
        raise StoreError(f"not an object path: {path!r}")
    kind, owner = parts[1], parts[2]
    name = "/".join(parts[3:-1])
    version = int(parts[-1][: -len(".json")])
    return ObjectRef(kind=kind, owner=owner, name=name, version=version)


def envelope(
    ref: ObjectRef,
    spec: dict,
    *,
    policy: dict | None = None,
    frozen: bool = False,
    author: str = "",
    predecessor: str | None = None,
    created_at: float = 0.0,
) -> dict:
    """Standard stored form of a platform object."""
    return {
        "kind": ref.kind,
        "owner": ref.owner,
        "name": ref.name,
        "version": ref.version,
        "spec": spec,
        "policy": policy
        or {"level": "private", "users": [], "teams": [], "code_access": "open"},
        "frozen": frozen,
        "lineage": {
            "predecessor": predecessor,
            "author": author or ref.owner,
            "created_at": created_at,
        },
    }


def envelope_ref(doc: dict) -> ObjectRef:
    return ObjectRef(kind=doc["kind"], owner=doc["owner"], name=doc["name"], version=doc["version"])
