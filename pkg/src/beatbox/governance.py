"""Access control, attestation freezing, version lineage, and export policy.

Freezing is enforced at the persistence layer: the store's write check
rejects any change to a frozen document except an access widening, so no
code path can mutate an attested object.
"""
from __future__ import annotations

import random
import time
from dataclasses import dataclass, field

from .canonical import canonical_digest
from .model import (
    AlgorithmSpec,
    DataFormat,
    DatabaseSpec,
    DatasetAssignment,
    ExperimentSpec,
    ObjectRef,
    ToolchainSpec,
    TypeSpec,
)
from .store import DocumentStore, Write, object_path

LEVELS = ("private", "shared", "public")
CODE_ACCESS = ("open", "executable-only")


class GovernanceError(Exception):
    def __init__(self, message: str, code: str = "forbidden") -> None:
        super().__init__(message)
        self.code = code


class FrozenViolation(GovernanceError):
    def __init__(self, message: str) -> None:
        super().__init__(message, code="frozen")


@dataclass(frozen=True)
class Principal:
    name: str
    is_admin: bool = False


ANONYMOUS = Principal(name="", is_admin=False)


def default_policy() -> dict:
    return {"level": "private", "users": [], "teams": [], "code_access": "open"}


def validate_policy(policy: dict) -> dict:
    if not isinstance(policy, dict):
        raise GovernanceError("policy must be an object", code="bad_request")
    level = policy.get("level")
    if level not in LEVELS:
        raise GovernanceError(f"unknown sharing level {level!r}", code="bad_request")
    users = sorted(set(policy.get("users", [])))
    teams = sorted(set(policy.get("teams", [])))
    if level == "shared" and not (users or teams):
        raise GovernanceError("shared level requires at least one user or team", code="bad_request")
    if level != "shared" and (users or teams):
        raise GovernanceError("user/team lists only apply to the shared level", code="bad_request")
    code_access = policy.get("code_access", "open")
    if code_access not in CODE_ACCESS:
        raise GovernanceError(f"unknown code access {code_access!r}", code="bad_request")
    return {"level": level, "users": users, "teams": teams, "code_access": code_access}


def policy_widens(old: dict, new: dict) -> bool:
    """True iff every audience member under ``old`` is kept under ``new``."""
    rank = {level: i for i, level in enumerate(LEVELS)}
    if rank[new["level"]] < rank[old["level"]]:
        return False
    if old["level"] == "shared" and new["level"] == "shared":
        if not set(new["users"]) >= set(old["users"]):
            return False
        if not set(new["teams"]) >= set(old["teams"]):
            return False
    if old.get("code_access", "open") == "open" and new.get("code_access", "open") != "open":
        return False
    return True


def frozen_write_check(path: str, old: dict | None, new: dict | None) -> None:
    """Store-level choke point: frozen documents only ever widen access."""
    if old is None or not old.get("frozen"):
        return
    if new is None:
        raise FrozenViolation(f"cannot delete frozen object {path}")
    if new.get("spec") != old.get("spec"):
        raise FrozenViolation(f"cannot modify frozen object {path}")
    if not new.get("frozen"):
        raise FrozenViolation(f"cannot thaw frozen object {path}")
    for key in ("kind", "owner", "name", "version", "lineage"):
        if new.get(key) != old.get(key):
            raise FrozenViolation(f"cannot rewrite {key} of frozen object {path}")
    if not policy_widens(old.get("policy", default_policy()), new.get("policy", default_policy())):
        raise FrozenViolation(f"cannot narrow access to frozen object {path}")


class AccessControl:
    """Visibility and execution rights over stored object envelopes."""

    def __init__(self, store: DocumentStore) -> None:
        self.store = store

    def _team_members(self, team_ref: str) -> set[str]:
        try:
            ref = ObjectRef.parse("team", team_ref)
        except ValueError:
            return set()
        doc = self.store.read(object_path(ref))
        if doc is None:
            return set()
        return set(doc["spec"].get("members", []))

    def can_view(self, principal: Principal, doc: dict) -> bool:
        if principal.is_admin or principal.name == doc.get("owner"):
            return True
        if doc.get("kind") == "team" and principal.name in doc.get("spec", {}).get("members", []):
            return True  # teams are visible to their own members
        policy = doc.get("policy", default_policy())
        if policy["level"] == "public":
            return True
        if policy["level"] == "shared":
            if principal.name in policy["users"]:
                return True
            return any(principal.name in self._team_members(t) for t in policy["teams"])
        return False

    def can_execute(self, principal: Principal, doc: dict) -> bool:
        # Sharing grants execution even when the source stays hidden.
        return self.can_view(principal, doc)

    def can_view_source(self, principal: Principal, doc: dict) -> bool:
        if principal.is_admin or principal.name == doc.get("owner"):
            return self.can_view(principal, doc)
        return self.can_view(principal, doc) and doc.get("policy", {}).get("code_access", "open") == "open"

    def share(self, principal: Principal, ref: ObjectRef, policy: dict) -> dict:
        """Replace an object's sharing policy; frozen objects only widen."""
        path = object_path(ref)
        doc = self.store.read(path)
        if doc is None:
            raise GovernanceError(f"unknown object {ref.render()}", code="not_found")
        if not (principal.is_admin or principal.name == doc["owner"]):
            raise GovernanceError("only the owner may change sharing")
        new_policy = validate_policy(policy)
        if doc.get("frozen") and not policy_widens(doc["policy"], new_policy):
            raise FrozenViolation(f"cannot narrow access to frozen object {ref.render()}")
        updated = {**doc, "policy": new_policy}
        self.store.commit([Write(path=path, expected=canonical_digest(doc), doc=updated)])
        return updated


def results_path(experiment: ObjectRef) -> str:
    return f"results/{experiment.render()}.json"


def attestation_path(number: str) -> str:
    return f"objects/attestation/{number}.json"


@dataclass(frozen=True)
class Attestation:
    number: str
    experiment: str
    closure: tuple[dict, ...]  # [{kind, ref}]
    created_at: float
    results: dict
    result_digest: str
    cache_keys: dict[str, str] = field(default_factory=dict)

    def to_doc(self) -> dict:
        return {
            "number": self.number,
            "experiment": self.experiment,
            "closure": list(self.closure),
            "created_at": self.created_at,
            "results": self.results,
            "result_digest": self.result_digest,
            "cache_keys": self.cache_keys,
        }

    @classmethod
    def from_doc(cls, doc: dict) -> Attestation:
        return cls(
            number=doc["number"],
            experiment=doc["experiment"],
            closure=tuple(doc["closure"]),
            created_at=doc["created_at"],
            results=doc["results"],
            result_digest=doc["result_digest"],
            cache_keys=dict(doc.get("cache_keys", {})),
        )


def _format_closure(store: DocumentStore, ref: ObjectRef, seen: set[ObjectRef]) -> None:
    if ref in seen:
        return
    seen.add(ref)
    doc = store.read(object_path(ref))
    if doc is None:
        raise GovernanceError(f"closure member {ref.render()} is missing", code="not_found")
    fmt = DataFormat.from_doc(ref, doc["spec"])

    def walk(ts: TypeSpec) -> None:
        if ts.nested is not None:
            _format_closure(store, ts.nested, seen)
        elif ts.element is not None:
            walk(ts.element)

    for ts in fmt.fields.values():
        walk(ts)


def experiment_closure(store: DocumentStore, exp: ExperimentSpec) -> list[ObjectRef]:
    """Transitive refs an attestation must freeze: toolchain, algorithms,
    databases, and every format they mention (nested formats included)."""
    formats: set[ObjectRef] = set()
    members: set[ObjectRef] = {exp.toolchain}
    tc_doc = store.read(object_path(exp.toolchain))
    if tc_doc is None:
        raise GovernanceError(f"unresolved toolchain {exp.toolchain.render()}", code="not_found")
    ToolchainSpec.from_doc(exp.toolchain, tc_doc["spec"])  # structural check

    for assignment in exp.assignments.values():
        if isinstance(assignment, DatasetAssignment):
            members.add(assignment.database)
            db_doc = store.read(object_path(assignment.database))
            if db_doc is None:
                raise GovernanceError(
                    f"unresolved database {assignment.database.render()}", code="not_found"
                )
            db = DatabaseSpec.from_doc(assignment.database, db_doc["spec"])
            for protocol in db.protocols:
                for set_spec in protocol.sets:
                    for fmt_ref in set_spec.view.outputs.values():
                        _format_closure(store, fmt_ref, formats)
        else:
            members.add(assignment.algorithm)
            alg_doc = store.read(object_path(assignment.algorithm))
            if alg_doc is None:
                raise GovernanceError(
                    f"unresolved algorithm {assignment.algorithm.render()}", code="not_found"
                )
            alg = AlgorithmSpec.from_doc(assignment.algorithm, alg_doc["spec"])
            for fmt_ref in list(alg.inputs.values()) + list(alg.outputs.values()):
                _format_closure(store, fmt_ref, formats)
    return sorted(members | formats)


def _fresh_number(store: DocumentStore, rng: random.Random) -> str:
    for _ in range(100):
        number = "".join(rng.choices("0123456789", k=9))
        if store.read(attestation_path(number)) is None:
            return number
    raise GovernanceError("could not allocate an attestation number", code="conflict")


def attest(
    store: DocumentStore,
    principal: Principal,
    experiment_ref: ObjectRef,
    *,
    code_access: dict[str, str] | None = None,
    rng: random.Random | None = None,
    clock=time.time,
) -> Attestation:
    """Freeze an experiment's closure and persist a numbered snapshot.

    The experiment must have completed successfully and belong to the
    caller. Closure members owned by others must already be public.
    """
    code_access = code_access or {}
    rng = rng or random.SystemRandom()
    exp_path = object_path(experiment_ref)
    exp_doc = store.read(exp_path)
    if exp_doc is None:
        raise GovernanceError(f"unknown experiment {experiment_ref.render()}", code="not_found")
    if exp_doc["owner"] != principal.name and not principal.is_admin:
        raise GovernanceError("only the experiment owner may attest it")
    results_doc = store.read(results_path(experiment_ref))
    if results_doc is None or results_doc.get("state") != "done":
        raise GovernanceError("experiment has not completed successfully", code="conflict")

    exp = ExperimentSpec.from_doc(experiment_ref, exp_doc["spec"])
    closure = experiment_closure(store, exp)

    docs = store.read_many([object_path(r) for r in closure])
    blockers = []
    for ref in closure:
        doc = docs[object_path(ref)]
        if doc is None:
            raise GovernanceError(f"closure member {ref.render()} is missing", code="not_found")
        if doc["owner"] not in (principal.name,) and not principal.is_admin:
            if doc["policy"]["level"] != "public":
                blockers.append(ref.render())
    if blockers:
        raise GovernanceError(
            "closure contains objects you may not publish: " + ", ".join(sorted(blockers)),
            code="conflict",
        )

    writes: list[Write] = []
    for ref in closure:
        path = object_path(ref)
        doc = docs[path]
        policy = dict(doc["policy"])
        policy["level"] = "public"
        policy["users"] = []
        policy["teams"] = []
        if ref.kind == "algorithm":
            opted = code_access.get(ref.render())
            if policy.get("code_access", "open") != "open":
                policy["code_access"] = "executable-only"
            elif doc["owner"] == principal.name and opted != "open":
                # owner did not opt into publishing the source
                if not doc.get("frozen"):
                    policy["code_access"] = "executable-only"
        if ref.kind == "database" and not doc.get("frozen"):
            # refs and protocol names become visible; loader payloads stay
            # admin-only at the API layer, raw data is never exportable
            policy["code_access"] = "executable-only"
        updated = {**doc, "policy": policy, "frozen": True}
        if updated != doc:
            writes.append(Write(path=path, expected=canonical_digest(doc), doc=updated))
    if not exp_doc.get("frozen"):
        exp_policy = {**exp_doc["policy"], "level": "public", "users": [], "teams": []}
        writes.append(
            Write(
                path=exp_path,
                expected=canonical_digest(exp_doc),
                doc={**exp_doc, "policy": exp_policy, "frozen": True},
            )
        )

    number = _fresh_number(store, rng)
    attestation = Attestation(
        number=number,
        experiment=experiment_ref.render(),
        closure=tuple({"kind": r.kind, "ref": r.render()} for r in closure),
        created_at=clock(),
        results=results_doc.get("results", {}),
        result_digest=canonical_digest(results_doc.get("results", {})),
        cache_keys=dict(results_doc.get("cache_keys", {})),
    )
    writes.append(Write(path=attestation_path(number), expected=None, doc=attestation.to_doc()))
    store.commit(writes)
    return attestation


def attested_numbers(store: DocumentStore, experiment_ref: ObjectRef) -> list[str]:
    numbers = []
    for path in store.list("objects/attestation"):
        doc = store.read(path)
        if doc and doc.get("experiment") == experiment_ref.render():
            numbers.append(doc["number"])
    return sorted(numbers)


def pinned_cache_keys(store: DocumentStore) -> set[str]:
    """Cache keys referenced by any attestation; the gc never evicts these."""
    pinned: set[str] = set()
    for path in store.list("objects/attestation"):
        doc = store.read(path)
        if doc:
            pinned.update(doc.get("cache_keys", {}).values())
    return pinned


def fork_version(
    store: DocumentStore,
    principal: Principal,
    source_ref: ObjectRef,
    *,
    clock=time.time,
) -> ObjectRef:
    """Copy an object into a fresh editable version with recorded lineage.

    Owners bump their own version counter; other users fork into their own
    namespace. Executable-only algorithms may be forked only by their owner.
    """
    access = AccessControl(store)
    doc = store.read(object_path(source_ref))
    if doc is None:
        raise GovernanceError(f"unknown object {source_ref.render()}", code="not_found")
    if not access.can_view(principal, doc):
        raise GovernanceError("you may not view this object")
    if (
        source_ref.kind == "algorithm"
        and doc["policy"].get("code_access", "open") != "open"
        and principal.name != doc["owner"]
    ):
        raise GovernanceError("executable-only algorithms may be forked only by their owner")

    owner = doc["owner"] if principal.name == doc["owner"] else principal.name
    version = 1
    prefix = f"objects/{source_ref.kind}/{owner}/{source_ref.name}"
    for path in store.list(prefix):
        existing = ref_from_path_safe(path)
        if existing and existing.name == source_ref.name:
            version = max(version, existing.version + 1)
    new_ref = ObjectRef(kind=source_ref.kind, owner=owner, name=source_ref.name, version=version)
    new_doc = {
        "kind": new_ref.kind,
        "owner": new_ref.owner,
        "name": new_ref.name,
        "version": new_ref.version,
        "spec": doc["spec"],
        "policy": default_policy(),
        "frozen": False,
        "lineage": {
            "predecessor": source_ref.render(),
            "author": principal.name,
            "created_at": clock(),
        },
    }
    store.commit([Write(path=object_path(new_ref), expected=None, doc=new_doc)])
    return new_ref


def ref_from_path_safe(path: str) -> ObjectRef | None:
    from .store import ref_from_path

    try:
        return ref_from_path(path)
    except Exception:
        return None


EXPORTABLE = ("results", "stats")
NEVER_EXPORTABLE = ("raw_dataset", "intermediate_channel")


def export_policy_check(principal: Principal, category: str) -> bool:
    """Raw dataset and intermediate channel payloads never leave the API,
    for any principal; analyzer results and stats are exportable subject to
    visibility checks made at the endpoint."""
    return category in EXPORTABLE


def lineage_chain(store: DocumentStore, ref: ObjectRef, limit: int = 100) -> list[str]:
    chain = []
    current: ObjectRef | None = ref
    while current is not None and len(chain) < limit:
        doc = store.read(object_path(current))
        if doc is None:
            break
        chain.append(current.render())
        predecessor = doc.get("lineage", {}).get("predecessor")
        current = ObjectRef.parse(ref.kind, predecessor) if predecessor else None
    return chain
