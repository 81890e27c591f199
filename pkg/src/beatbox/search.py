"""Stored searches over completed experiments, leaderboard change
notifications, and lockable multi-experiment reports."""
from __future__ import annotations

import fcntl
import time
import uuid
from pathlib import Path
from typing import Callable

from .canonical import canonical_bytes, canonical_digest, canonical_loads
from .governance import (
    AccessControl,
    GovernanceError,
    Principal,
    attested_numbers,
    default_policy,
    results_path,
)
from .model import ObjectRef
from .store import ANY, DocumentStore, Write, envelope_ref, object_path

FILTER_FIELDS = ("toolchain", "algorithm", "database", "protocol", "owner", "status")
FILTER_OPS = ("equals", "prefix", "contains")


class SearchError(Exception):
    def __init__(self, message: str, code: str = "bad_request") -> None:
        super().__init__(message)
        self.code = code


def validate_search_spec(spec: dict) -> dict:
    filters = []
    for f in spec.get("filters", []):
        field, op, value = f.get("field"), f.get("op"), f.get("value")
        if field not in FILTER_FIELDS:
            raise SearchError(f"unknown filter field {field!r}")
        if op not in FILTER_OPS:
            raise SearchError(f"unknown filter operator {op!r}")
        if not isinstance(value, str):
            raise SearchError("filter values must be strings")
        filters.append({"field": field, "op": op, "value": value})
    columns = []
    sorted_columns = 0
    for c in spec.get("columns", []):
        name = c.get("name")
        if not isinstance(name, str) or not name:
            raise SearchError("display columns need a result name")
        direction = c.get("sort")
        if direction not in (None, "asc", "desc"):
            raise SearchError(f"unknown sort direction {direction!r}")
        if direction is not None:
            sorted_columns += 1
        columns.append({"name": name, "sort": direction})
    if sorted_columns > 1:
        raise SearchError("at most one sort column")
    return {
        "filters": filters,
        "columns": columns,
        "leaderboard": bool(spec.get("leaderboard", False)),
        "doc": spec.get("doc", ""),
        "webhook": spec.get("webhook"),
    }


def _experiment_attributes(envelope: dict, results_doc: dict) -> dict[str, list[str]]:
    spec = envelope["spec"]
    algorithms, databases, protocols = [], [], []
    for assignment in spec.get("assignments", {}).values():
        if "algorithm" in assignment:
            algorithms.append(assignment["algorithm"])
        if "database" in assignment:
            databases.append(assignment["database"])
            protocols.append(assignment["protocol"])
    return {
        "toolchain": [spec.get("toolchain", "")],
        "algorithm": algorithms,
        "database": databases,
        "protocol": protocols,
        "owner": [envelope["owner"]],
        "status": [results_doc.get("state", "")],
    }


def _matches(attributes: dict[str, list[str]], flt: dict) -> bool:
    values = attributes.get(flt["field"], [])
    needle = flt["value"]
    if flt["op"] == "equals":
        return needle in values
    if flt["op"] == "prefix":
        return any(v.startswith(needle) for v in values)
    return any(needle in v for v in values)


def _flatten_results(results: dict) -> dict[str, object]:
    flat: dict[str, object] = {}
    for block in sorted(results):
        for name, payload in results[block].items():
            flat.setdefault(name, payload.get("value"))
    return flat


def run_search(
    store: DocumentStore,
    access: AccessControl,
    principal: Principal,
    query_spec: dict,
    *,
    clock: Callable[[], float] = time.time,
) -> dict:
    """Evaluate a stored search for a principal; deterministic row order."""
    spec = validate_search_spec(query_spec)
    rows = []
    for path in store.list("objects/experiment"):
        envelope = store.read(path)
        if envelope is None or not access.can_view(principal, envelope):
            continue
        exp_ref = envelope_ref(envelope)
        results_doc = store.read(results_path(exp_ref))
        if results_doc is None or results_doc.get("state") != "done":
            continue
        attributes = _experiment_attributes(envelope, results_doc)
        if not all(_matches(attributes, f) for f in spec["filters"]):
            continue
        flat = _flatten_results(results_doc.get("results", {}))
        numbers = attested_numbers(store, exp_ref)
        rows.append(
            {
                "experiment": exp_ref.render(),
                "owner": envelope["owner"],
                "values": {c["name"]: flat.get(c["name"]) for c in spec["columns"]},
                "attestation": numbers[0] if numbers else None,
            }
        )

    sort_column = next((c for c in spec["columns"] if c["sort"]), None)
    rows.sort(key=lambda r: r["experiment"])
    if sort_column is not None:
        name = sort_column["name"]
        reverse = sort_column["sort"] == "desc"
        present = [r for r in rows if r["values"].get(name) is not None]
        absent = [r for r in rows if r["values"].get(name) is None]

        def rank(row):
            value = row["values"][name]
            if isinstance(value, bool):
                return (0, int(value))
            if isinstance(value, (int, float)):
                return (0, float(value))
            return (1, str(value))

        try:
            present.sort(key=rank, reverse=reverse)
        except TypeError:
            present.sort(key=lambda r: str(r["values"][name]), reverse=reverse)
        # missing values sort after present ones regardless of direction
        rows = present + absent

    return {"rows": rows, "computed_at": clock()}


def search_result_digest(result: dict) -> str:
    return canonical_digest(result["rows"])


def _append_log(path: Path, doc: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "ab") as fh:
        fcntl.flock(fh, fcntl.LOCK_EX)
        try:
            fh.write(canonical_bytes(doc) + b"\n")
            fh.flush()
        finally:
            fcntl.flock(fh, fcntl.LOCK_UN)


def read_log(path: Path) -> list[dict]:
    if not path.exists():
        return []
    entries = []
    for line in path.read_bytes().splitlines():
        line = line.strip()
        if not line:
            continue
        try:
            entries.append(canonical_loads(line))
        except ValueError:
            continue  # torn tail line
    return entries


def _search_state_path(ref: ObjectRef) -> str:
    return f"search_state/{ref.render()}.json"


def evaluate_leaderboards(
    store: DocumentStore,
    access: AccessControl,
    notifications_log: Path,
    resolve_principal: Callable[[str], Principal],
    *,
    clock: Callable[[], float] = time.time,
    webhook_poster: Callable[[str, dict], None] | None = None,
) -> list[dict]:
    """Re-run every leaderboard query; notify when the result digest changed.

    Evaluation runs under the query owner's visibility. Notifications go to
    a durable event log plus the query's optional webhook URL.
    """
    notifications = []
    for path in store.list("objects/search"):
        envelope = store.read(path)
        if envelope is None or not envelope["spec"].get("leaderboard"):
            continue
        ref = envelope_ref(envelope)
        owner = resolve_principal(envelope["owner"])
        result = run_search(store, access, owner, envelope["spec"], clock=clock)
        digest = search_result_digest(result)
        state_path = _search_state_path(ref)
        state = store.read(state_path)
        old_digest = state.get("digest") if state else None
        if old_digest == digest:
            continue
        store.commit(
            [Write(path=state_path, expected=None if state is None else ANY, doc={"digest": digest})]
        )
        notification = {
            "id": uuid.uuid4().hex,
            "query": ref.render(),
            "old": old_digest,
            "new": digest,
            "timestamp": clock(),
            "recipients": [envelope["owner"]],
        }
        _append_log(notifications_log, notification)
        webhook = envelope["spec"].get("webhook")
        if webhook and webhook_poster is not None:
            webhook_poster(webhook, notification)
        notifications.append(notification)
    return notifications


def create_report(
    store: DocumentStore,
    principal: Principal,
    ref: ObjectRef,
    spec: dict,
    *,
    number: str,
    clock: Callable[[], float] = time.time,
) -> dict:
    """Create a report over attested experiments; returns the envelope."""
    access = AccessControl(store)
    experiments = spec.get("experiments", [])
    if not isinstance(experiments, list):
        raise SearchError("experiments must be a list of refs")
    for exp_text in experiments:
        exp_ref = ObjectRef.parse("experiment", exp_text)
        envelope = store.read(object_path(exp_ref))
        if envelope is None or not access.can_view(principal, envelope):
            raise SearchError(f"experiment {exp_text} not found or not visible", code="not_found")
        if not attested_numbers(store, exp_ref):
            raise SearchError(f"experiment {exp_text} is not attested")
    report_spec = {
        "number": number,
        "title": spec.get("title", ""),
        "doc": spec.get("doc", ""),
        "experiments": list(experiments),
        "queries": list(spec.get("queries", [])),
        "locked": False,
    }
    doc = {
        "kind": "report",
        "owner": ref.owner,
        "name": ref.name,
        "version": ref.version,
        "spec": report_spec,
        "policy": default_policy(),
        "frozen": False,
        "lineage": {"predecessor": None, "author": principal.name, "created_at": clock()},
    }
    store.commit([Write(path=object_path(ref), expected=None, doc=doc)])
    return doc


def report_by_number(store: DocumentStore, number: str) -> dict | None:
    for path in store.list("objects/report"):
        doc = store.read(path)
        if doc and doc["spec"].get("number") == number:
            return doc
    return None


def lock_report(store: DocumentStore, principal: Principal, number: str) -> dict:
    """Lock a report: immutable afterwards, readable anonymously by number."""
    doc = report_by_number(store, number)
    if doc is None:
        raise SearchError(f"no report numbered {number}", code="not_found")
    if doc["owner"] != principal.name and not principal.is_admin:
        raise GovernanceError("only the owner may lock a report")
    if doc["spec"].get("locked"):
        raise SearchError(f"report {number} is already locked", code="conflict")
    updated = {
        **doc,
        "spec": {**doc["spec"], "locked": True},
        "policy": {**doc["policy"], "level": "public", "users": [], "teams": []},
        "frozen": True,
    }
    store.commit(
        [Write(path=object_path(envelope_ref(doc)), expected=canonical_digest(doc), doc=updated)]
    )
    return updated
