"""Validation of user-authored objects and configurator choice resolution."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Protocol

from .model import (
    AlgorithmAssignment,
    AlgorithmSpec,
    Assignment,
    DataFormat,
    DatabaseSpec,
    DatasetAssignment,
    ExperimentSpec,
    ObjectRef,
    Placement,
    ToolchainSpec,
    conforms,
)

_PROBE_PLACEMENT = Placement(queue="default", environment="default")


class UnresolvedRefError(LookupError):
    """A catalog lookup failed where the operation requires resolution."""


class Catalog(Protocol):
    """Read snapshot of the object store used by the validators."""

    def get(self, ref: ObjectRef): ...

    def list(self, kind: str) -> list[ObjectRef]: ...


class MemoryCatalog:
    """In-memory catalog for tests and standalone validation."""

    def __init__(self, objects: Iterable = ()) -> None:
        self._objects: dict[tuple[str, str, str, int], object] = {}
        for obj in objects:
            self.add(obj)

    def add(self, obj) -> None:
        ref: ObjectRef = obj.ref
        self._objects[(ref.kind, ref.owner, ref.name, ref.version)] = obj

    def get(self, ref: ObjectRef):
        return self._objects.get((ref.kind, ref.owner, ref.name, ref.version))

    def list(self, kind: str) -> list[ObjectRef]:
        return sorted(o.ref for o in self._objects.values() if o.ref.kind == kind)


@dataclass(frozen=True)
class Issue:
    severity: str  # "error" | "warning"
    path: str
    message: str


@dataclass(frozen=True)
class ValidationReport:
    issues: tuple[Issue, ...] = ()
    order: tuple[str, ...] = ()  # topological block order, toolchains only

    @property
    def ok(self) -> bool:
        return not any(i.severity == "error" for i in self.issues)

    def errors(self) -> list[Issue]:
        return [i for i in self.issues if i.severity == "error"]

    def to_doc(self) -> dict:
        return {
            "ok": self.ok,
            "issues": [
                {"severity": i.severity, "path": i.path, "message": i.message}
                for i in self.issues
            ],
            "order": list(self.order),
        }


class _Collector:
    def __init__(self) -> None:
        self.issues: list[Issue] = []

    def error(self, path: str, message: str) -> None:
        self.issues.append(Issue("error", path, message))

    def warning(self, path: str, message: str) -> None:
        self.issues.append(Issue("warning", path, message))


def _walk_nested_refs(ts) -> Iterable[ObjectRef]:
    if ts.nested is not None:
        yield ts.nested
    elif ts.element is not None:
        yield from _walk_nested_refs(ts.element)


def validate_format(fmt: DataFormat, catalog: Catalog) -> ValidationReport:
    """Check a data format: non-empty, resolvable nested refs, no cycles."""
    c = _Collector()
    root = fmt.ref.render()
    if not fmt.fields:
        c.error(root, "format must declare at least one field")

    # Depth-first walk over nested format references, detecting cycles and
    # dangling references. The starting format is taken as given (it may not
    # be in the catalog yet).
    def visit(ref_str: str, fields: dict, stack: tuple[str, ...]) -> None:
        for fname, ts in fields.items():
            for nested in _walk_nested_refs(ts):
                nstr = nested.render()
                path = f"{ref_str}.{fname}"
                if nstr in stack or nstr == root:
                    c.error(path, f"recursive format reference through {nstr}")
                    continue
                target = catalog.get(nested)
                if not isinstance(target, DataFormat):
                    c.error(path, f"unresolved reference {nstr}")
                    continue
                visit(nstr, target.fields, stack + (nstr,))

    visit(root, fmt.fields, (root,))
    return ValidationReport(issues=tuple(c.issues))


def check_compatibility(producer: ObjectRef, consumer: ObjectRef, catalog: Catalog) -> bool:
    """Nominal format compatibility: identical owner/name/version."""
    for ref in (producer, consumer):
        if not isinstance(catalog.get(ref), DataFormat):
            raise UnresolvedRefError(f"unresolved format reference {ref.render()}")
    return producer == consumer


def validate_toolchain(tc: ToolchainSpec) -> ValidationReport:
    """Check block wiring, sync channels, and acyclicity.

    On success the report carries a deterministic topological order (Kahn's
    algorithm, ties broken by ascending block name).
    """
    c = _Collector()
    names = [b.name for b in tc.blocks]
    blocks = {b.name: b for b in tc.blocks}
    if len(names) != len(set(names)):
        dupes = sorted({n for n in names if names.count(n) > 1})
        c.error(tc.ref.render(), f"duplicate block names: {', '.join(dupes)}")
    if not tc.blocks:
        c.error(tc.ref.render(), "toolchain has no blocks")

    for b in tc.blocks:
        path = f"{tc.ref.render()}.{b.name}"
        if len(set(b.inputs)) != len(b.inputs) or len(set(b.outputs)) != len(b.outputs):
            c.error(path, "duplicate endpoint names")
        if b.kind == "dataset":
            if b.inputs:
                c.error(path, "dataset blocks must not have input endpoints")
            if b.sync is not None:
                c.error(path, "dataset blocks have no sync channel")
            if not b.outputs:
                c.error(path, "dataset block must have at least one output endpoint")
        else:
            if not b.inputs:
                c.error(path, f"{b.kind} block must have at least one input endpoint")
            if b.sync is None:
                c.error(path, "missing sync channel")
            elif b.sync not in b.inputs:
                c.error(path, f"sync channel {b.sync!r} is not an input endpoint")
            if b.kind == "processing" and not b.outputs:
                c.error(path, "processing block must have at least one output endpoint")
            if b.kind == "analyzer" and b.outputs:
                c.error(path, "analyzer blocks must not have output endpoints")

    incoming: dict[tuple[str, str], int] = {}
    for conn in tc.connections:
        path = f"{conn.src_block}.{conn.src_endpoint}->{conn.dst_block}.{conn.dst_endpoint}"
        src = blocks.get(conn.src_block)
        dst = blocks.get(conn.dst_block)
        if src is None:
            c.error(path, f"unknown source block {conn.src_block!r}")
        elif conn.src_endpoint not in src.outputs:
            c.error(path, f"{conn.src_block!r} has no output endpoint {conn.src_endpoint!r}")
        elif src.kind == "analyzer":
            c.error(path, "analyzer blocks must not have outgoing connections")
        if dst is None:
            c.error(path, f"unknown destination block {conn.dst_block!r}")
        elif conn.dst_endpoint not in dst.inputs:
            c.error(path, f"{conn.dst_block!r} has no input endpoint {conn.dst_endpoint!r}")
        else:
            incoming[(conn.dst_block, conn.dst_endpoint)] = (
                incoming.get((conn.dst_block, conn.dst_endpoint), 0) + 1
            )

    for b in tc.blocks:
        for ep in b.inputs:
            count = incoming.get((b.name, ep), 0)
            if count == 0:
                c.error(f"{b.name}.{ep}", "dangling input endpoint (no incoming connection)")
            elif count > 1:
                c.error(f"{b.name}.{ep}", f"input endpoint has {count} incoming connections")

    # Kahn's algorithm over the block graph; deterministic tie-break by name.
    order: list[str] = []
    if len(set(names)) == len(names) and tc.blocks:
        preds: dict[str, set[str]] = {n: set() for n in names}
        succs: dict[str, set[str]] = {n: set() for n in names}
        for conn in tc.connections:
            if conn.src_block in blocks and conn.dst_block in blocks:
                preds[conn.dst_block].add(conn.src_block)
                succs[conn.src_block].add(conn.dst_block)
        remaining = {n: set(p) for n, p in preds.items()}
        ready = sorted(n for n, p in remaining.items() if not p)
        while ready:
            node = ready.pop(0)
            order.append(node)
            for succ in sorted(succs[node]):
                remaining[succ].discard(node)
                if not remaining[succ] and succ not in order and succ not in ready:
                    ready.append(succ)
            ready.sort()
        if len(order) != len(names):
            cyclic = sorted(set(names) - set(order))
            c.error(tc.ref.render(), f"cycle detected involving: {', '.join(cyclic)}")
            order = []

    report = ValidationReport(issues=tuple(c.issues), order=tuple(order))
    return report if report.ok else ValidationReport(issues=tuple(c.issues))


def _producer_format(
    assignment: Assignment, endpoint: str, catalog: Catalog
) -> ObjectRef | None:
    if isinstance(assignment, DatasetAssignment):
        db = catalog.get(assignment.database)
        if not isinstance(db, DatabaseSpec):
            return None
        protocol = db.protocol(assignment.protocol)
        if protocol is None:
            return None
        set_spec = protocol.set(assignment.set)
        if set_spec is None:
            return None
        return set_spec.view.outputs.get(endpoint)
    alg = catalog.get(assignment.algorithm)
    if not isinstance(alg, AlgorithmSpec):
        return None
    return alg.outputs.get(endpoint)


def _consumer_format(assignment: Assignment, endpoint: str, catalog: Catalog) -> ObjectRef | None:
    if isinstance(assignment, DatasetAssignment):
        return None
    alg = catalog.get(assignment.algorithm)
    if not isinstance(alg, AlgorithmSpec):
        return None
    return alg.inputs.get(endpoint)


def _check_assignment_shape(
    c: _Collector, block, assignment: Assignment, catalog: Catalog, path: str
) -> None:
    if block.kind == "dataset":
        if not isinstance(assignment, DatasetAssignment):
            c.error(path, "dataset block requires a database assignment")
            return
        db = catalog.get(assignment.database)
        if not isinstance(db, DatabaseSpec):
            c.error(path, f"unresolved database {assignment.database.render()}")
            return
        protocol = db.protocol(assignment.protocol)
        if protocol is None:
            c.error(path, f"database has no protocol {assignment.protocol!r}")
            return
        set_spec = protocol.set(assignment.set)
        if set_spec is None:
            c.error(path, f"protocol {assignment.protocol!r} has no set {assignment.set!r}")
            return
        if set(set_spec.view.outputs) != set(block.outputs):
            c.error(path, "view channels do not match block output endpoints")
        return

    if not isinstance(assignment, AlgorithmAssignment):
        c.error(path, f"{block.kind} block requires an algorithm assignment")
        return
    alg = catalog.get(assignment.algorithm)
    if not isinstance(alg, AlgorithmSpec):
        c.error(path, f"unresolved algorithm {assignment.algorithm.render()}")
        return
    if alg.kind != block.kind:
        c.error(path, f"{alg.kind} algorithm assigned to {block.kind} block")
    if set(alg.inputs) != set(block.inputs):
        c.error(path, "algorithm inputs do not match block input endpoints")
    if set(alg.outputs) != set(block.outputs):
        c.error(path, "algorithm outputs do not match block output endpoints")
    # Parameter values must type-check against the declared scalar specs.
    for pname, value in assignment.parameters.items():
        param = alg.parameters.get(pname)
        if param is None:
            c.error(f"{path}.{pname}", f"unknown parameter {pname!r}")
            continue
        for problem in conforms(value, param.type, {}, pname):
            c.error(f"{path}.{pname}", problem)


def validate_experiment(
    exp: ExperimentSpec,
    catalog: Catalog,
    *,
    queues: set[str] | None = None,
    environments: set[str] | None = None,
    partial: bool = False,
) -> ValidationReport:
    """Check assignments against the toolchain's typed wiring.

    With ``partial=True`` unassigned blocks and any connection touching one
    are skipped; used by choice resolution.
    """
    c = _Collector()
    exp_path = exp.ref.render()
    tc = catalog.get(exp.toolchain)
    if not isinstance(tc, ToolchainSpec):
        c.error(exp_path, f"unresolved toolchain {exp.toolchain.render()}")
        return ValidationReport(issues=tuple(c.issues))
    tc_report = validate_toolchain(tc)
    if not tc_report.ok:
        c.error(exp_path, f"toolchain {exp.toolchain.render()} is invalid")
        return ValidationReport(issues=tuple(c.issues))

    block_names = {b.name for b in tc.blocks}
    for name in exp.assignments:
        if name not in block_names:
            c.error(f"{exp_path}.{name}", f"assignment for unknown block {name!r}")
    if not partial:
        for name in sorted(block_names - set(exp.assignments)):
            c.error(f"{exp_path}.{name}", "block has no assignment")

    for b in tc.blocks:
        assignment = exp.assignments.get(b.name)
        if assignment is None:
            continue
        _check_assignment_shape(c, b, assignment, catalog, f"{exp_path}.{b.name}")

    for conn in tc.connections:
        src = exp.assignments.get(conn.src_block)
        dst = exp.assignments.get(conn.dst_block)
        if src is None or dst is None:
            continue
        produced = _producer_format(src, conn.src_endpoint, catalog)
        consumed = _consumer_format(dst, conn.dst_endpoint, catalog)
        if produced is None or consumed is None:
            continue  # shape errors already reported
        if produced != consumed:
            c.error(
                f"{conn.src_block}.{conn.src_endpoint}->{conn.dst_block}.{conn.dst_endpoint}",
                f"format mismatch: {produced.render()} vs {consumed.render()}",
            )

    if queues is not None or environments is not None:
        placements = [("default", exp.default_placement)]
        placements += sorted(exp.placements.items())
        for name, placement in placements:
            if name != "default" and name not in block_names:
                c.error(f"{exp_path}.placement.{name}", f"placement for unknown block {name!r}")
            if queues is not None and placement.queue not in queues:
                c.error(f"{exp_path}.placement.{name}", f"unknown queue {placement.queue!r}")
            if environments is not None and placement.environment not in environments:
                c.error(f"{exp_path}.placement.{name}", f"unknown environment {placement.environment!r}")

    return ValidationReport(issues=tuple(c.issues))


def resolve_choices(
    tc: ToolchainSpec,
    partial: dict[str, Assignment],
    catalog: Catalog,
) -> dict[str, list[ObjectRef]]:
    """Candidates per unassigned block that keep the experiment well-typed.

    A candidate is kept iff assigning it alongside ``partial`` produces zero
    errors under partial validation; lists are sorted by rendered ref.
    """
    tc_report = validate_toolchain(tc)
    if not tc_report.ok:
        raise ValueError(f"toolchain {tc.ref.render()} is invalid")

    def candidate_ok(block_name: str, assignment: Assignment) -> bool:
        probe = ExperimentSpec(
            ref=ObjectRef(kind="experiment", owner="probe", name="probe", version=1),
            toolchain=tc.ref,
            assignments={**partial, block_name: assignment},
            default_placement=_PROBE_PLACEMENT,
        )
        return validate_experiment(probe, catalog, partial=True).ok

    choices: dict[str, list[ObjectRef]] = {}
    for block in tc.blocks:
        if block.name in partial:
            continue
        found: list[ObjectRef] = []
        if block.kind == "dataset":
            for ref in catalog.list("database"):
                db = catalog.get(ref)
                if not isinstance(db, DatabaseSpec):
                    raise UnresolvedRefError(f"unresolved database {ref.render()}")
                fits = any(
                    candidate_ok(block.name, DatasetAssignment(ref, p.name, s.name))
                    for p in db.protocols
                    for s in p.sets
                )
                if fits:
                    found.append(ref)
        else:
            for ref in catalog.list("algorithm"):
                alg = catalog.get(ref)
                if not isinstance(alg, AlgorithmSpec):
                    raise UnresolvedRefError(f"unresolved algorithm {ref.render()}")
                defaults = {name: p.default for name, p in alg.parameters.items()}
                if candidate_ok(block.name, AlgorithmAssignment(ref, defaults)):
                    found.append(ref)
        choices[block.name] = sorted(found, key=lambda r: r.render())
    return choices
