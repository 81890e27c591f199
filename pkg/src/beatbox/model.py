"""Domain objects: formats, algorithms, databases, toolchains, experiments.

Each object has a document form (plain JSON types) used for storage, wire
transfer, and digests; ``from_doc`` parsers are strict about structure but
leave semantic checks (dangling refs, cycles, wiring) to the validators.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Any

from .canonical import canonical_digest

OBJECT_KINDS = ("format", "algorithm", "database", "toolchain", "experiment")
# Additional kinds handled by the same store/addressing scheme.
PLATFORM_KINDS = OBJECT_KINDS + ("search", "report", "team")

SCALAR_KINDS = ("int64", "float64", "bool", "string", "bytes")
RESULT_KINDS = ("int64", "float64", "bool", "string", "plot")
BLOCK_KINDS = ("dataset", "processing", "analyzer")
ALGORITHM_KINDS = ("processing", "analyzer")

_OWNER_RE = re.compile(r"^[a-z0-9_]+$")
_NAME_RE = re.compile(r"^[a-z0-9_]+(/[a-z0-9_]+)*$")
_HEX_RE = re.compile(r"^(?:[0-9a-f]{2})*$")

INT64_MIN = -(2**63)
INT64_MAX = 2**63 - 1


class ModelError(ValueError):
    """Malformed object document."""


def _require(cond: bool, message: str) -> None:
    if not cond:
        raise ModelError(message)


def _str_field(doc: dict, key: str, default: str | None = None) -> str:
    value = doc.get(key, default)
    _require(isinstance(value, str), f"field {key!r} must be a string")
    return value


@dataclass(frozen=True, order=True)
class ObjectRef:
    """Unique address of a versioned platform object."""

    kind: str
    owner: str
    name: str
    version: int

    def __post_init__(self) -> None:
        _require(self.kind in PLATFORM_KINDS, f"unknown object kind {self.kind!r}")
        _require(bool(_OWNER_RE.match(self.owner)), f"invalid owner {self.owner!r}")
        _require(bool(_NAME_RE.match(self.name)), f"invalid name {self.name!r}")
        _require(isinstance(self.version, int) and not isinstance(self.version, bool), "version must be an integer")
        _require(self.version >= 1, f"version must be >= 1, got {self.version}")

    def render(self) -> str:
        return f"{self.owner}/{self.name}/{self.version}"

    @classmethod
    def parse(cls, kind: str, text: str) -> ObjectRef:
        parts = text.split("/")
        _require(len(parts) >= 3, f"malformed reference {text!r}")
        try:
            version = int(parts[-1])
        except ValueError:
            raise ModelError(f"malformed reference version in {text!r}") from None
        return cls(kind=kind, owner=parts[0], name="/".join(parts[1:-1]), version=version)


@dataclass(frozen=True)
class TypeSpec:
    """One of: scalar kind, array of TypeSpec, or nested format reference."""

    scalar: str | None = None
    element: TypeSpec | None = None
    length: int | None = None
    nested: ObjectRef | None = None

    def __post_init__(self) -> None:
        variants = sum(x is not None for x in (self.scalar, self.element, self.nested))
        _require(variants == 1, "TypeSpec must be exactly one of scalar/array/nested")
        if self.scalar is not None:
            _require(self.scalar in SCALAR_KINDS, f"unknown scalar kind {self.scalar!r}")
        if self.length is not None:
            _require(self.element is not None, "fixed length only applies to arrays")
            _require(self.length >= 1, "fixed array length must be >= 1")
        if self.nested is not None:
            _require(self.nested.kind == "format", "nested reference must point to a format")

    @property
    def is_scalar(self) -> bool:
        return self.scalar is not None

    def to_doc(self) -> Any:
        if self.scalar is not None:
            return self.scalar
        if self.element is not None:
            doc: dict[str, Any] = {"array": self.element.to_doc()}
            if self.length is not None:
                doc["length"] = self.length
            return doc
        return {"ref": self.nested.render()}

    @classmethod
    def from_doc(cls, doc: Any) -> TypeSpec:
        if isinstance(doc, str):
            return cls(scalar=doc)
        _require(isinstance(doc, dict), f"malformed type {doc!r}")
        if "array" in doc:
            length = doc.get("length")
            if length is not None:
                _require(isinstance(length, int) and not isinstance(length, bool), "array length must be an integer")
            return cls(element=cls.from_doc(doc["array"]), length=length)
        if "ref" in doc:
            return cls(nested=ObjectRef.parse("format", _str_field(doc, "ref")))
        raise ModelError(f"malformed type {doc!r}")


def conforms(value: Any, ts: TypeSpec, formats: dict[str, DataFormat], path: str = "value") -> list[str]:
    """Check a JSON value against a TypeSpec; returns human-readable problems.

    ``formats`` maps rendered refs to resolved DataFormats for nested types.
    """
    problems: list[str] = []
    if ts.scalar is not None:
        kind = ts.scalar
        if kind == "int64":
            if isinstance(value, bool) or not isinstance(value, int):
                problems.append(f"{path}: expected int64, got {type(value).__name__}")
            elif not INT64_MIN <= value <= INT64_MAX:
                problems.append(f"{path}: int64 out of range")
        elif kind == "float64":
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                problems.append(f"{path}: expected float64, got {type(value).__name__}")
        elif kind == "bool":
            if not isinstance(value, bool):
                problems.append(f"{path}: expected bool, got {type(value).__name__}")
        elif kind == "string":
            if not isinstance(value, str):
                problems.append(f"{path}: expected string, got {type(value).__name__}")
        elif kind == "bytes":
            if not isinstance(value, str) or not _HEX_RE.match(value):
                problems.append(f"{path}: expected lowercase-hex bytes string")
    elif ts.element is not None:
        if not isinstance(value, list):
            problems.append(f"{path}: expected array, got {type(value).__name__}")
        else:
            if ts.length is not None and len(value) != ts.length:
                problems.append(f"{path}: expected array of length {ts.length}, got {len(value)}")
            for i, item in enumerate(value):
                problems.extend(conforms(item, ts.element, formats, f"{path}[{i}]"))
    else:
        fmt = formats.get(ts.nested.render())
        if fmt is None:
            problems.append(f"{path}: unresolved format reference {ts.nested.render()}")
        elif not isinstance(value, dict):
            problems.append(f"{path}: expected record, got {type(value).__name__}")
        else:
            for fname, fts in fmt.fields.items():
                if fname not in value:
                    problems.append(f"{path}: missing field {fname!r}")
                else:
                    problems.extend(conforms(value[fname], fts, formats, f"{path}.{fname}"))
            for extra in set(value) - set(fmt.fields):
                problems.append(f"{path}: unexpected field {extra!r}")
    return problems


@dataclass(frozen=True)
class DataFormat:
    """Named, versioned record schema typing a connection's items."""

    ref: ObjectRef
    fields: dict[str, TypeSpec]
    doc: str = ""

    def to_doc(self) -> dict:
        return {
            "fields": {name: ts.to_doc() for name, ts in self.fields.items()},
            "doc": self.doc,
        }

    @classmethod
    def from_doc(cls, ref: ObjectRef, doc: dict) -> DataFormat:
        _require(isinstance(doc.get("fields"), dict), "format requires a 'fields' object")
        fields = {name: TypeSpec.from_doc(ts) for name, ts in doc["fields"].items()}
        return cls(ref=ref, fields=fields, doc=doc.get("doc", ""))

    def digest(self) -> str:
        return object_digest(self.ref, self.to_doc())


@dataclass(frozen=True)
class Parameter:
    """Scalar algorithm parameter with a default value."""

    type: TypeSpec
    default: Any

    def __post_init__(self) -> None:
        _require(self.type.is_scalar, "parameters must be scalar-typed")

    def to_doc(self) -> dict:
        return {"type": self.type.to_doc(), "default": self.default}

    @classmethod
    def from_doc(cls, doc: dict) -> Parameter:
        _require(isinstance(doc, dict) and "type" in doc, "malformed parameter")
        return cls(type=TypeSpec.from_doc(doc["type"]), default=doc.get("default"))


@dataclass(frozen=True)
class AlgorithmSpec:
    """User algorithm: typed endpoints, parameters, and opaque source."""

    ref: ObjectRef
    kind: str
    inputs: dict[str, ObjectRef]
    outputs: dict[str, ObjectRef]
    results: dict[str, str] = field(default_factory=dict)
    parameters: dict[str, Parameter] = field(default_factory=dict)
    splittable: bool = False
    source: str = ""
    language: str = "python"

    def __post_init__(self) -> None:
        _require(self.kind in ALGORITHM_KINDS, f"unknown algorithm kind {self.kind!r}")
        if self.kind == "analyzer":
            _require(bool(self.results), "analyzer requires a non-empty results schema")
            _require(not self.outputs, "analyzer must not declare output channels")
        else:
            _require(bool(self.outputs), "processing algorithm requires at least one output")
            _require(not self.results, "only analyzers declare results")
        for rkind in self.results.values():
            _require(rkind in RESULT_KINDS, f"unknown result kind {rkind!r}")

    def to_doc(self) -> dict:
        doc: dict[str, Any] = {
            "kind": self.kind,
            "inputs": {ep: ref.render() for ep, ref in self.inputs.items()},
            "outputs": {ep: ref.render() for ep, ref in self.outputs.items()},
            "parameters": {name: p.to_doc() for name, p in self.parameters.items()},
            "splittable": self.splittable,
            "source": self.source,
            "language": self.language,
        }
        if self.kind == "analyzer":
            doc["results"] = dict(self.results)
        return doc

    @classmethod
    def from_doc(cls, ref: ObjectRef, doc: dict) -> AlgorithmSpec:
        kind = _str_field(doc, "kind")
        return cls(
            ref=ref,
            kind=kind,
            inputs={ep: ObjectRef.parse("format", r) for ep, r in doc.get("inputs", {}).items()},
            outputs={ep: ObjectRef.parse("format", r) for ep, r in doc.get("outputs", {}).items()},
            results=dict(doc.get("results", {})),
            parameters={name: Parameter.from_doc(p) for name, p in doc.get("parameters", {}).items()},
            splittable=bool(doc.get("splittable", False)),
            source=_str_field(doc, "source", ""),
            language=_str_field(doc, "language", "python"),
        )

    def digest(self) -> str:
        return object_digest(self.ref, self.to_doc())


@dataclass(frozen=True)
class ViewSpec:
    """Admin-installed loader exposing raw data as synchronized channels."""

    outputs: dict[str, ObjectRef]
    loader: str

    def to_doc(self) -> dict:
        return {
            "outputs": {ch: ref.render() for ch, ref in self.outputs.items()},
            "loader": self.loader,
        }

    @classmethod
    def from_doc(cls, doc: dict) -> ViewSpec:
        _require(isinstance(doc.get("outputs"), dict) and doc["outputs"], "view requires output channels")
        return cls(
            outputs={ch: ObjectRef.parse("format", r) for ch, r in doc["outputs"].items()},
            loader=_str_field(doc, "loader", ""),
        )


@dataclass(frozen=True)
class SetSpec:
    name: str
    view: ViewSpec


@dataclass(frozen=True)
class ProtocolSpec:
    name: str
    sets: tuple[SetSpec, ...]

    def set(self, name: str) -> SetSpec | None:
        for s in self.sets:
            if s.name == name:
                return s
        return None


@dataclass(frozen=True)
class DatabaseSpec:
    """Raw dataset exposed through named usage protocols and set views."""

    ref: ObjectRef
    protocols: tuple[ProtocolSpec, ...]

    def __post_init__(self) -> None:
        names = [p.name for p in self.protocols]
        _require(len(names) == len(set(names)), "protocol names must be unique")
        for p in self.protocols:
            set_names = [s.name for s in p.sets]
            _require(len(set_names) == len(set(set_names)), f"set names must be unique in protocol {p.name!r}")

    def protocol(self, name: str) -> ProtocolSpec | None:
        for p in self.protocols:
            if p.name == name:
                return p
        return None

    def to_doc(self) -> dict:
        return {
            "protocols": [
                {
                    "name": p.name,
                    "sets": [{"name": s.name, "view": s.view.to_doc()} for s in p.sets],
                }
                for p in self.protocols
            ]
        }

    @classmethod
    def from_doc(cls, ref: ObjectRef, doc: dict) -> DatabaseSpec:
        protocols = []
        for p in doc.get("protocols", []):
            sets = tuple(
                SetSpec(name=_str_field(s, "name"), view=ViewSpec.from_doc(s["view"]))
                for s in p.get("sets", [])
            )
            protocols.append(ProtocolSpec(name=_str_field(p, "name"), sets=sets))
        return cls(ref=ref, protocols=tuple(protocols))

    def digest(self) -> str:
        return object_digest(self.ref, self.to_doc())


_BLOCK_NAME_RE = re.compile(r"^[a-z0-9_]+$")
_ENDPOINT_RE = re.compile(r"^[a-z0-9_]+$")


@dataclass(frozen=True)
class BlockSpec:
    name: str
    kind: str
    inputs: tuple[str, ...] = ()
    outputs: tuple[str, ...] = ()
    sync: str | None = None

    def __post_init__(self) -> None:
        _require(bool(_BLOCK_NAME_RE.match(self.name)), f"invalid block name {self.name!r}")
        _require(self.kind in BLOCK_KINDS, f"unknown block kind {self.kind!r}")
        for ep in self.inputs + self.outputs:
            _require(bool(_ENDPOINT_RE.match(ep)), f"invalid endpoint name {ep!r}")

    def to_doc(self) -> dict:
        return {
            "name": self.name,
            "kind": self.kind,
            "inputs": list(self.inputs),
            "outputs": list(self.outputs),
            "sync": self.sync,
        }

    @classmethod
    def from_doc(cls, doc: dict) -> BlockSpec:
        return cls(
            name=_str_field(doc, "name"),
            kind=_str_field(doc, "kind"),
            inputs=tuple(doc.get("inputs", [])),
            outputs=tuple(doc.get("outputs", [])),
            sync=doc.get("sync"),
        )


@dataclass(frozen=True)
class Connection:
    src_block: str
    src_endpoint: str
    dst_block: str
    dst_endpoint: str

    def to_doc(self) -> dict:
        return {
            "from": f"{self.src_block}.{self.src_endpoint}",
            "to": f"{self.dst_block}.{self.dst_endpoint}",
        }

    @classmethod
    def from_doc(cls, doc: dict) -> Connection:
        src = _str_field(doc, "from")
        dst = _str_field(doc, "to")
        _require(src.count(".") == 1 and dst.count(".") == 1, f"malformed connection {doc!r}")
        sb, se = src.split(".")
        db, de = dst.split(".")
        return cls(src_block=sb, src_endpoint=se, dst_block=db, dst_endpoint=de)


@dataclass(frozen=True)
class ToolchainSpec:
    """DAG of blocks and typed connections."""

    ref: ObjectRef
    blocks: tuple[BlockSpec, ...]
    connections: tuple[Connection, ...]

    def block(self, name: str) -> BlockSpec | None:
        for b in self.blocks:
            if b.name == name:
                return b
        return None

    def to_doc(self) -> dict:
        return {
            "blocks": [b.to_doc() for b in self.blocks],
            "connections": [c.to_doc() for c in self.connections],
        }

    @classmethod
    def from_doc(cls, ref: ObjectRef, doc: dict) -> ToolchainSpec:
        return cls(
            ref=ref,
            blocks=tuple(BlockSpec.from_doc(b) for b in doc.get("blocks", [])),
            connections=tuple(Connection.from_doc(c) for c in doc.get("connections", [])),
        )

    def digest(self) -> str:
        return object_digest(self.ref, self.to_doc())


@dataclass(frozen=True)
class DatasetAssignment:
    database: ObjectRef
    protocol: str
    set: str

    def to_doc(self) -> dict:
        return {"database": self.database.render(), "protocol": self.protocol, "set": self.set}


@dataclass(frozen=True)
class AlgorithmAssignment:
    algorithm: ObjectRef
    parameters: dict[str, Any] = field(default_factory=dict)

    def to_doc(self) -> dict:
        return {"algorithm": self.algorithm.render(), "parameters": dict(self.parameters)}


Assignment = DatasetAssignment | AlgorithmAssignment


def assignment_from_doc(doc: dict) -> Assignment:
    if "database" in doc:
        return DatasetAssignment(
            database=ObjectRef.parse("database", _str_field(doc, "database")),
            protocol=_str_field(doc, "protocol"),
            set=_str_field(doc, "set"),
        )
    if "algorithm" in doc:
        return AlgorithmAssignment(
            algorithm=ObjectRef.parse("algorithm", _str_field(doc, "algorithm")),
            parameters=dict(doc.get("parameters", {})),
        )
    raise ModelError(f"assignment must name an algorithm or a database: {doc!r}")


@dataclass(frozen=True)
class Placement:
    queue: str
    environment: str
    folds: int = 1

    def __post_init__(self) -> None:
        _require(self.folds >= 1, "fold count must be >= 1")

    def to_doc(self) -> dict:
        return {"queue": self.queue, "environment": self.environment, "folds": self.folds}

    @classmethod
    def from_doc(cls, doc: dict) -> Placement:
        return cls(
            queue=_str_field(doc, "queue"),
            environment=_str_field(doc, "environment"),
            folds=int(doc.get("folds", 1)),
        )


@dataclass(frozen=True)
class ExperimentSpec:
    """Toolchain plus per-block algorithm/database and placement choices."""

    ref: ObjectRef
    toolchain: ObjectRef
    assignments: dict[str, Assignment]
    default_placement: Placement
    placements: dict[str, Placement] = field(default_factory=dict)

    def placement(self, block: str) -> Placement:
        return self.placements.get(block, self.default_placement)

    def to_doc(self) -> dict:
        return {
            "toolchain": self.toolchain.render(),
            "assignments": {b: a.to_doc() for b, a in self.assignments.items()},
            "placement": {
                "default": self.default_placement.to_doc(),
                **{b: p.to_doc() for b, p in self.placements.items()},
            },
        }

    @classmethod
    def from_doc(cls, ref: ObjectRef, doc: dict) -> ExperimentSpec:
        placement_doc = dict(doc.get("placement", {}))
        _require("default" in placement_doc, "experiment requires a default placement")
        default = Placement.from_doc(placement_doc.pop("default"))
        return cls(
            ref=ref,
            toolchain=ObjectRef.parse("toolchain", _str_field(doc, "toolchain")),
            assignments={b: assignment_from_doc(a) for b, a in doc.get("assignments", {}).items()},
            default_placement=default,
            placements={b: Placement.from_doc(p) for b, p in placement_doc.items()},
        )

    def digest(self) -> str:
        return object_digest(self.ref, self.to_doc())


def object_digest(ref: ObjectRef, spec_doc: dict) -> str:
    """Digest of an object's semantic identity (address plus spec payload)."""
    return canonical_digest(
        {
            "kind": ref.kind,
            "owner": ref.owner,
            "name": ref.name,
            "version": ref.version,
            "spec": spec_doc,
        }
    )


def parse_object(kind: str, ref: ObjectRef, spec_doc: dict):
    """Parse a spec payload into its domain object."""
    if kind == "format":
        return DataFormat.from_doc(ref, spec_doc)
    if kind == "algorithm":
        return AlgorithmSpec.from_doc(ref, spec_doc)
    if kind == "database":
        return DatabaseSpec.from_doc(ref, spec_doc)
    if kind == "toolchain":
        return ToolchainSpec.from_doc(ref, spec_doc)
    if kind == "experiment":
        return ExperimentSpec.from_doc(ref, spec_doc)
    raise ModelError(f"no domain parser for kind {kind!r}")
