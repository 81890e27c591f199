"""Validators and configurator choice resolution, with brute-force oracles."""
from __future__ import annotations

import random

import pytest

from beatbox.model import (
    AlgorithmAssignment,
    AlgorithmSpec,
    BlockSpec,
    Connection,
    DataFormat,
    DatasetAssignment,
    ExperimentSpec,
    Placement,
    ToolchainSpec,
    TypeSpec,
)
from beatbox.validation import (
    MemoryCatalog,
    UnresolvedRefError,
    check_compatibility,
    resolve_choices,
    validate_experiment,
    validate_format,
    validate_toolchain,
)
from fixtures import FMT_DATA, FMT_LABEL, make_catalog, make_experiment, make_toolchain, ref


def fmt(name: str, fields=None) -> DataFormat:
    return DataFormat(ref=ref("format", name), fields=fields or {"x": TypeSpec(scalar="float64")})


class TestValidateFormat:
    def test_minimal_format_ok(self):
        report = validate_format(fmt("user/min/1"), MemoryCatalog())
        assert report.ok and report.issues == ()

    def test_empty_format_rejected(self):
        report = validate_format(DataFormat(ref=ref("format", "user/empty/1"), fields={}), MemoryCatalog())
        assert not report.ok

    def test_self_recursive_format(self):
        loop = fmt("user/loop/1", {"inner": TypeSpec(nested=ref("format", "user/loop/1"))})
        report = validate_format(loop, MemoryCatalog([loop]))
        assert not report.ok
        assert any("recursive" in i.message for i in report.errors())

    def test_mutual_recursion_detected(self):
        a = fmt("user/a/1", {"b": TypeSpec(nested=ref("format", "user/b/1"))})
        b = fmt("user/b/1", {"a": TypeSpec(nested=ref("format", "user/a/1"))})
        report = validate_format(a, MemoryCatalog([a, b]))
        assert not report.ok
        assert any("recursive" in i.message for i in report.errors())

    def test_dangling_reference(self):
        bad = fmt("user/bad/1", {"inner": TypeSpec(nested=ref("format", "user/missing/1"))})
        report = validate_format(bad, MemoryCatalog())
        assert not report.ok
        assert any("unresolved reference" in i.message for i in report.errors())

    def test_nested_through_array(self):
        inner = fmt("user/inner/1")
        outer = fmt("user/outer/1", {"many": TypeSpec(element=TypeSpec(nested=inner.ref))})
        assert validate_format(outer, MemoryCatalog([inner])).ok
        assert not validate_format(outer, MemoryCatalog()).ok


class TestCompatibility:
    def test_identical_refs_compatible(self):
        catalog = make_catalog()
        assert check_compatibility(FMT_DATA, FMT_DATA, catalog) is True

    def test_distinct_names_incompatible(self):
        catalog = make_catalog()
        assert check_compatibility(FMT_DATA, FMT_LABEL, catalog) is False

    def test_version_mismatch_incompatible(self):
        catalog = make_catalog()
        v2 = fmt("user/data/2", {"value": TypeSpec(scalar="float64")})
        catalog.add(v2)
        assert check_compatibility(FMT_DATA, v2.ref, catalog) is False

    def test_unresolved_ref_raises(self):
        with pytest.raises(UnresolvedRefError):
            check_compatibility(FMT_DATA, ref("format", "user/ghost/1"), make_catalog())


def chain(*kinds: str) -> ToolchainSpec:
    """Linear toolchain b0 -> b1 -> ... with single endpoints."""
    blocks = []
    connections = []
    for i, kind in enumerate(kinds):
        name = f"b{i}"
        inputs = ("inp",) if kind != "dataset" else ()
        outputs = ("out",) if kind != "analyzer" else ()
        sync = "inp" if kind != "dataset" else None
        blocks.append(BlockSpec(name=name, kind=kind, inputs=inputs, outputs=outputs, sync=sync))
        if i:
            connections.append(Connection(f"b{i-1}", "out", name, "inp"))
    return ToolchainSpec(ref=ref("toolchain", "user/lin/1"), blocks=tuple(blocks), connections=tuple(connections))


class TestValidateToolchain:
    def test_three_block_chain(self):
        report = validate_toolchain(chain("dataset", "processing", "analyzer"))
        assert report.ok
        assert report.order == ("b0", "b1", "b2")

    def test_cycle_detected(self):
        tc = ToolchainSpec(
            ref=ref("toolchain", "user/cyc/1"),
            blocks=(
                BlockSpec(name="a", kind="processing", inputs=("inp",), outputs=("out",), sync="inp"),
                BlockSpec(name="b", kind="processing", inputs=("inp",), outputs=("out",), sync="inp"),
            ),
            connections=(Connection("a", "out", "b", "inp"), Connection("b", "out", "a", "inp")),
        )
        report = validate_toolchain(tc)
        assert not report.ok
        assert any("cycle detected" in i.message for i in report.errors())
        assert report.order == ()

    def test_dangling_input(self):
        tc = ToolchainSpec(
            ref=ref("toolchain", "user/dang/1"),
            blocks=(
                BlockSpec(name="src", kind="dataset", outputs=("out",)),
                BlockSpec(name="p", kind="processing", inputs=("inp", "extra"), outputs=("out",), sync="inp"),
            ),
            connections=(Connection("src", "out", "p", "inp"),),
        )
        report = validate_toolchain(tc)
        assert any("dangling input endpoint" in i.message for i in report.errors())

    def test_missing_sync_channel(self):
        tc = ToolchainSpec(
            ref=ref("toolchain", "user/ns/1"),
            blocks=(
                BlockSpec(name="src", kind="dataset", outputs=("out",)),
                BlockSpec(name="p", kind="processing", inputs=("inp",), outputs=("out",), sync=None),
            ),
            connections=(Connection("src", "out", "p", "inp"),),
        )
        assert any("sync" in i.message for i in validate_toolchain(tc).errors())

    def test_analyzer_with_outgoing_connection(self):
        tc = ToolchainSpec(
            ref=ref("toolchain", "user/ao/1"),
            blocks=(
                BlockSpec(name="src", kind="dataset", outputs=("out",)),
                BlockSpec(name="an", kind="analyzer", inputs=("inp",), outputs=("out",), sync="inp"),
            ),
            connections=(Connection("src", "out", "an", "inp"), Connection("an", "out", "an", "inp")),
        )
        assert not validate_toolchain(tc).ok

    def test_tie_break_by_block_name(self):
        tc = ToolchainSpec(
            ref=ref("toolchain", "user/tie/1"),
            blocks=(
                BlockSpec(name="zeta", kind="dataset", outputs=("out",)),
                BlockSpec(name="alpha", kind="dataset", outputs=("out",)),
                BlockSpec(
                    name="sink", kind="analyzer", inputs=("one", "two"), sync="one"
                ),
            ),
            connections=(
                Connection("zeta", "out", "sink", "one"),
                Connection("alpha", "out", "sink", "two"),
            ),
        )
        report = validate_toolchain(tc)
        assert report.order == ("alpha", "zeta", "sink")

    def test_topological_order_property_brute_force(self):
        # Every connection goes forward in the recorded order, for random
        # DAGs of up to 8 blocks.
        rng = random.Random(7)
        for _ in range(50):
            n = rng.randint(2, 8)
            names = [f"n{i}" for i in range(n)]
            rng.shuffle(names)
            blocks = [BlockSpec(name=names[0], kind="dataset", outputs=("out",))]
            connections = []
            for i in range(1, n):
                blocks.append(
                    BlockSpec(name=names[i], kind="processing", inputs=("inp",), outputs=("out",), sync="inp")
                )
                j = rng.randrange(i)  # edge from an earlier block: acyclic
                connections.append(Connection(names[j], "out", names[i], "inp"))
            tc = ToolchainSpec(ref=ref("toolchain", "user/rand/1"), blocks=tuple(blocks), connections=tuple(connections))
            report = validate_toolchain(tc)
            assert report.ok
            position = {name: k for k, name in enumerate(report.order)}
            for conn in connections:
                assert position[conn.src_block] < position[conn.dst_block]


class TestValidateExperiment:
    def test_fixture_experiment_ok(self):
        report = validate_experiment(make_experiment(), make_catalog())
        assert report.ok, report.issues

    def test_format_mismatch_names_connection(self):
        # Wire the label output into the scale block, which expects data.
        catalog = make_catalog()
        tc = make_toolchain()
        bad_tc = ToolchainSpec(
            ref=tc.ref,
            blocks=tc.blocks,
            connections=tuple(
                Connection("src", "labels", "scale", "samples") if c.dst_block == "scale" else c
                for c in tc.connections
            ),
        )
        catalog.add(bad_tc)
        report = validate_experiment(make_experiment(), catalog)
        assert not report.ok
        issue = next(i for i in report.errors() if "format mismatch" in i.message)
        assert "src.labels->scale.samples" in issue.path

    def test_parameter_type_mismatch(self):
        exp = make_experiment()
        bad = ExperimentSpec(
            ref=exp.ref,
            toolchain=exp.toolchain,
            assignments={
                **exp.assignments,
                "scale": AlgorithmAssignment(ref("algorithm", "user/scale/1"), {"factor": "loud"}),
            },
            default_placement=exp.default_placement,
        )
        report = validate_experiment(bad, make_catalog())
        assert not report.ok
        assert any("factor" in i.path for i in report.errors())

    def test_unknown_parameter(self):
        exp = make_experiment()
        bad = ExperimentSpec(
            ref=exp.ref,
            toolchain=exp.toolchain,
            assignments={
                **exp.assignments,
                "scale": AlgorithmAssignment(ref("algorithm", "user/scale/1"), {"gain": 2.0}),
            },
            default_placement=exp.default_placement,
        )
        assert not validate_experiment(bad, make_catalog()).ok

    def test_missing_assignment(self):
        exp = make_experiment()
        partial = ExperimentSpec(
            ref=exp.ref,
            toolchain=exp.toolchain,
            assignments={k: v for k, v in exp.assignments.items() if k != "pair"},
            default_placement=exp.default_placement,
        )
        report = validate_experiment(partial, make_catalog())
        assert any("no assignment" in i.message for i in report.errors())
        assert validate_experiment(partial, make_catalog(), partial=True).ok

    def test_placement_checks(self):
        report = validate_experiment(
            make_experiment(queue="gpu"), make_catalog(), queues={"default"}, environments={"python"}
        )
        assert any("unknown queue" in i.message for i in report.errors())


def random_catalog_and_toolchain(rng: random.Random):
    """Small random catalog (<= 20 objects) and a linear 3-block toolchain."""
    n_formats = rng.randint(1, 3)
    formats = [fmt(f"gen/f{i}/1") for i in range(n_formats)]
    catalog = MemoryCatalog(formats)
    fmt_refs = [f.ref for f in formats]

    from beatbox.model import DatabaseSpec, ProtocolSpec, SetSpec, ViewSpec

    objects = 0
    for d in range(rng.randint(1, 3)):
        view = ViewSpec(outputs={"out": rng.choice(fmt_refs)}, loader="")
        catalog.add(
            DatabaseSpec(
                ref=ref("database", f"gen/db{d}/1"),
                protocols=(ProtocolSpec(name="p", sets=(SetSpec(name="s", view=view),)),),
            )
        )
        objects += 1
    for a in range(rng.randint(1, 10)):
        kind = rng.choice(["processing", "analyzer"])
        inputs = {"inp": rng.choice(fmt_refs)}
        if kind == "processing":
            alg = AlgorithmSpec(
                ref=ref("algorithm", f"gen/alg{a}/1"),
                kind="processing",
                inputs=inputs,
                outputs={"out": rng.choice(fmt_refs)},
                source="",
            )
        else:
            alg = AlgorithmSpec(
                ref=ref("algorithm", f"gen/alg{a}/1"),
                kind="analyzer",
                inputs=inputs,
                outputs={},
                results={"r": "float64"},
                source="",
            )
        catalog.add(alg)
        objects += 1

    tc = chain("dataset", "processing", "analyzer")
    catalog.add(tc)
    return catalog, tc


def brute_force_choices(tc, partial, catalog):
    """Independent oracle: try every catalog candidate through the validator."""
    expected: dict[str, list] = {}
    probe_placement = Placement(queue="default", environment="default")
    for block in tc.blocks:
        if block.name in partial:
            continue
        keep = []
        if block.kind == "dataset":
            candidates = []
            for db_ref in catalog.list("database"):
                db = catalog.get(db_ref)
                candidates.extend(
                    (db_ref, DatasetAssignment(db_ref, p.name, s.name))
                    for p in db.protocols
                    for s in p.sets
                )
        else:
            candidates = []
            for alg_ref in catalog.list("algorithm"):
                alg = catalog.get(alg_ref)
                defaults = {name: p.default for name, p in alg.parameters.items()}
                candidates.append((alg_ref, AlgorithmAssignment(alg_ref, defaults)))
        for candidate_ref, assignment in candidates:
            probe = ExperimentSpec(
                ref=ref("experiment", "gen/probe/1"),
                toolchain=tc.ref,
                assignments={**partial, block.name: assignment},
                default_placement=probe_placement,
            )
            if validate_experiment(probe, catalog, partial=True).ok and candidate_ref not in keep:
                keep.append(candidate_ref)
        expected[block.name] = sorted(keep, key=lambda r: r.render())
    return expected


class TestResolveChoices:
    def test_single_compatible_candidate_per_block(self):
        catalog = make_catalog()
        tc = make_toolchain()
        choices = resolve_choices(tc, {}, catalog)
        assert choices["src"] == [ref("database", "user/numbers/1")]
        assert choices["scale"] == [ref("algorithm", "user/scale/1")]
        assert choices["pair"] == [ref("algorithm", "user/pair/1")]
        assert choices["analysis"] == [ref("algorithm", "user/stats/1")]

    def test_upstream_choice_restricts_downstream(self):
        # Two analyzers, one consuming data and one consuming labels; with
        # the upstream fixed to a data producer only the former remains.
        catalog = make_catalog()
        label_stats = AlgorithmSpec(
            ref=ref("algorithm", "user/labelstats/1"),
            kind="analyzer",
            inputs={"scores": FMT_LABEL},
            outputs={},
            results={"n": "int64"},
            source="",
        )
        catalog.add(label_stats)
        tc = make_toolchain()
        partial = dict(make_experiment().assignments)
        del partial["analysis"]
        choices = resolve_choices(tc, partial, catalog)
        assert choices == {"analysis": [ref("algorithm", "user/stats/1")]}

    def test_zero_candidates_is_empty_list(self):
        catalog = MemoryCatalog(list(make_catalog()._objects.values()))
        tc = chain("dataset", "processing", "analyzer")
        catalog.add(tc)
        # No generated databases expose endpoint "out", so the dataset block
        # has no candidates; that is an empty list, not an error.
        choices = resolve_choices(tc, {}, catalog)
        assert choices["b0"] == []

    def test_matches_brute_force_on_generated_catalogs(self):
        rng = random.Random(31337)
        for case in range(60):
            catalog, tc = random_catalog_and_toolchain(rng)
            # Random partial assignment of the middle block half the time.
            partial = {}
            if rng.random() < 0.5:
                algs = [catalog.get(r) for r in catalog.list("algorithm")]
                processing = [a for a in algs if a.kind == "processing"]
                if processing:
                    pick = rng.choice(processing)
                    partial["b1"] = AlgorithmAssignment(pick.ref, {})
            got = resolve_choices(tc, partial, catalog)
            expected = brute_force_choices(tc, partial, catalog)
            assert got == expected, f"case {case} diverged"
