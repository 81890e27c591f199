"""Object model parsing, document round-trips, and digests."""
from __future__ import annotations

import random
import string

import pytest

from beatbox.model import (
    AlgorithmSpec,
    DataFormat,
    ExperimentSpec,
    ModelError,
    ObjectRef,
    ToolchainSpec,
    TypeSpec,
    conforms,
    object_digest,
)
from fixtures import make_algorithms, make_experiment, make_formats, make_toolchain

# Computed once with an independent SHA-256 tool (sha256sum) over the
# handwritten canonical bytes of the fixture format document.
GOLDEN_FORMAT_CANONICAL = (
    '{"kind":"format","name":"data","owner":"user",'
    '"spec":{"doc":"A single scalar sample.","fields":{"value":"float64"}},"version":1}'
)
GOLDEN_FORMAT_DIGEST = "2eb01869ad9cdaddd5462e2279b1dacc18f414963ab47951b3eda0e4f4a7c9ca"


class TestObjectRef:
    def test_parse_render_round_trip(self):
        r = ObjectRef.parse("format", "user/data/1")
        assert (r.owner, r.name, r.version) == ("user", "data", 1)
        assert r.render() == "user/data/1"

    def test_path_like_names(self):
        r = ObjectRef.parse("algorithm", "alice/nets/deep/3")
        assert r.name == "nets/deep"
        assert r.render() == "alice/nets/deep/3"

    @pytest.mark.parametrize("bad", ["user", "user/data", "user/data/0", "user/Data/1", "user/data/x"])
    def test_rejects_malformed(self, bad):
        with pytest.raises(ModelError):
            ObjectRef.parse("format", bad)


class TestTypeSpec:
    def test_scalar_doc_round_trip(self):
        ts = TypeSpec.from_doc("int64")
        assert ts.scalar == "int64"
        assert ts.to_doc() == "int64"

    def test_array_doc_round_trip(self):
        ts = TypeSpec.from_doc({"array": "float64", "length": 3})
        assert ts.element.scalar == "float64" and ts.length == 3
        assert ts.to_doc() == {"array": "float64", "length": 3}

    def test_nested_doc_round_trip(self):
        ts = TypeSpec.from_doc({"ref": "user/data/1"})
        assert ts.nested.render() == "user/data/1"

    def test_zero_length_array_rejected(self):
        with pytest.raises(ModelError):
            TypeSpec.from_doc({"array": "int64", "length": 0})

    def test_conforms_scalars(self):
        assert conforms(3, TypeSpec(scalar="int64"), {}) == []
        assert conforms(True, TypeSpec(scalar="int64"), {}) != []
        assert conforms("x", TypeSpec(scalar="float64"), {}) != []
        assert conforms("00ff", TypeSpec(scalar="bytes"), {}) == []
        assert conforms("0g", TypeSpec(scalar="bytes"), {}) != []

    def test_conforms_nested_record(self):
        fmt = make_formats()[0]
        ts = TypeSpec(nested=fmt.ref)
        formats = {fmt.ref.render(): fmt}
        assert conforms({"value": 1.5}, ts, formats) == []
        assert conforms({"value": "no"}, ts, formats) != []
        assert conforms({}, ts, formats) != []


class TestDocumentRoundTrips:
    def test_format(self):
        fmt = make_formats()[0]
        again = DataFormat.from_doc(fmt.ref, fmt.to_doc())
        assert again == fmt

    def test_algorithm(self):
        for alg in make_algorithms():
            assert AlgorithmSpec.from_doc(alg.ref, alg.to_doc()) == alg

    def test_toolchain(self):
        tc = make_toolchain()
        assert ToolchainSpec.from_doc(tc.ref, tc.to_doc()) == tc

    def test_experiment(self):
        exp = make_experiment(folds={"scale": 3})
        again = ExperimentSpec.from_doc(exp.ref, exp.to_doc())
        assert again == exp
        assert again.placement("scale").folds == 3
        assert again.placement("pair").folds == 1

    def test_analyzer_requires_results(self):
        with pytest.raises(ModelError):
            AlgorithmSpec.from_doc(
                ObjectRef.parse("algorithm", "user/bad/1"),
                {"kind": "analyzer", "inputs": {}, "outputs": {}, "source": ""},
            )


class TestDigests:
    def test_golden_format_digest(self):
        fmt = make_formats()[0]
        from beatbox.canonical import canonical_dumps

        doc = {
            "kind": fmt.ref.kind,
            "owner": fmt.ref.owner,
            "name": fmt.ref.name,
            "version": fmt.ref.version,
            "spec": fmt.to_doc(),
        }
        assert canonical_dumps(doc) == GOLDEN_FORMAT_CANONICAL
        assert fmt.digest() == GOLDEN_FORMAT_DIGEST

    def test_field_order_does_not_change_digest(self):
        a = DataFormat(
            ref=ObjectRef.parse("format", "user/two/1"),
            fields={"x": TypeSpec(scalar="float64"), "y": TypeSpec(scalar="int64")},
        )
        b = DataFormat(
            ref=ObjectRef.parse("format", "user/two/1"),
            fields={"y": TypeSpec(scalar="int64"), "x": TypeSpec(scalar="float64")},
        )
        assert a.digest() == b.digest()

    def test_source_change_changes_digest(self):
        alg = make_algorithms()[0]
        tweaked = AlgorithmSpec(
            ref=alg.ref,
            kind=alg.kind,
            inputs=alg.inputs,
            outputs=alg.outputs,
            parameters=alg.parameters,
            splittable=alg.splittable,
            source=alg.source + " ",
            language=alg.language,
        )
        assert alg.digest() != tweaked.digest()

    def test_no_collisions_on_generated_corpus(self):
        # Injectivity spot-check: >= 10^4 distinct objects, zero collisions.
        rng = random.Random(20240)
        seen = {}
        for i in range(10_000):
            owner = "".join(rng.choices(string.ascii_lowercase, k=4))
            ref = ObjectRef(kind="format", owner=owner, name=f"f{i}", version=rng.randint(1, 9))
            fields = {
                f"x{j}": rng.choice(["int64", "float64", "bool", "string"])
                for j in range(rng.randint(1, 4))
            }
            digest = object_digest(ref, {"fields": fields, "doc": ""})
            assert digest not in seen
            seen[digest] = ref
