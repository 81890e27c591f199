"""Shared fixture objects: a small catalog of formats, algorithms, and chains."""
from __future__ import annotations

import textwrap

from beatbox.model import (
    AlgorithmAssignment,
    AlgorithmSpec,
    BlockSpec,
    Connection,
    DataFormat,
    DatabaseSpec,
    DatasetAssignment,
    ExperimentSpec,
    ObjectRef,
    Parameter,
    Placement,
    ProtocolSpec,
    SetSpec,
    ToolchainSpec,
    TypeSpec,
    ViewSpec,
)
from beatbox.validation import MemoryCatalog


def ref(kind: str, text: str) -> ObjectRef:
    return ObjectRef.parse(kind, text)


FMT_DATA = ref("format", "user/data/1")
FMT_LABEL = ref("format", "user/label/1")
FMT_SCORE = ref("format", "user/score/1")

NUMBERS_LOADER = textwrap.dedent(
    """
    class View:
        def load(self):
            n = 10
            return {
                "samples": [{"value": float(i)} for i in range(n)],
                "labels": [(0, 5, {"label": 0}), (5, 10, {"label": 1})],
            }
    """
)

SCALE_SOURCE = textwrap.dedent(
    """
    class Algorithm:
        def setup(self, parameters):
            self.factor = parameters["factor"]

        def process(self, inputs, output):
            value = inputs["samples"][0].value["value"]
            output("scaled", {"value": value * self.factor})
    """
)

PAIR_SOURCE = textwrap.dedent(
    """
    class Algorithm:
        def process(self, inputs, output):
            value = inputs["scaled"][0].value["value"]
            label = inputs["labels"][0].value["label"]
            output("scored", {"score": value + label})
    """
)

STATS_SOURCE = textwrap.dedent(
    """
    class Algorithm:
        def setup(self, parameters):
            self.total = 0.0
            self.count = 0

        def process(self, inputs, output):
            self.total += inputs["scores"][0].value["score"]
            self.count += 1

        def results(self):
            mean = self.total / self.count if self.count else 0.0
            return {"mean": mean, "count": self.count}
    """
)


def make_formats() -> list[DataFormat]:
    return [
        DataFormat(ref=FMT_DATA, fields={"value": TypeSpec(scalar="float64")}, doc="A single scalar sample."),
        DataFormat(ref=FMT_LABEL, fields={"label": TypeSpec(scalar="int64")}, doc="Coarse class label."),
        DataFormat(ref=FMT_SCORE, fields={"score": TypeSpec(scalar="float64")}, doc="Per-sample score."),
    ]


def make_database() -> DatabaseSpec:
    view = ViewSpec(outputs={"samples": FMT_DATA, "labels": FMT_LABEL}, loader=NUMBERS_LOADER)
    return DatabaseSpec(
        ref=ref("database", "user/numbers/1"),
        protocols=(ProtocolSpec(name="main", sets=(SetSpec(name="train", view=view),)),),
    )


def make_algorithms() -> list[AlgorithmSpec]:
    scale = AlgorithmSpec(
        ref=ref("algorithm", "user/scale/1"),
        kind="processing",
        inputs={"samples": FMT_DATA},
        outputs={"scaled": FMT_DATA},
        parameters={"factor": Parameter(type=TypeSpec(scalar="float64"), default=2.0)},
        splittable=True,
        source=SCALE_SOURCE,
    )
    pair = AlgorithmSpec(
        ref=ref("algorithm", "user/pair/1"),
        kind="processing",
        inputs={"scaled": FMT_DATA, "labels": FMT_LABEL},
        outputs={"scored": FMT_SCORE},
        source=PAIR_SOURCE,
    )
    stats = AlgorithmSpec(
        ref=ref("algorithm", "user/stats/1"),
        kind="analyzer",
        inputs={"scores": FMT_SCORE},
        outputs={},
        results={"mean": "float64", "count": "int64"},
        source=STATS_SOURCE,
    )
    return [scale, pair, stats]


def make_toolchain() -> ToolchainSpec:
    return ToolchainSpec(
        ref=ref("toolchain", "user/chain/1"),
        blocks=(
            BlockSpec(name="src", kind="dataset", outputs=("samples", "labels")),
            BlockSpec(name="scale", kind="processing", inputs=("samples",), outputs=("scaled",), sync="samples"),
            BlockSpec(name="pair", kind="processing", inputs=("scaled", "labels"), outputs=("scored",), sync="scaled"),
            BlockSpec(name="analysis", kind="analyzer", inputs=("scores",), sync="scores"),
        ),
        connections=(
            Connection("src", "samples", "scale", "samples"),
            Connection("src", "labels", "pair", "labels"),
            Connection("scale", "scaled", "pair", "scaled"),
            Connection("pair", "scored", "analysis", "scores"),
        ),
    )


def make_experiment(
    *,
    name: str = "user/exp/1",
    factor: float = 2.0,
    queue: str = "default",
    environment: str = "python",
    folds: dict[str, int] | None = None,
) -> ExperimentSpec:
    placements = {b: Placement(queue=queue, environment=environment, folds=n) for b, n in (folds or {}).items()}
    return ExperimentSpec(
        ref=ref("experiment", name),
        toolchain=ref("toolchain", "user/chain/1"),
        assignments={
            "src": DatasetAssignment(ref("database", "user/numbers/1"), "main", "train"),
            "scale": AlgorithmAssignment(ref("algorithm", "user/scale/1"), {"factor": factor}),
            "pair": AlgorithmAssignment(ref("algorithm", "user/pair/1"), {}),
            "analysis": AlgorithmAssignment(ref("algorithm", "user/stats/1"), {}),
        },
        default_placement=Placement(queue=queue, environment=environment),
        placements=placements,
    )


def make_catalog() -> MemoryCatalog:
    catalog = MemoryCatalog()
    for fmt in make_formats():
        catalog.add(fmt)
    catalog.add(make_database())
    for alg in make_algorithms():
        catalog.add(alg)
    catalog.add(make_toolchain())
    return catalog


# Expected analyzer results for make_experiment(factor=2.0) over the fixture
# data, computed by hand: samples are 0..9, scaled = 2*i, labels 0 for i<5 and
# 1 otherwise, score_i = 2*i + label_i, so the mean is (90 + 5) / 10.
EXPECTED_MEAN = 9.5
EXPECTED_COUNT = 10


def fixture_objects():
    return [*make_formats(), make_database(), *make_algorithms(), make_toolchain(), make_experiment()]


def populate_store(store, *, with_results: bool = True):
    """Write the fixture catalog into a document store as envelopes."""
    from beatbox.store import Write, envelope, object_path

    writes = [
        Write(path=object_path(obj.ref), expected=None, doc=envelope(obj.ref, obj.to_doc()))
        for obj in fixture_objects()
    ]
    if with_results:
        exp = make_experiment()
        writes.append(
            Write(
                path=f"results/{exp.ref.render()}.json",
                expected=None,
                doc={
                    "experiment": exp.ref.render(),
                    "run": f"{exp.ref.render()}#1",
                    "state": "done",
                    "completed_at": 1000.0,
                    "results": {
                        "analysis": {
                            "mean": {"kind": "float64", "value": EXPECTED_MEAN},
                            "count": {"kind": "int64", "value": EXPECTED_COUNT},
                        }
                    },
                    "stats": {},
                    "cache_keys": {"analysis": "a" * 64, "scale": "b" * 64},
                },
            )
        )
    store.commit(writes)
