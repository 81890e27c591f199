#!/usr/bin/env python3
"""Record /choices responses for scripted configurator selection sequences.

Drives the real service in process and writes the recorded steps to
frontend/test/fixtures/choices_sequences.json, which the UI parity tests
replay. Rerun after changing the fixture catalog or choice resolution.
"""
from __future__ import annotations

import json
import pathlib
import random
import sys
import tempfile
import urllib.parse

ROOT = pathlib.Path(__file__).resolve().parents[1]
sys.path.insert(0, str(ROOT / "src"))
sys.path.insert(0, str(ROOT / "tests"))

from fastapi.testclient import TestClient  # noqa: E402

from beatbox.model import AlgorithmSpec, Parameter, TypeSpec  # noqa: E402
from beatbox.service import Platform, create_app  # noqa: E402
from fixtures import (  # noqa: E402
    FMT_DATA,
    FMT_LABEL,
    FMT_SCORE,
    make_algorithms,
    make_database,
    make_experiment,
    make_formats,
    make_toolchain,
    ref,
)

OUTPUT = ROOT / "frontend" / "test" / "fixtures" / "choices_sequences.json"


def extra_algorithms() -> list[AlgorithmSpec]:
    """Alternatives that make the menus narrow visibly."""
    scale_alt = AlgorithmSpec(
        ref=ref("algorithm", "user/scale_alt/1"),
        kind="processing",
        inputs={"samples": FMT_DATA},
        outputs={"scaled": FMT_DATA},
        parameters={"factor": Parameter(type=TypeSpec(scalar="float64"), default=3.0)},
        source="class Algorithm:\n    def process(self, inputs, output):\n        pass\n",
    )
    label_stats = AlgorithmSpec(
        ref=ref("algorithm", "user/labelstats/1"),
        kind="analyzer",
        inputs={"scores": FMT_LABEL},
        outputs={},
        results={"n": "int64"},
        source="",
    )
    score_stats_alt = AlgorithmSpec(
        ref=ref("algorithm", "user/stats_alt/1"),
        kind="analyzer",
        inputs={"scores": FMT_SCORE},
        outputs={},
        results={"median": "float64"},
        source="",
    )
    return [scale_alt, label_stats, score_stats_alt]


def main() -> None:
    with tempfile.TemporaryDirectory() as tmp:
        platform = Platform(tmp)
        client = TestClient(create_app(platform))
        admin = platform.create_user("root", admin=True)
        user = platform.create_user("user")

        def push(collection: str, obj, token: str, owner: str | None = None) -> None:
            body = {"name": obj.ref.name, "version": obj.ref.version, "spec": obj.to_doc()}
            if owner:
                body["owner"] = owner
            response = client.post(
                f"/api/v1/{collection}", json=body, headers={"Authorization": f"Bearer {token}"}
            )
            assert response.status_code == 201, response.text

        for fmt in make_formats():
            push("formats", fmt, user)
        push("databases", make_database(), admin, owner="user")
        for alg in make_algorithms() + extra_algorithms():
            push("algorithms", alg, user)
        push("toolchains", make_toolchain(), user)

        toolchain = make_toolchain()
        blocks = [b.name for b in toolchain.blocks]
        full = make_experiment().assignments
        assignment_docs = {name: a.to_doc() for name, a in full.items()}
        # per-block candidate pools for scripted picks
        alternates = {
            "scale": [
                {"algorithm": "user/scale/1", "parameters": {}},
                {"algorithm": "user/scale_alt/1", "parameters": {}},
            ],
            "analysis": [
                {"algorithm": "user/stats/1", "parameters": {}},
                {"algorithm": "user/stats_alt/1", "parameters": {}},
            ],
        }

        def choices_for(partial: dict) -> dict:
            encoded = urllib.parse.quote(json.dumps(partial))
            response = client.get(
                f"/api/v1/choices?toolchain=user/chain/1&partial={encoded}",
                headers={"Authorization": f"Bearer {user}"},
            )
            assert response.status_code == 200, response.text
            return response.json()["choices"]

        rng = random.Random(2026)
        sequences = []
        for index in range(20):
            order = blocks[:]
            rng.shuffle(order)
            partial: dict = {}
            steps = [{"partial": dict(partial), "choices": choices_for(partial)}]
            for block in order:
                pool = alternates.get(block, [assignment_docs[block]])
                partial[block] = pool[(index + len(partial)) % len(pool)]
                steps.append({"partial": dict(partial), "choices": choices_for(partial)})
            sequences.append({"sequence": index, "order": order, "steps": steps})

        OUTPUT.parent.mkdir(parents=True, exist_ok=True)
        OUTPUT.write_text(json.dumps({"toolchain": "user/chain/1", "blocks": blocks, "sequences": sequences}, indent=1))
        print(f"wrote {OUTPUT} ({len(sequences)} sequences)")


if __name__ == "__main__":
    main()
