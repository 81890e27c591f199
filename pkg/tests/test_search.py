"""Stored searches, leaderboard notifications, and lockable reports."""
from __future__ import annotations

import random

import pytest

from beatbox.governance import (
    AccessControl,
    FrozenViolation,
    Principal,
    attest,
    frozen_write_check,
    results_path,
)
from beatbox.search import (
    SearchError,
    create_report,
    evaluate_leaderboards,
    lock_report,
    read_log,
    report_by_number,
    run_search,
    validate_search_spec,
)
from beatbox.store import DocumentStore, Write, envelope, object_path
from fixtures import make_experiment, populate_store, ref

OWNER = Principal("user")
STRANGER = Principal("mallory")


@pytest.fixture
def store(tmp_path):
    s = DocumentStore(tmp_path, write_check=frozen_write_check)
    populate_store(s)
    return s


def add_completed_experiment(store, name: str, mean: float, *, owner: str | None = None) -> None:
    exp = make_experiment(name=name)
    doc = envelope(exp.ref, exp.to_doc())
    if owner:
        doc = {**doc, "owner": owner}
    store.commit([Write(path=object_path(exp.ref), expected=None, doc=doc)])
    store.commit(
        [
            Write(
                path=results_path(exp.ref),
                expected=None,
                doc={
                    "experiment": exp.ref.render(),
                    "run": f"{exp.ref.render()}#1",
                    "state": "done",
                    "completed_at": 1100.0,
                    "results": {
                        "analysis": {
                            "mean": {"kind": "float64", "value": mean},
                            "count": {"kind": "int64", "value": 10},
                        }
                    },
                    "stats": {},
                    "cache_keys": {},
                },
            )
        ]
    )


def query(filters=(), columns=(), leaderboard=False):
    return {
        "filters": list(filters),
        "columns": list(columns),
        "leaderboard": leaderboard,
        "doc": "",
    }


class TestValidateSpec:
    def test_rejects_unknown_field(self):
        with pytest.raises(SearchError):
            validate_search_spec(query(filters=[{"field": "speed", "op": "equals", "value": "x"}]))

    def test_rejects_two_sort_columns(self):
        with pytest.raises(SearchError):
            validate_search_spec(
                query(columns=[{"name": "a", "sort": "asc"}, {"name": "b", "sort": "desc"}])
            )


class TestRunSearch:
    def test_filter_by_toolchain(self, store):
        access = AccessControl(store)
        add_completed_experiment(store, "user/second/1", 4.0)
        add_completed_experiment(store, "user/third/1", 3.0)
        q = query(
            filters=[{"field": "toolchain", "op": "equals", "value": "user/chain/1"}],
            columns=[{"name": "mean", "sort": None}],
        )
        result = run_search(store, access, OWNER, q)
        assert [r["experiment"] for r in result["rows"]] == [
            "user/exp/1",
            "user/second/1",
            "user/third/1",
        ]

    def test_visibility_filters_rows(self, store):
        access = AccessControl(store)
        add_completed_experiment(store, "user/second/1", 4.0)
        result = run_search(store, access, STRANGER, query())
        assert result["rows"] == []
        access.share(
            OWNER,
            ref("experiment", "user/second/1"),
            {"level": "public", "users": [], "teams": [], "code_access": "open"},
        )
        result = run_search(store, access, STRANGER, query())
        assert [r["experiment"] for r in result["rows"]] == ["user/second/1"]

    def test_sort_matches_independent_sort(self, store):
        access = AccessControl(store)
        rng = random.Random(5)
        means = {}
        for i in range(8):
            mean = round(rng.uniform(0, 50), 3)
            name = f"user/gen{i}/1"
            add_completed_experiment(store, name, mean)
            means[name] = mean
        means["user/exp/1"] = 9.5
        q = query(columns=[{"name": "mean", "sort": "asc"}])
        result = run_search(store, access, OWNER, q)
        got = [r["experiment"] for r in result["rows"]]
        expected = [name for name, _ in sorted(means.items(), key=lambda kv: (kv[1], kv[0]))]
        assert got == expected

    def test_unknown_column_yields_empty_cells(self, store):
        access = AccessControl(store)
        q = query(columns=[{"name": "nonexistent", "sort": None}])
        result = run_search(store, access, OWNER, q)
        assert result["rows"][0]["values"] == {"nonexistent": None}

    def test_missing_values_sort_last_in_both_directions(self, store):
        access = AccessControl(store)
        add_completed_experiment(store, "user/a/1", 1.0)
        # an experiment whose analyzer never produced "mean"
        exp = make_experiment(name="user/nomean/1")
        from beatbox.store import Write, envelope, object_path

        store.commit(
            [Write(path=object_path(exp.ref), expected=None, doc=envelope(exp.ref, exp.to_doc()))]
        )
        store.commit(
            [
                Write(
                    path=results_path(exp.ref),
                    expected=None,
                    doc={
                        "experiment": exp.ref.render(), "run": "x#1", "state": "done",
                        "completed_at": 0.0, "results": {}, "stats": {}, "cache_keys": {},
                    },
                )
            ]
        )
        for direction in ("asc", "desc"):
            q = query(columns=[{"name": "mean", "sort": direction}])
            rows = run_search(store, access, OWNER, q)["rows"]
            assert rows[-1]["experiment"] == "user/nomean/1", direction

    def test_contains_and_prefix_operators(self, store):
        access = AccessControl(store)
        add_completed_experiment(store, "user/widget/1", 1.0)
        by_prefix = run_search(
            store, access, OWNER, query(filters=[{"field": "algorithm", "op": "prefix", "value": "user/sc"}])
        )
        assert {r["experiment"] for r in by_prefix["rows"]} == {"user/exp/1", "user/widget/1"}
        by_contains = run_search(
            store, access, OWNER, query(filters=[{"field": "owner", "op": "contains", "value": "use"}])
        )
        assert len(by_contains["rows"]) == 2

    def test_incomplete_experiments_excluded(self, store):
        access = AccessControl(store)
        exp = make_experiment(name="user/pending/1")
        store.commit(
            [Write(path=object_path(exp.ref), expected=None, doc=envelope(exp.ref, exp.to_doc()))]
        )
        result = run_search(store, access, OWNER, query())
        assert "user/pending/1" not in {r["experiment"] for r in result["rows"]}


class TestLeaderboards:
    def _resolve(self, name):
        return Principal(name)

    def _setup_query(self, store, leaderboard=True):
        q_ref = ref("search", "user/board/1")
        spec = validate_search_spec(
            query(columns=[{"name": "mean", "sort": "asc"}], leaderboard=leaderboard)
        )
        store.commit(
            [Write(path=object_path(q_ref), expected=None, doc=envelope(q_ref, spec))]
        )
        return q_ref

    def test_change_emits_one_notification(self, store, tmp_path):
        access = AccessControl(store)
        self._setup_query(store)
        log_path = tmp_path / "notifications.log"
        first = evaluate_leaderboards(store, access, log_path, self._resolve)
        assert len(first) == 1  # first evaluation records a baseline
        again = evaluate_leaderboards(store, access, log_path, self._resolve)
        assert again == []  # unchanged results: no new notification
        add_completed_experiment(store, "user/better/1", 1.0)
        third = evaluate_leaderboards(store, access, log_path, self._resolve)
        assert len(third) == 1
        entries = read_log(log_path)
        assert len(entries) == 2
        assert entries[-1]["query"] == "user/board/1"
        assert entries[-1]["recipients"] == ["user"]

    def test_non_leaderboard_queries_ignored(self, store, tmp_path):
        access = AccessControl(store)
        self._setup_query(store, leaderboard=False)
        log_path = tmp_path / "notifications.log"
        assert evaluate_leaderboards(store, access, log_path, self._resolve) == []

    def test_webhook_invoked_on_change(self, store, tmp_path):
        access = AccessControl(store)
        q_ref = ref("search", "user/board/1")
        spec = validate_search_spec(query(leaderboard=True))
        spec["webhook"] = "http://example.invalid/hook"
        store.commit([Write(path=object_path(q_ref), expected=None, doc=envelope(q_ref, spec))])
        posted = []
        evaluate_leaderboards(
            store,
            access,
            tmp_path / "n.log",
            self._resolve,
            webhook_poster=lambda url, doc: posted.append((url, doc)),
        )
        assert len(posted) == 1
        assert posted[0][0] == "http://example.invalid/hook"

    def test_idempotent_reevaluations_bounded(self, store, tmp_path):
        access = AccessControl(store)
        self._setup_query(store)
        log_path = tmp_path / "notifications.log"
        for _ in range(5):
            evaluate_leaderboards(store, access, log_path, self._resolve)
        assert len(read_log(log_path)) == 1


class TestReports:
    def test_create_requires_attestation(self, store):
        with pytest.raises(SearchError) as err:
            create_report(
                store,
                OWNER,
                ref("report", "user/paper/1"),
                {"title": "Paper", "experiments": ["user/exp/1"]},
                number="123456789",
            )
        assert "user/exp/1" in str(err.value)

    def test_lock_and_anonymous_fetch(self, store):
        attest(store, OWNER, ref("experiment", "user/exp/1"), rng=random.Random(11))
        create_report(
            store,
            OWNER,
            ref("report", "user/paper/1"),
            {"title": "Paper", "experiments": ["user/exp/1"]},
            number="123456789",
        )
        locked = lock_report(store, OWNER, "123456789")
        assert locked["spec"]["locked"] is True
        fetched = report_by_number(store, "123456789")
        assert fetched["spec"]["title"] == "Paper"
        assert fetched["policy"]["level"] == "public"

    def test_mutation_after_lock_fails(self, store):
        attest(store, OWNER, ref("experiment", "user/exp/1"), rng=random.Random(12))
        create_report(
            store,
            OWNER,
            ref("report", "user/paper/1"),
            {"title": "Paper", "experiments": ["user/exp/1"]},
            number="222222222",
        )
        lock_report(store, OWNER, "222222222")
        doc = report_by_number(store, "222222222")
        from beatbox.canonical import canonical_digest

        with pytest.raises(FrozenViolation):
            store.commit(
                [
                    Write(
                        path=object_path(ref("report", "user/paper/1")),
                        expected=canonical_digest(doc),
                        doc={**doc, "spec": {**doc["spec"], "title": "Edited"}},
                    )
                ]
            )

    def test_lock_requires_ownership(self, store):
        attest(store, OWNER, ref("experiment", "user/exp/1"), rng=random.Random(13))
        create_report(
            store,
            OWNER,
            ref("report", "user/paper/1"),
            {"title": "Paper", "experiments": ["user/exp/1"]},
            number="333333333",
        )
        from beatbox.governance import GovernanceError

        with pytest.raises(GovernanceError):
            lock_report(store, STRANGER, "333333333")

    def test_locked_report_digest_constant(self, store):
        attest(store, OWNER, ref("experiment", "user/exp/1"), rng=random.Random(14))
        create_report(
            store,
            OWNER,
            ref("report", "user/paper/1"),
            {"title": "Paper", "experiments": ["user/exp/1"]},
            number="444444444",
        )
        lock_report(store, OWNER, "444444444")
        from beatbox.canonical import canonical_digest

        digests = {canonical_digest(report_by_number(store, "444444444")) for _ in range(3)}
        assert len(digests) == 1
