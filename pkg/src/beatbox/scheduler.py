"""Scheduler core: experiment planning with cache skipping, queue/worker
assignment with owner fairness, and journal-backed crash recovery.

The core is one logical state machine. Every externally visible change is
an event: applied to in-memory state and appended to the journal, so replay
of the journal reconstructs the exact scheduling state. Heartbeats are
volatile and deliberately not journaled.
"""
from __future__ import annotations

import logging
import os
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

from .cache import BlockCache
from .canonical import canonical_bytes, canonical_loads, canonical_digest
from .model import (
    AlgorithmSpec,
    DatabaseSpec,
    DatasetAssignment,
    ExperimentSpec,
    ToolchainSpec,
)
from .runner import BlockJobDescriptor, ResourceLimits
from .validation import Catalog, validate_experiment, validate_toolchain

log = logging.getLogger("beatbox.scheduler")

HEARTBEAT_INTERVAL = 10.0
HEARTBEAT_TIMEOUT = 30.0

TERMINAL_JOB_STATES = {"done", "failed", "cancelled", "skipped"}
TERMINAL_RUN_STATES = {"done", "failed", "cancelled"}


class SchedulerError(Exception):
    def __init__(self, message: str, code: str = "conflict") -> None:
        super().__init__(message)
        self.code = code


@dataclass(frozen=True)
class Queue:
    name: str
    limits: ResourceLimits
    principals: frozenset[str] = frozenset()  # empty = everyone

    def to_doc(self) -> dict:
        return {
            "name": self.name,
            "limits": self.limits.to_doc(),
            "principals": sorted(self.principals),
        }

    @classmethod
    def from_doc(cls, doc: dict) -> Queue:
        return cls(
            name=doc["name"],
            limits=ResourceLimits.from_doc(doc["limits"]),
            principals=frozenset(doc.get("principals", [])),
        )


@dataclass
class WorkerState:
    id: str
    cores: int
    memory_bytes: int
    environments: set[str]
    queues: set[str]
    state: str = "active"  # active | disabled | lost
    last_heartbeat: float = 0.0

    def to_doc(self) -> dict:
        return {
            "id": self.id,
            "cores": self.cores,
            "memory_bytes": self.memory_bytes,
            "environments": sorted(self.environments),
            "queues": sorted(self.queues),
        }


@dataclass
class JobState:
    id: str
    run_id: str
    block: str
    descriptor: BlockJobDescriptor
    state: str  # blocked | pending | assigned | running | done | failed | cancelled | skipped
    depends_on: set[str]
    owner: str
    submitted_at: float
    queue: str
    key: str
    fold: tuple[int, int] | None = None
    merge_of: tuple[str, ...] = ()  # fold job ids, merge jobs only
    worker: str | None = None
    failure: dict | None = None

    def to_doc(self) -> dict:
        return {
            "id": self.id,
            "run_id": self.run_id,
            "block": self.block,
            "descriptor": self.descriptor.to_doc(),
            "state": self.state,
            "depends_on": sorted(self.depends_on),
            "owner": self.owner,
            "submitted_at": self.submitted_at,
            "queue": self.queue,
            "key": self.key,
            "fold": list(self.fold) if self.fold else None,
            "merge_of": list(self.merge_of),
            "worker": self.worker,
            "failure": self.failure,
        }

    @classmethod
    def from_doc(cls, doc: dict) -> JobState:
        fold = doc.get("fold")
        return cls(
            id=doc["id"],
            run_id=doc["run_id"],
            block=doc["block"],
            descriptor=BlockJobDescriptor.from_doc(doc["descriptor"]),
            state=doc["state"],
            depends_on=set(doc.get("depends_on", [])),
            owner=doc["owner"],
            submitted_at=doc["submitted_at"],
            queue=doc["queue"],
            key=doc["key"],
            fold=(fold[0], fold[1]) if fold else None,
            merge_of=tuple(doc.get("merge_of", [])),
            worker=doc.get("worker"),
            failure=doc.get("failure"),
        )


@dataclass
class RunState:
    id: str
    experiment: str
    owner: str
    jobs: dict[str, JobState]
    created_at: float
    state: str = "running"

    def job_states(self) -> dict[str, str]:
        return {job.id: job.state for job in self.jobs.values()}

    def to_doc(self) -> dict:
        return {
            "id": self.id,
            "experiment": self.experiment,
            "owner": self.owner,
            "created_at": self.created_at,
            "state": self.state,
            "jobs": {jid: job.to_doc() for jid, job in self.jobs.items()},
        }

    @classmethod
    def from_doc(cls, doc: dict) -> RunState:
        return cls(
            id=doc["id"],
            experiment=doc["experiment"],
            owner=doc["owner"],
            jobs={jid: JobState.from_doc(j) for jid, j in doc.get("jobs", {}).items()},
            created_at=doc["created_at"],
            state=doc.get("state", "running"),
        )


def _view_digest(db: DatabaseSpec, protocol: str, set_name: str) -> str:
    return canonical_digest({"database": db.digest(), "protocol": protocol, "set": set_name})


def plan_jobs(
    exp: ExperimentSpec,
    catalog: Catalog,
    cache: BlockCache,
    queues: dict[str, Queue],
    run_id: str,
    clock: Callable[[], float],
) -> dict[str, JobState]:
    """One job per block (plus fold/merge jobs), with cache hits skipped."""
    tc: ToolchainSpec = catalog.get(exp.toolchain)
    order = validate_toolchain(tc).order
    blocks = {b.name: b for b in tc.blocks}
    incoming: dict[str, dict[str, tuple[str, str]]] = {name: {} for name in blocks}
    for conn in tc.connections:
        incoming[conn.dst_block][conn.dst_endpoint] = (conn.src_block, conn.src_endpoint)

    jobs: dict[str, JobState] = {}
    block_key: dict[str, str] = {}
    block_final_job: dict[str, str] = {}
    now = clock()

    for name in order:
        block = blocks[name]
        assignment = exp.assignments[name]
        placement = exp.placement(name)
        queue = queues[placement.queue]
        limits = queue.limits

        if isinstance(assignment, DatasetAssignment):
            db: DatabaseSpec = catalog.get(assignment.database)
            view = db.protocol(assignment.protocol).set(assignment.set).view
            descriptor = BlockJobDescriptor(
                experiment=exp.ref.render(),
                block=name,
                kind="dataset",
                algorithm_digest=_view_digest(db, assignment.protocol, assignment.set),
                source=view.loader,
                language="python",
                parameters={},
                inputs={},
                input_formats={},
                outputs={ch: ref.render() for ch, ref in view.outputs.items()},
                sync=None,
                limits=limits,
                environment=placement.environment,
            )
            splittable = False
            parameters = {}
            alg = None
        else:
            alg: AlgorithmSpec = catalog.get(assignment.algorithm)
            parameters = {p: param.default for p, param in alg.parameters.items()}
            parameters.update(assignment.parameters)
            inputs = {}
            input_formats = {}
            for endpoint in block.inputs:
                src_block, src_endpoint = incoming[name][endpoint]
                inputs[endpoint] = (block_key[src_block], src_endpoint)
                input_formats[endpoint] = alg.inputs[endpoint].render()
            descriptor = BlockJobDescriptor(
                experiment=exp.ref.render(),
                block=name,
                kind=alg.kind,
                algorithm_digest=alg.digest(),
                source=alg.source,
                language=alg.language,
                parameters=parameters,
                inputs=inputs,
                input_formats=input_formats,
                outputs={ep: ref.render() for ep, ref in alg.outputs.items()},
                sync=block.sync,
                limits=limits,
                environment=placement.environment,
                results_schema=dict(alg.results) if alg.kind == "analyzer" else {},
            )
            splittable = alg.splittable

        final_key = descriptor.cache_key()
        block_key[name] = final_key
        upstream_jobs = {
            block_final_job[src] for src, _ in incoming[name].values() if src in block_final_job
        }

        folds = placement.folds if (splittable and block.kind == "processing") else 1
        if cache.contains(final_key) or folds == 1:
            job_id = f"{run_id}/{name}"
            jobs[job_id] = JobState(
                id=job_id,
                run_id=run_id,
                block=name,
                descriptor=descriptor,
                state="skipped" if cache.contains(final_key) else "blocked",
                depends_on=set(upstream_jobs),
                owner=exp.ref.owner,
                submitted_at=now,
                queue=placement.queue,
                key=final_key,
            )
            block_final_job[name] = job_id
        else:
            fold_ids = []
            for i in range(folds):
                fold = (i, folds)
                fold_descriptor = BlockJobDescriptor.from_doc({**descriptor.to_doc(), "fold": list(fold)})
                fold_key = fold_descriptor.cache_key()
                fold_id = f"{run_id}/{name}@{i}.{folds}"
                jobs[fold_id] = JobState(
                    id=fold_id,
                    run_id=run_id,
                    block=name,
                    descriptor=fold_descriptor,
                    state="skipped" if cache.contains(fold_key) else "blocked",
                    depends_on=set(upstream_jobs),
                    owner=exp.ref.owner,
                    submitted_at=now,
                    queue=placement.queue,
                    key=fold_key,
                    fold=fold,
                )
                fold_ids.append(fold_id)
            merge_id = f"{run_id}/{name}+merge"
            jobs[merge_id] = JobState(
                id=merge_id,
                run_id=run_id,
                block=name,
                descriptor=descriptor,
                state="blocked",
                depends_on=set(fold_ids),
                owner=exp.ref.owner,
                submitted_at=now,
                queue=placement.queue,
                key=final_key,
                merge_of=tuple(fold_ids),
            )
            block_final_job[name] = merge_id

    # Unblock jobs whose dependencies are already satisfied.
    for job in jobs.values():
        if job.state == "blocked" and all(
            jobs[dep].state in ("done", "skipped") for dep in job.depends_on
        ):
            job.state = "pending"
    return jobs


class SchedulerCore:
    """Serialized state machine over runs, jobs, queues, and workers."""

    def __init__(
        self,
        queues: dict[str, Queue],
        cache: BlockCache,
        journal_path: str | Path | None = None,
        clock: Callable[[], float] = time.time,
        heartbeat_timeout: float = HEARTBEAT_TIMEOUT,
        on_run_finished: Callable[[RunState], None] | None = None,
    ) -> None:
        self.queues = dict(queues)
        self.cache = cache
        self.clock = clock
        self.heartbeat_timeout = heartbeat_timeout
        self.on_run_finished = on_run_finished
        self.runs: dict[str, RunState] = {}
        self.workers: dict[str, WorkerState] = {}
        self._active: set[str] = set()  # non-terminal run ids, for O(active) ticks
        self._kill_lists: dict[str, set[str]] = {}  # worker -> jobs to kill, volatile
        self._cursor: dict[str, str] = {}  # queue -> owner assigned last
        self._run_sequence: dict[str, int] = {}
        self._journal_path = Path(journal_path) if journal_path else None
        self._replaying = False
        if self._journal_path is not None:
            self._journal_path.parent.mkdir(parents=True, exist_ok=True)
            self._replay()

    # ----- journal ------------------------------------------------------

    def _replay(self) -> None:
        if not self._journal_path.exists():
            return
        self._replaying = True
        try:
            with open(self._journal_path, "rb") as fh:
                for line in fh:
                    line = line.strip()
                    if not line:
                        continue
                    try:
                        event = canonical_loads(line)
                    except ValueError:
                        break  # torn tail write from a crash
                    self._apply(event)
        finally:
            self._replaying = False
        now = self.clock()
        for worker in self.workers.values():
            worker.last_heartbeat = now  # grace period after restart

    def _emit(self, event: dict) -> None:
        self._apply(event)
        if self._journal_path is not None and not self._replaying:
            with open(self._journal_path, "ab") as fh:
                fh.write(canonical_bytes(event) + b"\n")
                fh.flush()
                os.fsync(fh.fileno())

    # ----- event application --------------------------------------------

    def _apply(self, event: dict) -> None:
        kind = event["event"]
        if kind == "run_planned":
            run = RunState.from_doc(event["run"])
            self.runs[run.id] = run
            self._active.add(run.id)
            seq = int(run.id.rsplit("#", 1)[1])
            prev = self._run_sequence.get(run.experiment, 0)
            self._run_sequence[run.experiment] = max(prev, seq)
            self._check_run_finished(run)
        elif kind == "worker_registered":
            doc = event["worker"]
            existing = self.workers.get(doc["id"])
            self.workers[doc["id"]] = WorkerState(
                id=doc["id"],
                cores=doc["cores"],
                memory_bytes=doc["memory_bytes"],
                environments=set(doc.get("environments", [])),
                queues=set(doc.get("queues", [])),
                state="active",
                last_heartbeat=existing.last_heartbeat if existing else self.clock(),
            )
        elif kind == "worker_state":
            worker = self.workers.get(event["id"])
            if worker is not None:
                worker.state = event["state"]
        elif kind == "job_assigned":
            job = self._job(event["run"], event["job"])
            if job is not None and job.state == "pending":
                job.state = "assigned"
                job.worker = event["worker"]
                self._cursor[job.queue] = job.owner
        elif kind == "job_started":
            job = self._job(event["run"], event["job"])
            if job is not None and job.state == "assigned":
                job.state = "running"
        elif kind == "jobs_requeued":
            for run_id, job_id in event["jobs"]:
                job = self._job(run_id, job_id)
                if job is not None and job.state in ("assigned", "running"):
                    job.state = "pending"
                    job.worker = None
        elif kind == "worker_lost":
            worker = self.workers.get(event["id"])
            if worker is not None and worker.state == "active":
                worker.state = "lost"
        elif kind == "job_result":
            self._apply_result(event)
        elif kind == "run_cancelled":
            run = self.runs.get(event["run"])
            if run is not None and run.state not in TERMINAL_RUN_STATES:
                for job in run.jobs.values():
                    if job.state not in TERMINAL_JOB_STATES:
                        if job.state in ("assigned", "running") and job.worker:
                            self._kill_lists.setdefault(job.worker, set()).add(job.id)
                        job.state = "cancelled"
                run.state = "cancelled"
                self._active.discard(run.id)
        else:
            raise SchedulerError(f"unknown journal event {kind!r}", code="corrupt")

    def _job(self, run_id: str, job_id: str) -> JobState | None:
        run = self.runs.get(run_id)
        return None if run is None else run.jobs.get(job_id)

    def _apply_result(self, event: dict) -> None:
        run = self.runs.get(event["run"])
        if run is None:
            return
        job = run.jobs.get(event["job"])
        if job is None or job.state in TERMINAL_JOB_STATES:
            return  # duplicate or stale result: ignored
        if event["status"] == "success":
            job.state = "done"
            self._unblock_dependents(run, job)
        else:
            job.state = "failed"
            job.failure = {
                "status": event["status"],
                "limit": event.get("limit"),
                "message": event.get("message", ""),
            }
            for other in run.jobs.values():
                if other.state not in TERMINAL_JOB_STATES:
                    if other.state in ("assigned", "running") and other.worker:
                        self._kill_lists.setdefault(other.worker, set()).add(other.id)
                    other.state = "cancelled"
            run.state = "failed"
        self._check_run_finished(run)

    def _unblock_dependents(self, run: RunState, done_job: JobState) -> None:
        for job in run.jobs.values():
            if job.state == "blocked" and done_job.id in job.depends_on:
                if all(run.jobs[d].state in ("done", "skipped") for d in job.depends_on):
                    job.state = "pending"

    def _check_run_finished(self, run: RunState) -> None:
        if run.state in TERMINAL_RUN_STATES:
            self._active.discard(run.id)
            if run.state == "failed" and self.on_run_finished:
                self.on_run_finished(run)
            return
        states = {job.state for job in run.jobs.values()}
        if states <= {"done", "skipped"}:
            run.state = "done"
        elif "failed" in states:
            run.state = "failed"
        else:
            return
        self._active.discard(run.id)
        if self.on_run_finished:
            self.on_run_finished(run)

    # ----- public operations ---------------------------------------------

    def plan_experiment(self, exp: ExperimentSpec, catalog: Catalog) -> RunState:
        report = validate_experiment(
            exp,
            catalog,
            queues=set(self.queues),
            environments=None,  # environment existence is checked by the service
        )
        if not report.ok:
            problems = "; ".join(f"{i.path}: {i.message}" for i in report.errors())
            raise SchedulerError(f"experiment does not validate: {problems}", code="bad_request")
        for block in exp.assignments:
            queue = self.queues.get(exp.placement(block).queue)
            if queue is None:
                raise SchedulerError(f"unknown queue {exp.placement(block).queue!r}", code="bad_request")
        seq = self._run_sequence.get(exp.ref.render(), 0) + 1
        run_id = f"{exp.ref.render()}#{seq}"
        jobs = plan_jobs(exp, catalog, self.cache, self.queues, run_id, self.clock)
        run = RunState(
            id=run_id,
            experiment=exp.ref.render(),
            owner=exp.ref.owner,
            jobs=jobs,
            created_at=self.clock(),
        )
        self._emit({"event": "run_planned", "run": run.to_doc()})
        return self.runs[run_id]

    def register_worker(self, doc: dict) -> WorkerState:
        worker_id = doc.get("id")
        if not isinstance(worker_id, str) or not worker_id:
            raise SchedulerError("worker registration requires a string id", code="bad_request")
        for field in ("cores", "memory_bytes"):
            value = doc.get(field)
            if not isinstance(value, int) or isinstance(value, bool) or value <= 0:
                raise SchedulerError(f"worker {field} must be a positive integer", code="bad_request")
        for listing in ("environments", "queues"):
            values = doc.get(listing, [])
            if not isinstance(values, list) or not all(isinstance(v, str) for v in values):
                raise SchedulerError(f"worker {listing} must be a list of names", code="bad_request")
        for queue in doc.get("queues", []):
            if queue not in self.queues:
                raise SchedulerError(f"unknown queue {queue!r}", code="bad_request")
        self._emit(
            {
                "event": "worker_registered",
                "worker": {
                    "id": worker_id,
                    "cores": doc["cores"],
                    "memory_bytes": doc["memory_bytes"],
                    "environments": doc.get("environments", []),
                    "queues": doc.get("queues", []),
                },
            }
        )
        worker = self.workers[worker_id]
        worker.last_heartbeat = self.clock()
        return worker

    def heartbeat(self, worker_id: str) -> None:
        worker = self.workers.get(worker_id)
        if worker is None:
            raise SchedulerError(f"unknown worker {worker_id!r}", code="not_found")
        worker.last_heartbeat = self.clock()
        if worker.state == "lost":
            self._emit({"event": "worker_state", "id": worker_id, "state": "active"})

    def set_worker_state(self, worker_id: str, state: str) -> None:
        if state not in ("active", "disabled"):
            raise SchedulerError(f"illegal worker state {state!r}", code="bad_request")
        if worker_id not in self.workers:
            raise SchedulerError(f"unknown worker {worker_id!r}", code="not_found")
        self._emit({"event": "worker_state", "id": worker_id, "state": state})
        if state == "active":
            self.workers[worker_id].last_heartbeat = self.clock()

    def _active_runs(self):
        for run_id in list(self._active):
            run = self.runs.get(run_id)
            if run is not None:
                yield run

    def _worker_load(self, worker_id: str) -> tuple[int, int]:
        cores = 0
        memory = 0
        for run in self._active_runs():
            for job in run.jobs.values():
                if job.worker == worker_id and job.state in ("assigned", "running"):
                    limits = self.queues[job.queue].limits
                    cores += limits.max_cores
                    memory += limits.max_memory_bytes
        return cores, memory

    def _eligible_worker(self, job: JobState) -> str | None:
        queue = self.queues[job.queue]
        for worker in sorted(self.workers.values(), key=lambda w: w.id):
            if worker.state != "active" or job.queue not in worker.queues:
                continue
            if job.descriptor.environment not in worker.environments:
                continue
            used_cores, used_memory = self._worker_load(worker.id)
            if used_cores + queue.limits.max_cores > worker.cores:
                continue
            if used_memory + queue.limits.max_memory_bytes > worker.memory_bytes:
                continue
            return worker.id
        return None

    def tick(self, now: float | None = None) -> list[tuple[str, str]]:
        """Requeue lost workers' jobs, then assign pending jobs fairly.

        Within a queue, owners are served round-robin and each owner's jobs
        FIFO. Deterministic given the state. Returns (job id, worker id).
        """
        now = self.clock() if now is None else now
        lost_jobs: list[tuple[str, str]] = []
        for worker in self.workers.values():
            if worker.state == "active" and now - worker.last_heartbeat > self.heartbeat_timeout:
                self._emit({"event": "worker_lost", "id": worker.id})
                for run in self._active_runs():
                    for job in run.jobs.values():
                        if job.worker == worker.id and job.state in ("assigned", "running"):
                            lost_jobs.append((run.id, job.id))
        if lost_jobs:
            self._emit({"event": "jobs_requeued", "jobs": lost_jobs, "reason": "worker-lost"})

        assignments: list[tuple[str, str]] = []
        for queue_name in sorted(self.queues):
            while True:
                pending: dict[str, list[JobState]] = {}
                for run in self._active_runs():
                    for job in run.jobs.values():
                        if job.state == "pending" and job.queue == queue_name:
                            pending.setdefault(job.owner, []).append(job)
                if not pending:
                    break
                owners = sorted(pending)
                cursor = self._cursor.get(queue_name)
                if cursor in owners:
                    start = (owners.index(cursor) + 1) % len(owners)
                else:
                    start = 0
                made_assignment = False
                for offset in range(len(owners)):
                    owner = owners[(start + offset) % len(owners)]
                    job = min(pending[owner], key=lambda j: (j.submitted_at, j.id))
                    worker_id = self._eligible_worker(job)
                    if worker_id is None:
                        continue
                    self._emit(
                        {"event": "job_assigned", "run": job.run_id, "job": job.id, "worker": worker_id}
                    )
                    assignments.append((job.id, worker_id))
                    made_assignment = True
                    break
                if not made_assignment:
                    break
        return assignments

    def poll_worker(self, worker_id: str) -> dict:
        """Deliver assigned jobs to a polling worker; flags jobs to kill."""
        worker = self.workers.get(worker_id)
        if worker is None:
            raise SchedulerError(f"unknown worker {worker_id!r}", code="not_found")
        worker.last_heartbeat = self.clock()
        payloads = []
        for run in self._active_runs():
            for job in run.jobs.values():
                if job.worker == worker_id and job.state == "assigned":
                    self._emit({"event": "job_started", "run": run.id, "job": job.id})
                    payload = {
                        "run": run.id,
                        "job": job.id,
                        "descriptor": job.descriptor.to_doc(),
                    }
                    if job.merge_of:
                        payload["merge_keys"] = [run.jobs[f].key for f in job.merge_of]
                    payloads.append(payload)
        cancelled = self._kill_lists.pop(worker_id, set())
        return {"jobs": payloads, "cancel": sorted(cancelled)}

    def report_result(self, run_id: str, job_id: str, result: dict) -> None:
        job = self._job(run_id, job_id)
        if job is None:
            log.warning("result for unknown job %s/%s ignored", run_id, job_id)
            return
        if job.state in TERMINAL_JOB_STATES:
            log.info("duplicate result for %s ignored (already %s)", job_id, job.state)
            return
        self._emit(
            {
                "event": "job_result",
                "run": run_id,
                "job": job_id,
                "status": result.get("status", "crashed"),
                "key": result.get("key"),
                "limit": result.get("limit"),
                "message": result.get("message", ""),
                "stats": result.get("stats", {}),
            }
        )

    def cancel_run(self, run_id: str) -> RunState:
        run = self.runs.get(run_id)
        if run is None:
            raise SchedulerError(f"unknown run {run_id!r}", code="not_found")
        if run.state in TERMINAL_RUN_STATES:
            raise SchedulerError(f"run {run_id} is already {run.state}", code="conflict")
        self._emit({"event": "run_cancelled", "run": run_id})
        return run

    def latest_run(self, experiment: str) -> RunState | None:
        candidates = [r for r in self.runs.values() if r.experiment == experiment]
        return max(candidates, key=lambda r: r.created_at, default=None)

    def worker_summary(self) -> list[dict]:
        now = self.clock()
        return [
            {
                **w.to_doc(),
                "state": w.state,
                "heartbeat_age": max(0.0, now - w.last_heartbeat),
            }
            for w in sorted(self.workers.values(), key=lambda w: w.id)
        ]
