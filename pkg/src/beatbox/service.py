"""REST service: token auth, object CRUD with validation, experiment
execution, attestation, search, and the worker protocol.

Everything shares one data directory: document store, block cache, and the
scheduler journal. All scheduler access is serialized through one lock, so
handlers observe a consistent state machine.
"""
from __future__ import annotations

import asyncio
import hashlib
import hmac
import logging
import random
import secrets
import threading
import time
from pathlib import Path

import httpx
from fastapi import FastAPI, Request, Response
from fastapi.staticfiles import StaticFiles

from .cache import BlockCache
from .canonical import canonical_bytes, canonical_digest, canonical_loads
from .config import Config, load_config
from .governance import (
    AccessControl,
    FrozenViolation,
    GovernanceError,
    Principal,
    attest,
    attested_numbers,
    frozen_write_check,
    results_path,
)
from .model import (
    DataFormat,
    DatasetAssignment,
    ExperimentSpec,
    ModelError,
    ObjectRef,
    ToolchainSpec,
    assignment_from_doc,
    parse_object,
)
from .scheduler import RunState, SchedulerCore, SchedulerError
from .search import (
    SearchError,
    create_report,
    evaluate_leaderboards,
    lock_report,
    read_log,
    report_by_number,
    run_search,
    validate_search_spec,
)
from .store import (
    ANY,
    DocumentStore,
    StoreConflict,
    Write,
    envelope,
    envelope_ref,
    object_path,
    ref_from_path,
)
from .validation import validate_experiment, validate_format, validate_toolchain

log = logging.getLogger("beatbox.service")

COLLECTIONS = {
    "formats": "format",
    "algorithms": "algorithm",
    "toolchains": "toolchain",
    "databases": "database",
    "experiments": "experiment",
    "searches": "search",
    "reports": "report",
    "teams": "team",
}

USERS_PATH = "auth/users.json"
TOKENS_PATH = "auth/tokens.json"


class ApiError(Exception):
    def __init__(self, status: int, code: str, message: str, details: dict | None = None) -> None:
        super().__init__(message)
        self.status = status
        self.code = code
        self.details = details or {}


_CODE_STATUS = {
    "bad_request": 400,
    "unauthorized": 401,
    "forbidden": 403,
    "not_found": 404,
    "conflict": 409,
    "frozen": 409,
    "corrupt": 500,
}


def _from_domain_error(exc: Exception) -> ApiError:
    code = getattr(exc, "code", "bad_request")
    return ApiError(_CODE_STATUS.get(code, 400), code, str(exc))


class StoreCatalog:
    """Catalog protocol over stored envelopes."""

    def __init__(self, store: DocumentStore) -> None:
        self.store = store

    def get(self, ref: ObjectRef):
        doc = self.store.read(object_path(ref))
        if doc is None:
            return None
        return parse_object(ref.kind, ref, doc["spec"])

    def list(self, kind: str) -> list[ObjectRef]:
        refs = []
        for path in self.store.list(f"objects/{kind}"):
            try:
                refs.append(ref_from_path(path))
            except Exception:
                continue
        return sorted(refs)


class VisibleCatalog(StoreCatalog):
    """Catalog whose listings only show objects a principal may use."""

    def __init__(self, store: DocumentStore, access: AccessControl, principal: Principal) -> None:
        super().__init__(store)
        self.access = access
        self.principal = principal

    def list(self, kind: str) -> list[ObjectRef]:
        visible = []
        for ref in super().list(kind):
            doc = self.store.read(object_path(ref))
            if doc is not None and self.access.can_execute(self.principal, doc):
                visible.append(ref)
        return visible


class Platform:
    def __init__(self, data_dir: str | Path, config: Config | None = None) -> None:
        self.data_dir = Path(data_dir)
        self.data_dir.mkdir(parents=True, exist_ok=True)
        self.config = config or load_config(self.data_dir)
        self.store = DocumentStore(self.data_dir, write_check=frozen_write_check)
        self.cache = BlockCache(self.data_dir / "cache")
        self.access = AccessControl(self.store)
        self.catalog = StoreCatalog(self.store)
        self.notifications_log = self.data_dir / "notifications.log"
        self.scheduler_lock = threading.RLock()
        self.scheduler = SchedulerCore(
            queues=self.config.queues,
            cache=self.cache,
            journal_path=self.data_dir / "scheduler" / "journal.log",
            heartbeat_timeout=self.config.heartbeat_timeout,
            on_run_finished=self._on_run_finished,
        )
        self._stop = threading.Event()
        self._tick_thread: threading.Thread | None = None

    # ----- users and tokens ----------------------------------------------

    def create_user(self, name: str, *, admin: bool = False) -> str:
        users = self.store.read(USERS_PATH) or {"users": {}}
        tokens = self.store.read(TOKENS_PATH) or {"tokens": {}}
        users["users"][name] = {"admin": admin, "created_at": time.time()}
        token = secrets.token_hex(32)
        tokens["tokens"][token] = {"user": name, "created_at": time.time()}
        self.store.commit(
            [
                Write(path=USERS_PATH, expected=ANY, doc=users),
                Write(path=TOKENS_PATH, expected=ANY, doc=tokens),
            ]
        )
        return token

    def resolve_principal(self, name: str) -> Principal:
        users = self.store.read(USERS_PATH) or {"users": {}}
        info = users["users"].get(name, {})
        return Principal(name=name, is_admin=bool(info.get("admin")))

    def verify_store(self) -> None:
        """Read every stored document; raises CorruptStoreError on damage."""
        for path in [USERS_PATH, TOKENS_PATH] + self.store.list("objects"):
            self.store.read(path)

    def authenticate(self, token: str) -> Principal | None:
        tokens = (self.store.read(TOKENS_PATH) or {}).get("tokens", {})
        matched = None
        for candidate, info in tokens.items():  # constant-time comparison per token
            if hmac.compare_digest(candidate, token):
                matched = info
        if matched is None:
            return None
        return self.resolve_principal(matched["user"])

    # ----- run lifecycle ---------------------------------------------------

    def _on_run_finished(self, run: RunState) -> None:
        if run.state != "done":
            return
        exp_ref = ObjectRef.parse("experiment", run.experiment)
        results: dict[str, dict] = {}
        stats: dict[str, dict] = {}
        cache_keys: dict[str, str] = {}
        for job in run.jobs.values():
            if job.fold is not None:
                continue
            entry = self.cache.get(job.key)
            cache_keys[job.block] = job.key
            if entry is None:
                continue
            if entry.results:
                results[job.block] = entry.results
            stats[job.block] = entry.stats.to_doc()
        doc = {
            "experiment": run.experiment,
            "run": run.id,
            "state": "done",
            "completed_at": time.time(),
            "results": results,
            "stats": stats,
            "cache_keys": cache_keys,
            "result_digest": canonical_digest(results),
        }
        existing = self.store.read(results_path(exp_ref))
        self.store.commit(
            [Write(path=results_path(exp_ref), expected=None if existing is None else ANY, doc=doc)]
        )
        try:
            evaluate_leaderboards(
                self.store,
                self.access,
                self.notifications_log,
                self.resolve_principal,
                webhook_poster=_post_webhook,
            )
        except Exception:
            log.exception("leaderboard evaluation failed")

    # ----- background ticking ---------------------------------------------

    def start_background(self) -> None:
        def loop() -> None:
            while not self._stop.wait(self.config.tick_interval):
                with self.scheduler_lock:
                    try:
                        self.scheduler.tick()
                    except Exception:
                        log.exception("scheduler tick failed")

        self._tick_thread = threading.Thread(target=loop, daemon=True)
        self._tick_thread.start()

    def shutdown(self) -> None:
        self._stop.set()
        if self._tick_thread is not None:
            self._tick_thread.join(timeout=5)


def _post_webhook(url: str, doc: dict) -> None:
    """Fire-and-forget: delivery must not stall the scheduler event stream."""

    def deliver() -> None:
        try:
            httpx.post(url, content=canonical_bytes(doc), timeout=2.0,
                       headers={"content-type": "application/json"})
        except httpx.HTTPError as exc:
            log.warning("webhook %s failed: %s", url, exc)

    threading.Thread(target=deliver, daemon=True).start()


def _json(doc, status: int = 200) -> Response:
    return Response(content=canonical_bytes(doc), status_code=status, media_type="application/json")


async def _body(request: Request) -> dict:
    raw = await request.body()
    if not raw:
        return {}
    try:
        doc = canonical_loads(raw)
    except ValueError as exc:
        raise ApiError(400, "bad_request", f"request body is not valid JSON: {exc}")
    if not isinstance(doc, dict):
        raise ApiError(400, "bad_request", "request body must be a JSON object")
    return doc


def _parse_ref(kind: str, text: str) -> ObjectRef:
    try:
        return ObjectRef.parse(kind, text)
    except ModelError as exc:
        raise ApiError(400, "bad_request", str(exc))


def create_app(platform: Platform, frontend_dir: str | Path | None = None) -> FastAPI:
    app = FastAPI(title="beatbox", docs_url=None, redoc_url=None, openapi_url=None)
    store = platform.store
    access = platform.access

    @app.exception_handler(ApiError)
    async def handle_api_error(request: Request, exc: ApiError):
        return _json({"code": exc.code, "message": str(exc), "details": exc.details}, exc.status)

    def principal_of(request: Request, *, required: bool = True) -> Principal:
        header = request.headers.get("authorization", "")
        if header.startswith("Bearer "):
            principal = platform.authenticate(header[len("Bearer "):].strip())
            if principal is not None:
                return principal
        if required:
            raise ApiError(401, "unauthorized", "missing or invalid API token")
        return Principal(name="", is_admin=False)

    def admin_of(request: Request) -> Principal:
        principal = principal_of(request)
        if not principal.is_admin:
            raise ApiError(403, "forbidden", "administrator token required")
        return principal

    # -- idempotency -----------------------------------------------------

    def idempotent(request: Request, principal: Principal, handler):
        key = request.headers.get("idempotency-key")
        if not key:
            return handler()
        digest = hashlib.sha256(f"{principal.name}:{key}".encode()).hexdigest()
        path = f"idempotency/{digest}.json"
        stored = store.read(path)
        if stored is not None:
            return _json(stored["body"], stored["status"])

        def remember(status: int, body: dict):
            try:
                store.commit([Write(path=path, expected=None, doc={"status": status, "body": body})])
            except StoreConflict:
                pass  # concurrent retry already recorded the first response

        try:
            response = handler()
        except ApiError as exc:
            remember(exc.status, {"code": exc.code, "message": str(exc), "details": exc.details})
            raise
        try:
            body = canonical_loads(response.body)
        except ValueError:
            body = {}
        remember(response.status_code, body)
        stored = store.read(path)
        if stored is not None:
            return _json(stored["body"], stored["status"])
        return response

    # -- health ------------------------------------------------------------

    @app.get("/api/v1/health")
    async def health():
        return _json({"status": "ok"})

    # -- configurator choices ---------------------------------------------

    @app.get("/api/v1/choices")
    async def choices(request: Request, toolchain: str, partial: str = "{}"):
        principal = principal_of(request)
        tc_ref = _parse_ref("toolchain", toolchain)
        tc_doc = store.read(object_path(tc_ref))
        if tc_doc is None or not access.can_view(principal, tc_doc):
            raise ApiError(404, "not_found", f"unknown toolchain {toolchain}")
        tc = ToolchainSpec.from_doc(tc_ref, tc_doc["spec"])
        try:
            partial_doc = canonical_loads(partial)
            assignments = {b: assignment_from_doc(a) for b, a in partial_doc.items()}
        except (ValueError, ModelError) as exc:
            raise ApiError(400, "bad_request", f"malformed partial assignment: {exc}")
        from .validation import resolve_choices

        catalog = VisibleCatalog(store, access, principal)
        try:
            choices_map = resolve_choices(tc, assignments, catalog)
        except Exception as exc:
            raise ApiError(400, "bad_request", str(exc))
        return _json({"choices": {b: [r.render() for r in refs] for b, refs in choices_map.items()}})

    # -- worker protocol -----------------------------------------------------

    @app.post("/api/v1/worker/register")
    async def worker_register(request: Request):
        admin_of(request)
        doc = await _body(request)
        with platform.scheduler_lock:
            try:
                worker = platform.scheduler.register_worker(doc)
            except SchedulerError as exc:
                raise _from_domain_error(exc)
        return _json({"registered": worker.id})

    def _str_field(doc: dict, key: str) -> str:
        value = doc.get(key, "")
        if not isinstance(value, str):
            raise ApiError(400, "bad_request", f"field {key!r} must be a string")
        return value

    @app.post("/api/v1/worker/heartbeat")
    async def worker_heartbeat(request: Request):
        admin_of(request)
        doc = await _body(request)
        with platform.scheduler_lock:
            try:
                platform.scheduler.heartbeat(_str_field(doc, "worker"))
            except SchedulerError as exc:
                raise _from_domain_error(exc)
        return _json({"status": "ok"})

    @app.post("/api/v1/worker/poll")
    async def worker_poll(request: Request):
        admin_of(request)
        doc = await _body(request)
        worker_id = _str_field(doc, "worker")
        deadline = time.monotonic() + 1.0
        while True:
            with platform.scheduler_lock:
                try:
                    platform.scheduler.tick()
                    payload = platform.scheduler.poll_worker(worker_id)
                except SchedulerError as exc:
                    raise _from_domain_error(exc)
            if payload["jobs"] or payload["cancel"] or time.monotonic() > deadline:
                return _json(payload)
            await asyncio.sleep(0.05)

    @app.post("/api/v1/worker/result")
    async def worker_result(request: Request):
        admin_of(request)
        doc = await _body(request)
        run_id = _str_field(doc, "run")
        job_id = _str_field(doc, "job")
        result = doc.get("result", {})
        if not isinstance(result, dict):
            raise ApiError(400, "bad_request", "field 'result' must be an object")
        with platform.scheduler_lock:
            platform.scheduler.report_result(run_id, job_id, result)
        return _json({"status": "ok"})

    # -- queues and workers -------------------------------------------------

    @app.get("/api/v1/queues")
    async def queues(request: Request):
        principal_of(request)
        return _json({"queues": [q.to_doc() for _, q in sorted(platform.config.queues.items())]})

    @app.get("/api/v1/workers")
    async def workers(request: Request):
        principal_of(request)
        with platform.scheduler_lock:
            summary = platform.scheduler.worker_summary()
        return _json({"workers": summary})

    @app.post("/api/v1/workers/{worker_id}/disable")
    async def disable_worker(request: Request, worker_id: str):
        admin_of(request)
        with platform.scheduler_lock:
            try:
                platform.scheduler.set_worker_state(worker_id, "disabled")
            except SchedulerError as exc:
                raise _from_domain_error(exc)
        return _json({"worker": worker_id, "state": "disabled"})

    @app.post("/api/v1/workers/{worker_id}/enable")
    async def enable_worker(request: Request, worker_id: str):
        admin_of(request)
        with platform.scheduler_lock:
            try:
                platform.scheduler.set_worker_state(worker_id, "active")
            except SchedulerError as exc:
                raise _from_domain_error(exc)
        return _json({"worker": worker_id, "state": "active"})

    # -- notifications -------------------------------------------------------

    @app.get("/api/v1/notifications")
    async def notifications(request: Request):
        principal = principal_of(request)
        entries = [
            e
            for e in read_log(platform.notifications_log)
            if principal.is_admin or principal.name in e.get("recipients", [])
        ]
        return _json({"notifications": entries})

    # -- attestations ---------------------------------------------------------

    @app.get("/api/v1/attestations/{number}")
    async def get_attestation(number: str):
        doc = store.read(f"objects/attestation/{number}.json")
        if doc is None:
            raise ApiError(404, "not_found", f"no attestation numbered {number}")
        return _json(doc)

    # -- experiment actions ----------------------------------------------------

    def _load_envelope(kind: str, ref_text: str, principal: Principal) -> tuple[ObjectRef, dict]:
        ref = _parse_ref(kind, ref_text)
        doc = store.read(object_path(ref))
        if doc is None or not access.can_view(principal, doc):
            raise ApiError(404, "not_found", f"unknown {kind} {ref_text}")
        return ref, doc

    def _check_assignment_access(principal: Principal, exp: ExperimentSpec) -> None:
        """Starting (or saving) an experiment requires execute rights on every
        assigned algorithm and database, not just on the experiment itself."""
        tc_doc = store.read(object_path(exp.toolchain))
        if tc_doc is not None and not access.can_view(principal, tc_doc):
            raise ApiError(403, "forbidden", f"you may not use toolchain {exp.toolchain.render()}")
        for assignment in exp.assignments.values():
            used = (
                assignment.database
                if isinstance(assignment, DatasetAssignment)
                else assignment.algorithm
            )
            doc = store.read(object_path(used))
            if doc is not None and not access.can_execute(principal, doc):
                raise ApiError(403, "forbidden", f"you may not use {used.kind} {used.render()}")

    def _queue_allowed(principal: Principal, queue_name: str) -> bool:
        queue = platform.config.queues.get(queue_name)
        if queue is None or not queue.principals:
            return queue is not None
        if principal.name in queue.principals or principal.is_admin:
            return True
        for team_text in queue.principals:
            try:
                team_ref = ObjectRef.parse("team", team_text)
            except ModelError:
                continue
            team_doc = store.read(object_path(team_ref))
            if team_doc and principal.name in team_doc["spec"].get("members", []):
                return True
        return False

    @app.post("/api/v1/experiments/{ref_text:path}/start")
    async def start_experiment(request: Request, ref_text: str):
        principal = principal_of(request)

        def handler():
            ref, doc = _load_envelope("experiment", ref_text, principal)
            if not access.can_execute(principal, doc):
                raise ApiError(403, "forbidden", "you may not execute this experiment")
            exp = ExperimentSpec.from_doc(ref, doc["spec"])
            _check_assignment_access(principal, exp)
            for block in exp.assignments:
                queue_name = exp.placement(block).queue
                if not _queue_allowed(principal, queue_name):
                    raise ApiError(403, "forbidden", f"queue {queue_name!r} is not open to you")
            report = validate_experiment(
                exp, platform.catalog, queues=set(platform.config.queues),
                environments=set(platform.config.environments),
            )
            if not report.ok:
                raise ApiError(400, "bad_request", "experiment does not validate",
                               details=report.to_doc())
            with platform.scheduler_lock:
                try:
                    run = platform.scheduler.plan_experiment(exp, platform.catalog)
                except SchedulerError as exc:
                    raise _from_domain_error(exc)
                return _json({"run": run.id, "state": run.state, "jobs": run.job_states()})

        return idempotent(request, principal, handler)

    @app.post("/api/v1/experiments/{ref_text:path}/cancel")
    async def cancel_experiment(request: Request, ref_text: str):
        principal = principal_of(request)

        def handler():
            ref, doc = _load_envelope("experiment", ref_text, principal)
            if doc["owner"] != principal.name and not principal.is_admin:
                raise ApiError(403, "forbidden", "only the owner may cancel runs")
            with platform.scheduler_lock:
                run = platform.scheduler.latest_run(ref.render())
                if run is None:
                    raise ApiError(404, "not_found", "experiment has no runs")
                try:
                    platform.scheduler.cancel_run(run.id)
                except SchedulerError as exc:
                    raise _from_domain_error(exc)
                return _json({"run": run.id, "state": run.state, "jobs": run.job_states()})

        return idempotent(request, principal, handler)

    @app.get("/api/v1/experiments/{ref_text:path}/status")
    async def experiment_status(request: Request, ref_text: str, run: str | None = None):
        principal = principal_of(request)
        ref, _doc = _load_envelope("experiment", ref_text, principal)
        with platform.scheduler_lock:
            if run is not None:
                state = platform.scheduler.runs.get(run)
                if state is None or state.experiment != ref.render():
                    raise ApiError(404, "not_found", f"unknown run {run}")
            else:
                state = platform.scheduler.latest_run(ref.render())
            if state is None:
                return _json({"experiment": ref.render(), "run": None, "state": "never-run", "jobs": {}})
            failures = {
                j.id: j.failure for j in state.jobs.values() if j.failure is not None
            }
            return _json(
                {
                    "experiment": ref.render(),
                    "run": state.id,
                    "state": state.state,
                    "jobs": state.job_states(),
                    "failures": failures,
                }
            )

    @app.get("/api/v1/experiments/{ref_text:path}/results")
    async def experiment_results(request: Request, ref_text: str):
        principal = principal_of(request)
        ref, _doc = _load_envelope("experiment", ref_text, principal)
        results_doc = store.read(results_path(ref))
        if results_doc is None:
            raise ApiError(404, "not_found", "experiment has not completed")
        # Exportable content only: analyzer results, stats, digests.
        return _json(
            {
                "experiment": results_doc["experiment"],
                "run": results_doc["run"],
                "state": results_doc["state"],
                "completed_at": results_doc["completed_at"],
                "results": results_doc["results"],
                "stats": results_doc["stats"],
                "result_digest": results_doc.get("result_digest", ""),
                "attestations": attested_numbers(store, ref),
            }
        )

    @app.post("/api/v1/experiments/{ref_text:path}/attest")
    async def attest_experiment(request: Request, ref_text: str):
        principal = principal_of(request)
        body = await _body(request)
        code_access = body.get("code_access", {})
        if not isinstance(code_access, dict) or not all(
            isinstance(k, str) and v in ("open", "executable-only") for k, v in code_access.items()
        ):
            raise ApiError(400, "bad_request", "code_access must map algorithm refs to open/executable-only")

        def handler():
            ref = _parse_ref("experiment", ref_text)
            try:
                attestation = attest(store, principal, ref, code_access=code_access)
            except (GovernanceError, FrozenViolation) as exc:
                raise _from_domain_error(exc)
            return _json(attestation.to_doc(), 201)

        return idempotent(request, principal, handler)

    # -- searches ----------------------------------------------------------

    @app.post("/api/v1/searches/{ref_text:path}/run")
    async def run_stored_search(request: Request, ref_text: str):
        principal = principal_of(request)
        ref, doc = _load_envelope("search", ref_text, principal)
        try:
            result = run_search(store, access, principal, doc["spec"])
        except SearchError as exc:
            raise _from_domain_error(exc)
        return _json({"query": ref.render(), **result})

    # -- reports -------------------------------------------------------------

    @app.post("/api/v1/reports/{number}/lock")
    async def lock_report_endpoint(request: Request, number: str):
        principal = principal_of(request)

        def handler():
            try:
                doc = lock_report(store, principal, number)
            except (SearchError, GovernanceError) as exc:
                raise _from_domain_error(exc)
            return _json(_redact(doc, principal))

        return idempotent(request, principal, handler)

    # -- version forking -----------------------------------------------------

    @app.post("/api/v1/{collection}/{ref_text:path}/fork")
    async def fork_object(request: Request, collection: str, ref_text: str):
        kind = COLLECTIONS.get(collection)
        if kind is None:
            raise ApiError(404, "not_found", f"unknown collection {collection!r}")
        principal = principal_of(request)

        def handler():
            from .governance import fork_version

            ref = _parse_ref(kind, ref_text)
            try:
                new_ref = fork_version(store, principal, ref)
            except (GovernanceError, FrozenViolation) as exc:
                raise _from_domain_error(exc)
            doc = store.read(object_path(new_ref))
            return _json(_redact(doc, principal), 201)

        return idempotent(request, principal, handler)

    # -- object CRUD ---------------------------------------------------------

    def _validate_spec(kind: str, ref: ObjectRef, spec: dict, principal: Principal | None = None) -> None:
        try:
            obj = parse_object(kind, ref, spec) if kind in (
                "format", "algorithm", "database", "toolchain", "experiment"
            ) else None
        except ModelError as exc:
            raise ApiError(400, "bad_request", f"malformed {kind} document: {exc}")
        if kind == "format":
            report = validate_format(obj, platform.catalog)
            if not report.ok:
                raise ApiError(400, "bad_request", "format does not validate", details=report.to_doc())
        elif kind == "algorithm":
            for fmt_ref in list(obj.inputs.values()) + list(obj.outputs.values()):
                if not isinstance(platform.catalog.get(fmt_ref), DataFormat):
                    raise ApiError(400, "bad_request", f"unresolved format {fmt_ref.render()}")
        elif kind == "database":
            for protocol in obj.protocols:
                for set_spec in protocol.sets:
                    for fmt_ref in set_spec.view.outputs.values():
                        if not isinstance(platform.catalog.get(fmt_ref), DataFormat):
                            raise ApiError(400, "bad_request", f"unresolved format {fmt_ref.render()}")
        elif kind == "toolchain":
            report = validate_toolchain(obj)
            if not report.ok:
                raise ApiError(400, "bad_request", "toolchain does not validate", details=report.to_doc())
        elif kind == "experiment":
            report = validate_experiment(
                obj, platform.catalog, queues=set(platform.config.queues),
                environments=set(platform.config.environments),
            )
            if not report.ok:
                raise ApiError(400, "bad_request", "experiment does not validate", details=report.to_doc())
            if principal is not None:
                _check_assignment_access(principal, obj)
        elif kind == "search":
            try:
                validate_search_spec(spec)
            except SearchError as exc:
                raise _from_domain_error(exc)
        elif kind == "team":
            members = spec.get("members")
            if not isinstance(members, list) or not all(isinstance(m, str) for m in members):
                raise ApiError(400, "bad_request", "team spec requires a members list")

    def _redact(doc: dict, principal: Principal) -> dict:
        out = {**doc, "digest": canonical_digest(doc)}
        spec = dict(doc["spec"])
        if doc["kind"] == "algorithm" and not access.can_view_source(principal, doc):
            spec.pop("source", None)
            spec["source_access"] = "executable-only"
        if doc["kind"] == "database" and not (
            principal.is_admin or principal.name == doc["owner"]
        ):
            protocols = []
            for protocol in spec.get("protocols", []):
                sets = []
                for set_spec in protocol.get("sets", []):
                    view = {k: v for k, v in set_spec.get("view", {}).items() if k != "loader"}
                    sets.append({**set_spec, "view": view})
                protocols.append({**protocol, "sets": sets})
            spec["protocols"] = protocols
        out["spec"] = spec
        out["attestations"] = (
            attested_numbers(store, envelope_ref(doc)) if doc["kind"] == "experiment" else []
        )
        return out

    @app.get("/api/v1/{collection}/{ref_text:path}")
    async def get_object(request: Request, collection: str, ref_text: str):
        kind = COLLECTIONS.get(collection)
        if kind is None:
            raise ApiError(404, "not_found", f"unknown collection {collection!r}")
        if kind == "report" and ref_text.isdigit() and len(ref_text) == 9:
            doc = report_by_number(store, ref_text)
            if doc is None:
                raise ApiError(404, "not_found", f"no report numbered {ref_text}")
            if doc["spec"].get("locked"):
                return _json(_redact(doc, Principal("")))  # anonymous peer review
            principal = principal_of(request)
            if not access.can_view(principal, doc):
                raise ApiError(404, "not_found", f"no report numbered {ref_text}")
            return _json(_redact(doc, principal))
        principal = principal_of(request)
        ref, doc = _load_envelope(kind, ref_text, principal)
        return _json(_redact(doc, principal))

    @app.get("/api/v1/{collection}")
    async def list_objects(request: Request, collection: str):
        kind = COLLECTIONS.get(collection)
        if kind is None:
            raise ApiError(404, "not_found", f"unknown collection {collection!r}")
        principal = principal_of(request)
        rows = []
        for path in store.list(f"objects/{kind}"):
            doc = store.read(path)
            if doc is None or not access.can_view(principal, doc):
                continue
            rows.append(
                {
                    "ref": envelope_ref(doc).render(),
                    "kind": kind,
                    "owner": doc["owner"],
                    "frozen": doc["frozen"],
                    "level": doc["policy"]["level"],
                }
            )
        return _json({"objects": rows})

    @app.post("/api/v1/{collection}")
    async def create_object(request: Request, collection: str):
        kind = COLLECTIONS.get(collection)
        if kind is None:
            raise ApiError(404, "not_found", f"unknown collection {collection!r}")
        principal = principal_of(request)
        body = await _body(request)

        def handler():
            owner = body.get("owner", principal.name)
            if owner != principal.name and not principal.is_admin:
                raise ApiError(403, "forbidden", "cannot create objects for another user")
            if kind == "database" and not principal.is_admin:
                raise ApiError(403, "forbidden", "databases are installed by administrators")
            try:
                ref = ObjectRef(kind=kind, owner=owner, name=body.get("name", ""), version=int(body.get("version", 1)))
            except (ModelError, ValueError, TypeError) as exc:
                raise ApiError(400, "bad_request", f"bad object address: {exc}")
            spec = body.get("spec", {})
            if not isinstance(spec, dict):
                raise ApiError(400, "bad_request", "field 'spec' must be an object")
            if kind == "team":
                raw_members = spec.get("members", [])
                if not isinstance(raw_members, list) or not all(isinstance(m, str) for m in raw_members):
                    raise ApiError(400, "bad_request", "team spec requires a members list")
                spec = {**spec, "members": sorted(set(raw_members) | {owner})}
            if kind == "report":
                rng = random.SystemRandom()
                number = None
                for _ in range(100):
                    candidate = "".join(rng.choices("0123456789", k=9))
                    if report_by_number(store, candidate) is None:
                        number = candidate
                        break
                try:
                    doc = create_report(store, principal, ref, spec, number=number)
                except (SearchError, GovernanceError) as exc:
                    raise _from_domain_error(exc)
                except StoreConflict:
                    raise ApiError(409, "conflict", f"{ref.render()} already exists")
                return _json(_redact(doc, principal), 201)
            _validate_spec(kind, ref, spec, principal)
            doc = envelope(ref, spec, author=principal.name, created_at=time.time())
            if "policy" in body:
                from .governance import validate_policy

                try:
                    doc["policy"] = validate_policy(body["policy"])
                except GovernanceError as exc:
                    raise _from_domain_error(exc)
            try:
                store.commit([Write(path=object_path(ref), expected=None, doc=doc)])
            except StoreConflict:
                raise ApiError(409, "conflict", f"{ref.render()} already exists")
            return _json(_redact(doc, principal), 201)

        return idempotent(request, principal, handler)

    @app.put("/api/v1/{collection}/{ref_text:path}")
    async def update_object(request: Request, collection: str, ref_text: str):
        kind = COLLECTIONS.get(collection)
        if kind is None:
            raise ApiError(404, "not_found", f"unknown collection {collection!r}")
        principal = principal_of(request)
        body = await _body(request)

        def handler():
            ref, doc = _load_envelope(kind, ref_text, principal)
            if doc["owner"] != principal.name and not principal.is_admin:
                raise ApiError(403, "forbidden", "only the owner may modify this object")
            new_spec = body.get("spec", doc["spec"])
            if not isinstance(new_spec, dict):
                raise ApiError(400, "bad_request", "field 'spec' must be an object")
            if new_spec != doc["spec"]:
                _validate_spec(kind, ref, new_spec, principal)
            updated = {**doc, "spec": new_spec}
            if "policy" in body:
                from .governance import validate_policy

                try:
                    updated["policy"] = validate_policy(body["policy"])
                except GovernanceError as exc:
                    raise _from_domain_error(exc)
            expected = body.get("expected", canonical_digest(doc))
            try:
                store.commit([Write(path=object_path(ref), expected=expected, doc=updated)])
            except FrozenViolation as exc:
                raise _from_domain_error(exc)
            except StoreConflict as exc:
                raise ApiError(409, "conflict", str(exc))
            return _json(_redact(updated, principal))

        return idempotent(request, principal, handler)

    @app.delete("/api/v1/{collection}/{ref_text:path}")
    async def delete_object(request: Request, collection: str, ref_text: str):
        kind = COLLECTIONS.get(collection)
        if kind is None:
            raise ApiError(404, "not_found", f"unknown collection {collection!r}")
        principal = principal_of(request)

        def handler():
            ref, doc = _load_envelope(kind, ref_text, principal)
            if doc["owner"] != principal.name and not principal.is_admin:
                raise ApiError(403, "forbidden", "only the owner may delete this object")
            try:
                store.commit([Write(path=object_path(ref), expected=canonical_digest(doc), doc=None)])
            except FrozenViolation as exc:
                raise _from_domain_error(exc)
            except StoreConflict as exc:
                raise ApiError(409, "conflict", str(exc))
            return _json({"deleted": ref.render()})

        return idempotent(request, principal, handler)

    if frontend_dir is not None and Path(frontend_dir).is_dir():
        app.mount("/", StaticFiles(directory=str(frontend_dir), html=True), name="ui")

    return app


def serve(
    data_dir: str | Path,
    *,
    port: int | None = None,
    host: str = "127.0.0.1",
    frontend_dir: str | Path | None = None,
) -> None:  # pragma: no cover - exercised via end-to-end tests
    import uvicorn

    from .store import CorruptStoreError

    platform = Platform(data_dir)
    try:
        platform.verify_store()
    except CorruptStoreError as exc:
        raise SystemExit(
            f"refusing to start: {exc}\n"
            "recovery hint: restore the damaged document from backup, or delete "
            "the file and push the object again; the scheduler journal and cache "
            "are unaffected"
        )
    app = create_app(platform, frontend_dir=frontend_dir)
    platform.start_background()
    try:
        uvicorn.run(app, host=host, port=port or platform.config.port, log_level="warning")
    finally:
        platform.shutdown()
