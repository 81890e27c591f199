"""Operator and user command line client.

Exit codes: 0 success, 1 user error (validation, permission, not found),
2 server or connection error.
"""
from __future__ import annotations

import os
import sys
import time
from pathlib import Path

import click
import httpx

from .canonical import canonical_dumps, canonical_loads
from .config import DATA_DIR_ENV, TOKEN_ENV, URL_ENV, load_config, save_config
from .model import ModelError, ObjectRef, parse_object
from .runner import ResourceLimits
from .scheduler import Queue

USER_ERROR = 1
SERVER_ERROR = 2

COLLECTION_OF = {
    "format": "formats",
    "algorithm": "algorithms",
    "toolchain": "toolchains",
    "database": "databases",
    "experiment": "experiments",
    "search": "searches",
    "report": "reports",
    "team": "teams",
}


class Client:
    def __init__(self, url: str | None, token: str | None) -> None:
        self.base = (url or os.environ.get(URL_ENV) or "http://127.0.0.1:7700").rstrip("/")
        self.token = token or os.environ.get(TOKEN_ENV, "")
        headers = {}
        if self.token:
            headers["Authorization"] = f"Bearer {self.token}"
        self.http = httpx.Client(headers=headers, timeout=30.0)

    def request(self, method: str, path: str, body: dict | None = None, params: dict | None = None) -> dict:
        try:
            response = self.http.request(
                method,
                f"{self.base}{path}",
                content=canonical_dumps(body).encode() if body is not None else None,
                headers={"content-type": "application/json"} if body is not None else None,
                params=params,
            )
        except httpx.HTTPError as exc:
            click.echo(f"error: cannot reach server at {self.base}: {exc}", err=True)
            sys.exit(SERVER_ERROR)
        if response.status_code >= 500:
            click.echo(f"error: server failure {response.status_code}: {response.text}", err=True)
            sys.exit(SERVER_ERROR)
        if response.status_code >= 400:
            try:
                doc = response.json()
                message = doc.get("message", response.text)
            except ValueError:
                message = response.text
            click.echo(f"error: {message}", err=True)
            sys.exit(USER_ERROR)
        return response.json() if response.content else {}


def _emit(doc: dict, as_json: bool, human) -> None:
    if as_json:
        click.echo(canonical_dumps(doc))
    else:
        human(doc)


def _load_document(path: str) -> dict:
    try:
        return canonical_loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        click.echo(f"error: no such file {path}", err=True)
        sys.exit(USER_ERROR)
    except ValueError as exc:
        click.echo(f"error: {path} is not valid JSON: {exc}", err=True)
        sys.exit(USER_ERROR)


@click.group()
@click.option("--url", default=None, help=f"server URL (default ${URL_ENV})")
@click.option("--token", default=None, help=f"API token (default ${TOKEN_ENV})")
@click.pass_context
def main(ctx, url, token):
    """Reproducible-experiment platform client."""
    ctx.obj = {"url": url, "token": token}


def client_of(ctx) -> Client:
    return Client(ctx.obj["url"], ctx.obj["token"])


@main.command()
@click.option("--data-dir", default=None, help=f"data directory (default ${DATA_DIR_ENV})")
@click.option("--port", type=int, default=None)
@click.option("--host", default="127.0.0.1")
@click.option("--ui-dir", default=None, help="static UI bundle to serve at /")
def serve(data_dir, port, host, ui_dir):
    """Run the platform service (API, scheduler, store)."""
    from .config import data_dir_from_env
    from .service import serve as run_service

    directory = data_dir_from_env(data_dir)
    ui = ui_dir or (Path("frontend/dist") if Path("frontend/dist").is_dir() else None)
    run_service(directory, port=port, host=host, frontend_dir=ui)


@main.command()
@click.option("--queue", "queues", multiple=True, default=("default",), help="queues to serve")
@click.option("--data-dir", default=None)
@click.option("--id", "worker_id", default=None)
@click.option("--cores", type=int, default=None)
@click.pass_context
def worker(ctx, queues, data_dir, worker_id, cores):
    """Run a worker node serving the given queues."""
    from .config import data_dir_from_env
    from .worker import Worker

    client = client_of(ctx)
    Worker(
        url=client.base,
        token=client.token,
        data_dir=str(data_dir_from_env(data_dir)),
        worker_id=worker_id,
        queues=list(queues),
        cores=cores,
    ).run_forever()


@main.group()
def user():
    """User administration (local, against the data directory)."""


@user.command("add")
@click.argument("name")
@click.option("--admin", is_flag=True, default=False)
@click.option("--data-dir", default=None)
def user_add(name, admin, data_dir):
    """Create a user and print a fresh API token."""
    from .config import data_dir_from_env
    from .service import Platform

    platform = Platform(data_dir_from_env(data_dir))
    token = platform.create_user(name, admin=admin)
    click.echo(token)


@main.command()
@click.argument("kind")
@click.argument("file", type=click.Path())
@click.pass_context
def push(ctx, kind, file):
    """Upload an object document: {name, version, spec[, policy]}."""
    singular = kind if kind in COLLECTION_OF else kind.rstrip("s")
    collection = COLLECTION_OF.get(singular)
    if collection is None:
        click.echo(f"error: unknown kind {kind!r}", err=True)
        sys.exit(USER_ERROR)
    body = _load_document(file)
    doc = client_of(ctx).request("POST", f"/api/v1/{collection}", body=body)
    click.echo(f"pushed {doc.get('kind', kind)} {doc.get('owner')}/{doc.get('name')}/{doc.get('version')}")


class RemoteCatalog:
    """Catalog backed by API reads, for client-side validation."""

    def __init__(self, client: Client) -> None:
        self.client = client
        self._cache: dict[str, object] = {}

    def get(self, ref: ObjectRef):
        rendered = f"{ref.kind}:{ref.render()}"
        if rendered in self._cache:
            return self._cache[rendered]
        try:
            response = self.client.http.get(
                f"{self.client.base}/api/v1/{COLLECTION_OF[ref.kind]}/{ref.render()}"
            )
        except httpx.HTTPError as exc:
            click.echo(f"error: cannot reach server: {exc}", err=True)
            sys.exit(SERVER_ERROR)
        if response.status_code != 200:
            self._cache[rendered] = None
            return None
        obj = parse_object(ref.kind, ref, response.json()["spec"])
        self._cache[rendered] = obj
        return obj

    def list(self, kind: str) -> list[ObjectRef]:
        doc = self.client.request("GET", f"/api/v1/{COLLECTION_OF[kind]}")
        return [ObjectRef.parse(kind, row["ref"]) for row in doc["objects"]]


@main.command()
@click.argument("kind")
@click.argument("file", type=click.Path())
@click.option("--json", "as_json", is_flag=True, default=False)
@click.pass_context
def validate(ctx, kind, file, as_json):
    """Validate an object document against the server catalog."""
    from .validation import validate_format, validate_toolchain, validate_experiment

    kind = kind.rstrip("s") if kind not in COLLECTION_OF and kind.rstrip("s") in COLLECTION_OF else kind
    if kind not in COLLECTION_OF:
        click.echo(f"error: unknown kind {kind!r}", err=True)
        sys.exit(USER_ERROR)
    body = _load_document(file)
    try:
        ref = ObjectRef(
            kind=kind,
            owner=body.get("owner", "me"),
            name=body.get("name", ""),
            version=int(body.get("version", 1)),
        )
        obj = parse_object(kind, ref, body.get("spec", {}))
    except (ModelError, ValueError) as exc:
        click.echo(f"invalid: {exc}", err=True)
        sys.exit(USER_ERROR)
    catalog = RemoteCatalog(client_of(ctx))
    if kind == "format":
        report = validate_format(obj, catalog)
    elif kind == "toolchain":
        report = validate_toolchain(obj)
    elif kind == "experiment":
        report = validate_experiment(obj, catalog)
    elif kind in ("algorithm", "database"):
        report = _validate_format_refs(kind, obj, catalog)
    else:
        report = None
    if report is None:
        _emit({"ok": True, "issues": []}, as_json, lambda d: click.echo("ok (structural check only)"))
        return
    doc = report.to_doc()
    if as_json:
        click.echo(canonical_dumps(doc))
    else:
        for issue in doc["issues"]:
            click.echo(f"{issue['severity']}: {issue['path']}: {issue['message']}")
        click.echo("ok" if doc["ok"] else "invalid")
    if not doc["ok"]:
        sys.exit(USER_ERROR)


def _validate_format_refs(kind, obj, catalog):
    """Algorithm/database check: every referenced format must resolve."""
    from beatbox.model import DataFormat
    from beatbox.validation import Issue, ValidationReport

    if kind == "algorithm":
        referenced = {ep: ref for ep, ref in {**obj.inputs, **obj.outputs}.items()}
    else:
        referenced = {
            f"{p.name}/{s.name}/{ch}": ref
            for p in obj.protocols
            for s in p.sets
            for ch, ref in s.view.outputs.items()
        }
    issues = tuple(
        Issue("error", where, f"unresolved format {ref.render()}")
        for where, ref in sorted(referenced.items())
        if not isinstance(catalog.get(ref), DataFormat)
    )
    return ValidationReport(issues=issues)


@main.command()
@click.argument("experiment_ref")
@click.option("--watch", is_flag=True, default=False)
@click.option("--json", "as_json", is_flag=True, default=False)
@click.pass_context
def run(ctx, experiment_ref, watch, as_json):
    """Start an experiment; with --watch, follow it to completion."""
    client = client_of(ctx)
    doc = client.request("POST", f"/api/v1/experiments/{experiment_ref}/start")
    run_id = doc["run"]
    if not watch:
        _emit(doc, as_json, lambda d: click.echo(f"run {d['run']} {d['state']}"))
        return
    last = None
    while True:
        status = client.request(
            "GET", f"/api/v1/experiments/{experiment_ref}/status", params={"run": run_id}
        )
        snapshot = (status["state"], tuple(sorted(status["jobs"].items())))
        if snapshot != last:
            if as_json:
                click.echo(canonical_dumps(status))
            else:
                jobs = ", ".join(f"{j.rsplit('/', 1)[1]}={s}" for j, s in sorted(status["jobs"].items()))
                click.echo(f"{status['state']}: {jobs}")
            last = snapshot
        if status["state"] in ("done", "failed", "cancelled"):
            sys.exit(0 if status["state"] == "done" else USER_ERROR)
        time.sleep(0.5)


@main.command()
@click.argument("run_id")
@click.option("--json", "as_json", is_flag=True, default=False)
@click.pass_context
def status(ctx, run_id, as_json):
    """Show the job states of a run (id looks like owner/name/version#n)."""
    experiment_ref = run_id.split("#", 1)[0]
    params = {"run": run_id} if "#" in run_id else None
    doc = client_of(ctx).request(
        "GET", f"/api/v1/experiments/{experiment_ref}/status", params=params
    )

    def human(d):
        click.echo(f"run {d['run']} state {d['state']}")
        for job, state in sorted(d["jobs"].items()):
            click.echo(f"  {job.rsplit('/', 1)[1]:20s} {state}")

    _emit(doc, as_json, human)


@main.command()
@click.argument("experiment_ref")
@click.option("--json", "as_json", is_flag=True, default=False)
@click.pass_context
def results(ctx, experiment_ref, as_json):
    """Fetch analyzer results of a completed experiment."""
    doc = client_of(ctx).request("GET", f"/api/v1/experiments/{experiment_ref}/results")

    def human(d):
        click.echo(f"experiment {d['experiment']} run {d['run']} ({d['state']})")
        for block, block_results in sorted(d["results"].items()):
            for name, payload in sorted(block_results.items()):
                click.echo(f"  {block}.{name} = {payload['value']} ({payload['kind']})")

    _emit(doc, as_json, human)


@main.command()
@click.argument("kind")
@click.argument("object_ref")
@click.option("--json", "as_json", is_flag=True, default=False)
@click.pass_context
def fork(ctx, kind, object_ref, as_json):
    """Copy an object into a fresh editable version with recorded lineage."""
    singular = kind if kind in COLLECTION_OF else kind.rstrip("s")
    collection = COLLECTION_OF.get(singular)
    if collection is None:
        click.echo(f"error: unknown kind {kind!r}", err=True)
        sys.exit(USER_ERROR)
    doc = client_of(ctx).request("POST", f"/api/v1/{collection}/{object_ref}/fork")
    _emit(
        doc,
        as_json,
        lambda d: click.echo(f"forked to {d['owner']}/{d['name']}/{d['version']}"),
    )


@main.command()
@click.argument("experiment_ref")
@click.option("--open", "open_algorithms", multiple=True, help="algorithm refs to publish as open source")
@click.option("--json", "as_json", is_flag=True, default=False)
@click.pass_context
def attest(ctx, experiment_ref, open_algorithms, as_json):
    """Freeze a completed experiment and mint an attestation number."""
    body = {"code_access": {ref: "open" for ref in open_algorithms}}
    doc = client_of(ctx).request("POST", f"/api/v1/experiments/{experiment_ref}/attest", body=body)
    _emit(doc, as_json, lambda d: click.echo(f"attestation {d['number']}"))


@main.group()
def search():
    """Stored searches."""


@search.command("run")
@click.argument("query_ref")
@click.option("--json", "as_json", is_flag=True, default=False)
@click.pass_context
def search_run(ctx, query_ref, as_json):
    """Run a stored search and print the comparison table."""
    doc = client_of(ctx).request("POST", f"/api/v1/searches/{query_ref}/run")

    def human(d):
        for row in d["rows"]:
            values = " ".join(f"{k}={v}" for k, v in sorted(row["values"].items()))
            attested = f" [attested {row['attestation']}]" if row.get("attestation") else ""
            click.echo(f"{row['experiment']} ({row['owner']}) {values}{attested}")
        if not d["rows"]:
            click.echo("no matching experiments")

    _emit(doc, as_json, human)


@main.group()
def report():
    """Reports over attested experiments."""


@report.command("lock")
@click.argument("number")
@click.option("--json", "as_json", is_flag=True, default=False)
@click.pass_context
def report_lock(ctx, number, as_json):
    """Lock a report for anonymous peer review."""
    doc = client_of(ctx).request("POST", f"/api/v1/reports/{number}/lock")
    _emit(doc, as_json, lambda d: click.echo(f"report {number} locked"))


@main.group()
def cache():
    """Block cache maintenance (local, against the data directory)."""


@cache.command("gc")
@click.option("--max-bytes", type=int, required=True)
@click.option("--data-dir", default=None)
@click.option("--json", "as_json", is_flag=True, default=False)
def cache_gc(max_bytes, data_dir, as_json):
    """Evict least-recently-used cache entries down to the byte budget."""
    from .cache import BlockCache
    from .config import data_dir_from_env
    from .governance import pinned_cache_keys
    from .store import DocumentStore

    directory = data_dir_from_env(data_dir)
    store = DocumentStore(directory)
    block_cache = BlockCache(directory / "cache")
    evicted = block_cache.gc(max_bytes, pinned=pinned_cache_keys(store))
    doc = {"evicted": evicted, "total_bytes": block_cache.total_bytes()}
    _emit(doc, as_json, lambda d: click.echo(f"evicted {len(d['evicted'])} entries, now {d['total_bytes']} bytes"))


@main.group()
def queue():
    """Queue administration."""


@queue.command("list")
@click.option("--json", "as_json", is_flag=True, default=False)
@click.pass_context
def queue_list(ctx, as_json):
    doc = client_of(ctx).request("GET", "/api/v1/queues")

    def human(d):
        for q in d["queues"]:
            limits = q["limits"]
            click.echo(
                f"{q['name']}: {limits['max_cores']} cores, "
                f"{limits['max_memory_bytes']} bytes, {limits['max_wall_seconds']} s"
            )

    _emit(doc, as_json, human)


@queue.command("add")
@click.argument("name")
@click.option("--max-memory-bytes", type=int, default=1024 * 1024 * 1024)
@click.option("--max-cores", type=int, default=1)
@click.option("--max-wall-seconds", type=int, default=300)
@click.option("--data-dir", default=None)
def queue_add(name, max_memory_bytes, max_cores, max_wall_seconds, data_dir):
    """Add a queue to the local config (takes effect on service restart)."""
    from .config import data_dir_from_env

    directory = data_dir_from_env(data_dir)
    config = load_config(directory)
    if name in config.queues:
        click.echo(f"error: queue {name!r} already exists", err=True)
        sys.exit(USER_ERROR)
    config.queues[name] = Queue(
        name=name,
        limits=ResourceLimits(
            max_memory_bytes=max_memory_bytes,
            max_cores=max_cores,
            max_wall_seconds=max_wall_seconds,
        ),
    )
    save_config(directory, config)
    click.echo(f"queue {name} added; restart the service to apply")


@queue.command("disable-worker")
@click.argument("worker_id")
@click.pass_context
def queue_disable_worker(ctx, worker_id):
    """Stop assigning new jobs to a worker."""
    client_of(ctx).request("POST", f"/api/v1/workers/{worker_id}/disable")
    click.echo(f"worker {worker_id} disabled")


@queue.command("enable-worker")
@click.argument("worker_id")
@click.pass_context
def queue_enable_worker(ctx, worker_id):
    """Resume assigning jobs to a worker."""
    client_of(ctx).request("POST", f"/api/v1/workers/{worker_id}/enable")
    click.echo(f"worker {worker_id} enabled")


if __name__ == "__main__":  # pragma: no cover
    main()
