"""Worker process: polls the scheduler over the public API and executes
block jobs against the shared filesystem cache.

Workers survive server restarts: every call retries on connection failure,
and results are re-posted until the scheduler acknowledges them (duplicates
are ignored server side, so at-least-once delivery is safe).
"""
from __future__ import annotations

import logging
import os
import threading
import time
from concurrent.futures import ThreadPoolExecutor

import httpx
import psutil

from .cache import BlockCache
from .config import load_config
from .runner import BlockJobDescriptor, RunnerResult, merge_fold_entries, run_block

log = logging.getLogger("beatbox.worker")


class WorkerClient:
    def __init__(self, url: str, token: str) -> None:
        self.base = url.rstrip("/")
        self.client = httpx.Client(
            headers={"Authorization": f"Bearer {token}"}, timeout=httpx.Timeout(30.0)
        )

    def post(self, path: str, payload: dict) -> dict | None:
        """POST with unbounded retry on connection errors; None on 4xx."""
        while True:
            try:
                response = self.client.post(f"{self.base}{path}", json=payload)
            except httpx.HTTPError as exc:
                log.warning("server unreachable (%s); retrying", exc)
                time.sleep(0.5)
                continue
            if response.status_code >= 500:
                time.sleep(0.5)
                continue
            if response.status_code >= 400:
                log.warning("%s rejected: %s", path, response.text)
                return None
            return response.json()


class Worker:
    def __init__(
        self,
        *,
        url: str,
        token: str,
        data_dir: str,
        worker_id: str | None = None,
        queues: list[str] | None = None,
        cores: int | None = None,
        memory_bytes: int | None = None,
        poll_interval: float = 0.2,
    ) -> None:
        config = load_config(data_dir)
        self.client = WorkerClient(url, token)
        self.cache = BlockCache(os.path.join(data_dir, "cache"))
        self.environments = config.environments
        self.heartbeat_interval = config.heartbeat_interval
        self.poll_interval = poll_interval
        self.worker_id = worker_id or f"worker-{os.uname().nodename}-{os.getpid()}"
        self.queues = queues or ["default"]
        self.cores = cores or (os.cpu_count() or 1)
        self.memory_bytes = memory_bytes or psutil.virtual_memory().total
        self._stop = threading.Event()
        self._cancel_events: dict[str, threading.Event] = {}
        self._pool = ThreadPoolExecutor(max_workers=self.cores)

    def register(self) -> None:
        self.client.post(
            "/api/v1/worker/register",
            {
                "id": self.worker_id,
                "cores": self.cores,
                "memory_bytes": self.memory_bytes,
                "environments": sorted(self.environments),
                "queues": self.queues,
            },
        )

    def stop(self) -> None:
        self._stop.set()

    def _heartbeat_loop(self) -> None:
        while not self._stop.wait(self.heartbeat_interval):
            self.client.post("/api/v1/worker/heartbeat", {"worker": self.worker_id})

    def _execute(self, payload: dict) -> None:
        job_id = payload["job"]
        descriptor = BlockJobDescriptor.from_doc(payload["descriptor"])
        cancel = self._cancel_events.setdefault(job_id, threading.Event())
        try:
            if "merge_keys" in payload:
                result = merge_fold_entries(self.cache, descriptor, payload["merge_keys"])
            else:
                result = run_block(
                    descriptor, self.cache, self.environments, cancel_event=cancel
                )
        except Exception as exc:  # defensive: a worker must never wedge
            log.exception("job %s raised", job_id)
            result = RunnerResult(status="crashed", message=f"worker exception: {exc}")
        finally:
            self._cancel_events.pop(job_id, None)
        if result.status == "cancelled":
            return
        self.client.post(
            "/api/v1/worker/result",
            {
                "worker": self.worker_id,
                "run": payload["run"],
                "job": job_id,
                "result": result.to_doc(),
            },
        )

    def run_forever(self) -> None:  # pragma: no cover - exercised end to end
        self.register()
        heartbeat = threading.Thread(target=self._heartbeat_loop, daemon=True)
        heartbeat.start()
        try:
            while not self._stop.is_set():
                response = self.client.post("/api/v1/worker/poll", {"worker": self.worker_id})
                if response is None:
                    # 4xx: scheduler does not know us (restart wiped nothing,
                    # but registration may predate a wiped data dir)
                    self.register()
                    time.sleep(self.poll_interval)
                    continue
                for job_id in response.get("cancel", []):
                    event = self._cancel_events.get(job_id)
                    if event is not None:
                        event.set()
                jobs = response.get("jobs", [])
                for payload in jobs:
                    self._cancel_events.setdefault(payload["job"], threading.Event())
                    self._pool.submit(self._execute, payload)
                if not jobs:
                    time.sleep(self.poll_interval)
        finally:
            self._pool.shutdown(wait=True)


def main(argv: list[str] | None = None) -> None:  # pragma: no cover
    import argparse

    parser = argparse.ArgumentParser(prog="beatbox-worker")
    parser.add_argument("--url", default=os.environ.get("BEATBOX_URL", "http://127.0.0.1:7700"))
    parser.add_argument("--token", default=os.environ.get("BEATBOX_TOKEN", ""))
    parser.add_argument("--data-dir", default=os.environ.get("BEATBOX_DATA_DIR"))
    parser.add_argument("--queue", action="append", default=None)
    parser.add_argument("--id", default=None)
    parser.add_argument("--cores", type=int, default=None)
    args = parser.parse_args(argv)
    worker = Worker(
        url=args.url,
        token=args.token,
        data_dir=args.data_dir,
        worker_id=args.id,
        queues=args.queue,
        cores=args.cores,
    )
    worker.run_forever()


if __name__ == "__main__":  # pragma: no cover
    main()
