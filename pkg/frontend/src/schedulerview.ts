// Administrator view: queues, workers, heartbeat freshness, disable/enable.

import type { ApiClient } from "./api.js";
import type { QueueRow, WorkerRow } from "./types.js";

export const STALE_HEARTBEAT_SECONDS = 30;

function escapeHtml(text: string): string {
  return text.replace(/&/g, "&amp;").replace(/</g, "&lt;").replace(/>/g, "&gt;");
}

export function heartbeatBadge(worker: WorkerRow): string {
  if (worker.state === "lost") return `<span class="badge lost">lost</span>`;
  if (worker.state === "disabled") return `<span class="badge disabled">disabled</span>`;
  if (worker.heartbeat_age > STALE_HEARTBEAT_SECONDS) return `<span class="badge stale">stale</span>`;
  return `<span class="badge ok">ok</span>`;
}

export function renderWorkers(workers: WorkerRow[]): string {
  const rows = workers
    .map((w) => {
      const action = w.state === "disabled" ? "enable" : "disable";
      return `<tr><td>${escapeHtml(w.id)}</td><td>${w.cores}</td>` +
        `<td>${w.environments.map(escapeHtml).join(", ")}</td>` +
        `<td>${w.queues.map(escapeHtml).join(", ")}</td>` +
        `<td>${heartbeatBadge(w)} <small>${w.heartbeat_age.toFixed(0)}s</small></td>` +
        `<td><button data-action="${action}-worker" data-worker="${escapeHtml(w.id)}">${action}</button></td></tr>`;
    })
    .join("");
  return `<table class="workers"><tr><th>worker</th><th>cores</th><th>environments</th>` +
    `<th>queues</th><th>heartbeat</th><th></th></tr>${rows}</table>`;
}

export function renderQueues(queues: QueueRow[]): string {
  const rows = queues
    .map(
      (q) =>
        `<tr><td>${escapeHtml(q.name)}</td><td>${q.limits.max_cores}</td>` +
        `<td>${q.limits.max_memory_bytes}</td><td>${q.limits.max_wall_seconds}s</td>` +
        `<td>${q.principals.length ? q.principals.map(escapeHtml).join(", ") : "everyone"}</td></tr>`,
    )
    .join("");
  return `<table class="queues"><tr><th>queue</th><th>cores</th><th>memory</th>` +
    `<th>wall</th><th>principals</th></tr>${rows}</table>`;
}

export class SchedulerScreen {
  workers: WorkerRow[] = [];
  queues: QueueRow[] = [];

  constructor(private api: ApiClient, private onChange: () => void) {}

  async refresh(): Promise<void> {
    const [workers, queues] = await Promise.all([this.api.getWorkers(), this.api.getQueues()]);
    this.workers = workers.workers;
    this.queues = queues.queues;
    this.onChange();
  }

  async setWorker(id: string, action: "disable" | "enable"): Promise<void> {
    await this.api.setWorkerState(id, action);
    await this.refresh();
  }

  render(): string {
    return `<h2>Scheduler</h2><h3>Queues</h3>${renderQueues(this.queues)}` +
      `<h3>Workers</h3>${renderWorkers(this.workers)}`;
  }
}
