// Run monitor: 2-second status polling, job state table, analyzer results.

import type { ApiClient } from "./api.js";
import type { ResultsResponse, StatusResponse } from "./types.js";

export const POLL_INTERVAL_MS = 2000;

const JOB_ORDER = ["blocked", "pending", "assigned", "running", "done", "failed", "cancelled", "skipped"];
const TERMINAL_JOB = new Set(["done", "failed", "cancelled", "skipped"]);
const TERMINAL_RUN = new Set(["done", "failed", "cancelled"]);

export interface RunViewState {
  experiment: string;
  run: string | null;
  state: string;
  jobs: Record<string, string>;
  failures: Record<string, { status: string; limit: string | null; message: string }>;
  results: ResultsResponse | null;
  connectionLost: boolean;
  polling: boolean;
}

export function initialRunView(experiment: string): RunViewState {
  return {
    experiment,
    run: null,
    state: "unknown",
    jobs: {},
    failures: {},
    results: null,
    connectionLost: false,
    polling: true,
  };
}

function legalTransition(from: string | undefined, to: string): boolean {
  if (from === undefined || from === to) return true;
  if (TERMINAL_JOB.has(from)) return false; // terminal states never move
  return JOB_ORDER.indexOf(to) > JOB_ORDER.indexOf(from) || to === "pending";
}

/** Fold a status response into the view; stale regressions are ignored. */
export function applyStatus(state: RunViewState, status: StatusResponse): RunViewState {
  if (state.run !== null && status.run !== state.run) {
    // a different (newer) run: adopt it wholesale
    return {
      ...state,
      run: status.run,
      state: status.state,
      jobs: { ...status.jobs },
      failures: { ...(status.failures ?? {}) },
      connectionLost: false,
    };
  }
  const jobs = { ...state.jobs };
  for (const [job, next] of Object.entries(status.jobs)) {
    if (legalTransition(jobs[job], next)) jobs[job] = next;
  }
  return {
    ...state,
    run: status.run,
    state: status.state,
    jobs,
    failures: { ...(status.failures ?? {}) },
    connectionLost: false,
    polling: !TERMINAL_RUN.has(status.state),
  };
}

export function markConnectionLost(state: RunViewState): RunViewState {
  return { ...state, connectionLost: true };
}

export function hexToDataUrl(hex: string): string {
  let binary = "";
  for (let i = 0; i < hex.length; i += 2) {
    binary += String.fromCharCode(parseInt(hex.slice(i, i + 2), 16));
  }
  return `data:image/png;base64,${btoa(binary)}`;
}

function escapeHtml(text: string): string {
  return text.replace(/&/g, "&amp;").replace(/</g, "&lt;").replace(/>/g, "&gt;");
}

export function renderJobTable(state: RunViewState): string {
  const rows = Object.entries(state.jobs)
    .sort(([a], [b]) => a.localeCompare(b))
    .map(([job, jobState]) => {
      const short = job.split("/").pop() ?? job;
      const failure = state.failures[job];
      const detail = failure
        ? ` <small class="error">${escapeHtml(failure.status)}${failure.limit ? `(${failure.limit})` : ""}</small>`
        : "";
      return `<tr><td>${escapeHtml(short)}</td><td class="state-${jobState}">${jobState}${detail}</td></tr>`;
    })
    .join("");
  return `<table class="jobs"><tr><th>block</th><th>state</th></tr>${rows}</table>`;
}

export function renderResults(results: ResultsResponse): string {
  const scalarRows: string[] = [];
  const plots: string[] = [];
  for (const [block, blockResults] of Object.entries(results.results).sort()) {
    for (const [name, payload] of Object.entries(blockResults).sort()) {
      if (payload.kind === "plot") {
        plots.push(
          `<figure><img alt="${escapeHtml(`${block}.${name}`)}" src="${hexToDataUrl(String(payload.value))}">` +
            `<figcaption>${escapeHtml(`${block}.${name}`)}</figcaption></figure>`,
        );
      } else {
        scalarRows.push(
          `<tr><td>${escapeHtml(`${block}.${name}`)}</td><td>${escapeHtml(String(payload.value))}</td>` +
            `<td>${payload.kind}</td></tr>`,
        );
      }
    }
  }
  const table = scalarRows.length
    ? `<table class="results"><tr><th>result</th><th>value</th><th>kind</th></tr>${scalarRows.join("")}</table>`
    : "";
  return `${table}${plots.join("")}`;
}

export function renderRunView(state: RunViewState): string {
  const banner = state.connectionLost
    ? `<div class="error banner">connection lost — retrying…</div>`
    : "";
  const cancel = TERMINAL_RUN.has(state.state)
    ? ""
    : `<button data-action="cancel" data-experiment="${escapeHtml(state.experiment)}">Cancel</button>`;
  const results = state.results ? renderResults(state.results) : "";
  return `<h2>Run ${escapeHtml(state.run ?? "…")} — ${escapeHtml(state.state)}</h2>${banner}${cancel}` +
    renderJobTable(state) + results;
}

export class RunMonitor {
  state: RunViewState;
  private timer: ReturnType<typeof setTimeout> | null = null;

  constructor(
    private api: ApiClient,
    experiment: string,
    private onChange: (state: RunViewState) => void,
    private intervalMs: number = POLL_INTERVAL_MS,
  ) {
    this.state = initialRunView(experiment);
  }

  private push(state: RunViewState): void {
    this.state = state;
    this.onChange(state);
  }

  async tick(): Promise<void> {
    try {
      const status = await this.api.getStatus(this.state.experiment);
      let next = applyStatus(this.state, status);
      if (!next.polling && next.state === "done" && next.results === null) {
        next = { ...next, results: await this.api.getResults(this.state.experiment) };
      }
      this.push(next);
    } catch {
      this.push(markConnectionLost(this.state));
    }
  }

  start(): void {
    const loop = async () => {
      await this.tick();
      if (this.state.polling) {
        this.timer = setTimeout(loop, this.intervalMs); // terminal state stops polling
      }
    };
    void loop();
  }

  stop(): void {
    if (this.timer !== null) clearTimeout(this.timer);
    this.timer = null;
  }

  async cancel(): Promise<void> {
    await this.api.cancelExperiment(this.state.experiment);
    await this.tick();
  }
}
