// Stored searches: result tables rendered exactly from the server response,
// leaderboard toggle, notification feed, and report viewing by number.

import type { ApiClient } from "./api.js";
import type { NotificationEvent, SearchRunResponse } from "./types.js";

const FILTER_FIELDS = ["toolchain", "algorithm", "database", "protocol", "owner", "status"];
const FILTER_OPS = ["equals", "prefix", "contains"];

export interface FilterRow {
  field: string;
  op: string;
  value: string;
}

/** Client-side shape check before submitting a query edit. */
export function filterProblems(filters: FilterRow[]): string[] {
  const problems: string[] = [];
  filters.forEach((f, i) => {
    if (!FILTER_FIELDS.includes(f.field)) problems.push(`filter ${i + 1}: unknown field '${f.field}'`);
    if (!FILTER_OPS.includes(f.op)) problems.push(`filter ${i + 1}: unknown operator '${f.op}'`);
    if (typeof f.value !== "string" || f.value === "") problems.push(`filter ${i + 1}: empty value`);
  });
  return problems;
}

function escapeHtml(text: string): string {
  return text.replace(/&/g, "&amp;").replace(/</g, "&lt;").replace(/>/g, "&gt;");
}

/** Render a comparison table byte-for-byte from the server rows. */
export function renderSearchTable(result: SearchRunResponse, columns: string[]): string {
  const header = ["experiment", "owner", ...columns, "attestation"]
    .map((c) => `<th>${escapeHtml(c)}</th>`)
    .join("");
  const rows = result.rows
    .map((row) => {
      const cells = columns
        .map((c) => `<td>${row.values[c] === null || row.values[c] === undefined ? "—" : escapeHtml(String(row.values[c]))}</td>`)
        .join("");
      const attested = row.attestation
        ? `<a href="#report/${escapeHtml(row.attestation)}">${escapeHtml(row.attestation)}</a>`
        : "—";
      return `<tr><td>${escapeHtml(row.experiment)}</td><td>${escapeHtml(row.owner)}</td>${cells}<td>${attested}</td></tr>`;
    })
    .join("");
  return `<table class="search-results"><tr>${header}</tr>${rows}</table>`;
}

export function renderNotifications(events: NotificationEvent[]): string {
  if (!events.length) return `<p class="muted">no activity yet</p>`;
  const items = events
    .slice()
    .sort((a, b) => b.timestamp - a.timestamp)
    .map(
      (e) =>
        `<li data-id="${escapeHtml(e.id)}">leaderboard <b>${escapeHtml(e.query)}</b> changed ` +
        `<small>${new Date(e.timestamp * 1000).toISOString()}</small></li>`,
    )
    .join("");
  return `<ul class="activity">${items}</ul>`;
}

export class SearchScreen {
  result: SearchRunResponse | null = null;
  notifications: NotificationEvent[] = [];
  columns: string[] = [];
  queryRef: string | null = null;
  error: string | null = null;

  constructor(private api: ApiClient, private onChange: () => void) {}

  async open(queryRef: string): Promise<void> {
    this.queryRef = queryRef;
    const doc = await this.api.getObject("searches", queryRef);
    this.columns = (doc.spec.columns ?? []).map((c: { name: string }) => c.name);
    await this.run();
  }

  async run(): Promise<void> {
    if (!this.queryRef) return;
    try {
      this.result = await this.api.runSearch(this.queryRef);
      this.error = null;
    } catch (error) {
      this.error = (error as Error).message;
    }
    this.onChange();
  }

  async toggleLeaderboard(): Promise<void> {
    if (!this.queryRef) return;
    const doc = await this.api.getObject("searches", this.queryRef);
    await this.api.saveSearch(
      this.queryRef,
      { spec: { ...doc.spec, leaderboard: !doc.spec.leaderboard } },
      doc.digest,
    );
    this.onChange();
  }

  async refreshFeed(): Promise<void> {
    this.notifications = (await this.api.getNotifications()).notifications;
    this.onChange();
  }

  render(): string {
    const table = this.result ? renderSearchTable(this.result, this.columns) : "";
    const error = this.error ? `<div class="error">${escapeHtml(this.error)}</div>` : "";
    return `<h2>Search ${escapeHtml(this.queryRef ?? "")}</h2>${error}` +
      `<button data-action="search-run">Run</button> ` +
      `<button data-action="toggle-leaderboard">Toggle leaderboard</button>` +
      `${table}<h3>Activity</h3>${renderNotifications(this.notifications)}`;
  }
}

export function renderReport(doc: Record<string, any>): string {
  const spec = doc.spec ?? {};
  const experiments = (spec.experiments ?? [])
    .map((e: string) => `<li>${escapeHtml(e)}</li>`)
    .join("");
  const locked = spec.locked ? `<span class="badge ok">locked</span>` : `<span class="badge stale">draft</span>`;
  return `<h2>Report ${escapeHtml(spec.number ?? "")} ${locked}</h2>` +
    `<h3>${escapeHtml(spec.title ?? "")}</h3><p>${escapeHtml(spec.doc ?? "")}</p>` +
    `<h4>Experiments</h4><ul>${experiments}</ul>`;
}
