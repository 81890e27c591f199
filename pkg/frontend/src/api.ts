// Thin fetch wrapper over /api/v1. The token travels in the Authorization
// header only; it must never be encoded into a URL.

import type {
  ChoicesResponse,
  NotificationEvent,
  QueueRow,
  ResultsResponse,
  SearchRunResponse,
  StatusResponse,
  ToolchainDoc,
  WorkerRow,
} from "./types.js";

export class ApiError extends Error {
  constructor(
    public status: number,
    public code: string,
    message: string,
    public details: Record<string, unknown> = {},
  ) {
    super(message);
  }
}

export interface Fetcher {
  (url: string, init?: RequestInit): Promise<Response>;
}

export class ApiClient {
  constructor(
    private token: string,
    private base = "",
    private fetcher: Fetcher = (url, init) => fetch(url, init),
  ) {}

  private async call<T>(method: string, path: string, body?: unknown): Promise<T> {
    const headers: Record<string, string> = {};
    if (this.token) headers["Authorization"] = `Bearer ${this.token}`;
    if (body !== undefined) headers["Content-Type"] = "application/json";
    const response = await this.fetcher(`${this.base}${path}`, {
      method,
      headers,
      body: body === undefined ? undefined : JSON.stringify(body),
    });
    const text = await response.text();
    const doc = text ? JSON.parse(text) : {};
    if (!response.ok) {
      throw new ApiError(response.status, doc.code ?? "error", doc.message ?? text, doc.details ?? {});
    }
    return doc as T;
  }

  getToolchain(ref: string): Promise<ToolchainDoc> {
    return this.call("GET", `/api/v1/toolchains/${ref}`);
  }

  getChoices(toolchain: string, partial: Record<string, unknown>): Promise<ChoicesResponse> {
    const encoded = encodeURIComponent(JSON.stringify(partial));
    return this.call("GET", `/api/v1/choices?toolchain=${encodeURIComponent(toolchain)}&partial=${encoded}`);
  }

  getObject(collection: string, ref: string): Promise<Record<string, any>> {
    return this.call("GET", `/api/v1/${collection}/${ref}`);
  }

  listObjects(collection: string): Promise<{ objects: { ref: string }[] }> {
    return this.call("GET", `/api/v1/${collection}`);
  }

  createExperiment(body: Record<string, unknown>): Promise<Record<string, unknown>> {
    return this.call("POST", "/api/v1/experiments", body);
  }

  startExperiment(ref: string): Promise<{ run: string; state: string }> {
    return this.call("POST", `/api/v1/experiments/${ref}/start`);
  }

  cancelExperiment(ref: string): Promise<{ run: string; state: string }> {
    return this.call("POST", `/api/v1/experiments/${ref}/cancel`);
  }

  getStatus(ref: string, run?: string): Promise<StatusResponse> {
    const suffix = run ? `?run=${encodeURIComponent(run)}` : "";
    return this.call("GET", `/api/v1/experiments/${ref}/status${suffix}`);
  }

  getResults(ref: string): Promise<ResultsResponse> {
    return this.call("GET", `/api/v1/experiments/${ref}/results`);
  }

  getQueues(): Promise<{ queues: QueueRow[] }> {
    return this.call("GET", "/api/v1/queues");
  }

  getWorkers(): Promise<{ workers: WorkerRow[] }> {
    return this.call("GET", "/api/v1/workers");
  }

  setWorkerState(id: string, action: "disable" | "enable"): Promise<unknown> {
    return this.call("POST", `/api/v1/workers/${id}/${action}`);
  }

  runSearch(ref: string): Promise<SearchRunResponse> {
    return this.call("POST", `/api/v1/searches/${ref}/run`);
  }

  saveSearch(ref: string, body: Record<string, unknown>, expected?: string): Promise<unknown> {
    return this.call("PUT", `/api/v1/searches/${ref}`, { ...body, expected });
  }

  getNotifications(): Promise<{ notifications: NotificationEvent[] }> {
    return this.call("GET", "/api/v1/notifications");
  }

  getReportByNumber(num: string): Promise<Record<string, any>> {
    return this.call("GET", `/api/v1/reports/${num}`);
  }
}
