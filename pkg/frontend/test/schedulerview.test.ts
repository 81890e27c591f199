// Scheduler screen: heartbeat badges and worker enable/disable wiring.

import { describe, expect, it } from "vitest";
import { heartbeatBadge, renderQueues, renderWorkers } from "../src/schedulerview.js";
import type { WorkerRow } from "../src/types.js";

function worker(overrides: Partial<WorkerRow>): WorkerRow {
  return {
    id: "w1",
    cores: 2,
    memory_bytes: 8_000_000_000,
    environments: ["python"],
    queues: ["default"],
    state: "active",
    heartbeat_age: 1,
    ...overrides,
  };
}

describe("worker badges", () => {
  it("fresh active worker is ok", () => {
    expect(heartbeatBadge(worker({}))).toContain("ok");
  });

  it("stale heartbeat is flagged", () => {
    expect(heartbeatBadge(worker({ heartbeat_age: 45 }))).toContain("stale");
  });

  it("lost worker is flagged regardless of age", () => {
    expect(heartbeatBadge(worker({ state: "lost", heartbeat_age: 2 }))).toContain("lost");
  });

  it("disabled worker offers an enable action", () => {
    const html = renderWorkers([worker({ state: "disabled" })]);
    expect(html).toContain('data-action="enable-worker"');
    expect(html).toContain("disabled");
  });

  it("active worker offers a disable action", () => {
    const html = renderWorkers([worker({})]);
    expect(html).toContain('data-action="disable-worker"');
  });
});

describe("queue table", () => {
  it("renders limits and open access", () => {
    const html = renderQueues([
      {
        name: "default",
        limits: { max_cores: 1, max_memory_bytes: 1024, max_wall_seconds: 300 },
        principals: [],
      },
    ]);
    expect(html).toContain("default");
    expect(html).toContain("everyone");
    expect(html).toContain("300s");
  });
});
