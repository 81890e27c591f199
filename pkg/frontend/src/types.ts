// Shapes of the documented /api/v1 responses the UI consumes.

export type Assignment =
  | { algorithm: string; parameters: Record<string, unknown> }
  | { database: string; protocol: string; set: string };

export interface BlockDoc {
  name: string;
  kind: "dataset" | "processing" | "analyzer";
  inputs: string[];
  outputs: string[];
  sync: string | null;
}

export interface ToolchainDoc {
  kind: string;
  owner: string;
  name: string;
  version: number;
  spec: { blocks: BlockDoc[]; connections: { from: string; to: string }[] };
}

export interface ChoicesResponse {
  choices: Record<string, string[]>;
}

export interface StatusResponse {
  experiment: string;
  run: string | null;
  state: string;
  jobs: Record<string, string>;
  failures?: Record<string, { status: string; limit: string | null; message: string }>;
}

export interface ResultValue {
  kind: string;
  value: unknown;
}

export interface ResultsResponse {
  experiment: string;
  run: string;
  state: string;
  results: Record<string, Record<string, ResultValue>>;
  stats: Record<string, Record<string, number>>;
  result_digest: string;
  attestations: string[];
}

export interface WorkerRow {
  id: string;
  cores: number;
  memory_bytes: number;
  environments: string[];
  queues: string[];
  state: "active" | "disabled" | "lost";
  heartbeat_age: number;
}

export interface QueueRow {
  name: string;
  limits: { max_cores: number; max_memory_bytes: number; max_wall_seconds: number };
  principals: string[];
}

export interface SearchRow {
  experiment: string;
  owner: string;
  values: Record<string, unknown>;
  attestation: string | null;
}

export interface SearchRunResponse {
  query: string;
  rows: SearchRow[];
  computed_at: number;
}

export interface NotificationEvent {
  id: string;
  query: string;
  old: string | null;
  new: string;
  timestamp: number;
  recipients: string[];
}
