// Experiment configurator: per-block menus narrowed by the server.
//
// Compatibility is never computed here: the candidate list of every
// unassigned block is exactly the latest /choices response for the current
// partial assignment. Stale responses are dropped via a request sequence.

import type { ApiClient } from "./api.js";
import { ApiError } from "./api.js";
import type { Assignment, BlockDoc, ChoicesResponse } from "./types.js";

export interface ConfiguratorState {
  toolchain: string;
  blocks: BlockDoc[];
  selections: Record<string, Assignment>;
  candidates: Record<string, string[]>;
  requestSeq: number;      // id of the newest /choices request sent
  candidatesSeq: number;   // id of the request that produced `candidates`
  blockErrors: Record<string, string>;
  globalError: string | null;
  created: string | null;  // experiment ref once submitted
  run: string | null;
}

export function initialState(toolchain: string, blocks: BlockDoc[]): ConfiguratorState {
  return {
    toolchain,
    blocks,
    selections: {},
    candidates: {},
    requestSeq: 0,
    candidatesSeq: -1,
    blockErrors: {},
    globalError: null,
    created: null,
    run: null,
  };
}

export function partialOf(state: ConfiguratorState): Record<string, Assignment> {
  return { ...state.selections };
}

/** Install a /choices response; ignored unless it answers the newest request. */
export function applyChoices(
  state: ConfiguratorState,
  seq: number,
  response: ChoicesResponse,
): ConfiguratorState {
  if (seq !== state.requestSeq) return state; // stale: a newer request is in flight
  return { ...state, candidates: { ...response.choices }, candidatesSeq: seq };
}

export function select(state: ConfiguratorState, block: string, assignment: Assignment): ConfiguratorState {
  const selections = { ...state.selections, [block]: assignment };
  const blockErrors = { ...state.blockErrors };
  delete blockErrors[block];
  return { ...state, selections, blockErrors };
}

export function unselect(state: ConfiguratorState, block: string): ConfiguratorState {
  const selections = { ...state.selections };
  delete selections[block];
  return { ...state, selections };
}

/** Menu for one block: exactly the server-provided candidates, never local. */
export function menuFor(state: ConfiguratorState, block: string): string[] {
  if (block in state.selections) return [];
  return state.candidates[block] ?? [];
}

export function menus(state: ConfiguratorState): Record<string, string[]> {
  const out: Record<string, string[]> = {};
  for (const block of state.blocks) {
    if (!(block.name in state.selections)) out[block.name] = menuFor(state, block.name);
  }
  return out;
}

export function canRun(state: ConfiguratorState): boolean {
  return (
    state.blocks.every((b) => b.name in state.selections) &&
    state.candidatesSeq === state.requestSeq // menus reflect the current partial
  );
}

function escapeHtml(text: string): string {
  return text
    .replace(/&/g, "&amp;")
    .replace(/</g, "&lt;")
    .replace(/>/g, "&gt;")
    .replace(/"/g, "&quot;");
}

export function renderBlockRow(state: ConfiguratorState, block: BlockDoc): string {
  const chosen = state.selections[block.name];
  const error = state.blockErrors[block.name];
  const errorHtml = error ? `<div class="error inline-error">${escapeHtml(error)}</div>` : "";
  if (chosen) {
    const label = "algorithm" in chosen ? chosen.algorithm : `${chosen.database} (${chosen.protocol}/${chosen.set})`;
    return `<tr data-block="${block.name}"><td>${block.name}<br><small>${block.kind}</small></td>` +
      `<td><span class="chosen">${escapeHtml(label)}</span> ` +
      `<button data-action="unselect" data-block="${block.name}">change</button>${errorHtml}</td></tr>`;
  }
  const options = menuFor(state, block.name)
    .map((ref) => `<option value="${escapeHtml(ref)}">${escapeHtml(ref)}</option>`)
    .join("");
  const empty = options === "" ? `<option value="" disabled>(no compatible choice)</option>` : "";
  return `<tr data-block="${block.name}"><td>${block.name}<br><small>${block.kind}</small></td>` +
    `<td><select data-action="select" data-block="${block.name}" data-kind="${block.kind}">` +
    `<option value="">choose…</option>${options}${empty}</select>${errorHtml}</td></tr>`;
}

export function renderConfigurator(state: ConfiguratorState): string {
  const rows = state.blocks.map((b) => renderBlockRow(state, b)).join("");
  const runDisabled = canRun(state) ? "" : " disabled";
  const global = state.globalError ? `<div class="error">${escapeHtml(state.globalError)}</div>` : "";
  const created = state.created
    ? `<div class="ok">experiment ${escapeHtml(state.created)} created` +
      (state.run ? `, run <a href="#run/${escapeHtml(state.created)}">${escapeHtml(state.run)}</a>` : "") +
      `</div>`
    : "";
  return `<h2>Configure: ${escapeHtml(state.toolchain)}</h2>${global}${created}` +
    `<table class="blocks">${rows}</table>` +
    `<div class="actions"><input id="exp-name" placeholder="experiment name (e.g. trial)">` +
    `<button data-action="run"${runDisabled}>Run</button></div>`;
}

/** Map server-side validation issues onto the offending blocks. */
export function applyValidationError(state: ConfiguratorState, error: ApiError): ConfiguratorState {
  const blockErrors: Record<string, string> = {};
  const issues = (error.details["issues"] as { path: string; message: string }[] | undefined) ?? [];
  for (const issue of issues) {
    for (const block of state.blocks) {
      if (issue.path.includes(block.name)) {
        blockErrors[block.name] = issue.message;
        break;
      }
    }
  }
  const globalError = Object.keys(blockErrors).length ? null : error.message;
  return { ...state, blockErrors, globalError };
}

export class ConfiguratorController {
  state: ConfiguratorState;

  constructor(
    private api: ApiClient,
    toolchain: string,
    blocks: BlockDoc[],
    private onChange: (state: ConfiguratorState) => void,
  ) {
    this.state = initialState(toolchain, blocks);
  }

  private push(state: ConfiguratorState): void {
    this.state = state;
    this.onChange(state);
  }

  /** Fetch candidates for the current partial; drops out-of-date replies. */
  async refresh(): Promise<void> {
    const seq = this.state.requestSeq + 1;
    this.push({ ...this.state, requestSeq: seq });
    try {
      const response = await this.api.getChoices(this.state.toolchain, partialOf(this.state));
      this.push(applyChoices(this.state, seq, response));
    } catch (error) {
      if (seq === this.state.requestSeq) {
        this.push({ ...this.state, globalError: (error as Error).message });
      }
    }
  }

  async choose(block: string, ref: string, kind: string): Promise<void> {
    let assignment: Assignment;
    if (kind === "dataset") {
      const doc = await this.api.getObject("databases", ref);
      const protocol = doc.spec.protocols[0];
      assignment = { database: ref, protocol: protocol.name, set: protocol.sets[0].name };
    } else {
      assignment = { algorithm: ref, parameters: {} };
    }
    this.push(select(this.state, block, assignment));
    await this.refresh();
  }

  async drop(block: string): Promise<void> {
    this.push(unselect(this.state, block));
    await this.refresh();
  }

  async submit(name: string, queue: string, environment: string): Promise<void> {
    const spec = {
      toolchain: this.state.toolchain,
      assignments: Object.fromEntries(
        Object.entries(this.state.selections).map(([block, a]) => [block, a]),
      ),
      placement: { default: { queue, environment, folds: 1 } },
    };
    try {
      const created = await this.api.createExperiment({ name, version: 1, spec });
      const ref = `${created["owner"]}/${created["name"]}/${created["version"]}`;
      const started = await this.api.startExperiment(ref);
      this.push({ ...this.state, created: ref, run: started.run, globalError: null, blockErrors: {} });
    } catch (error) {
      if (error instanceof ApiError) {
        this.push(applyValidationError(this.state, error));
      } else {
        this.push({ ...this.state, globalError: (error as Error).message });
      }
    }
  }
}
