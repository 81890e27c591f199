// Application shell: hash routing, event delegation, screen lifecycles.

import { ApiClient, ApiError } from "./api.js";
import { ConfiguratorController } from "./configurator.js";
import { renderConfigurator } from "./configurator.js";
import { RunMonitor, renderRunView } from "./runview.js";
import { SchedulerScreen } from "./schedulerview.js";
import { SearchScreen, renderReport } from "./searchview.js";

const TOKEN_STORAGE = "beatbox-token";

function main(): void {
  const root = document.getElementById("app")!;
  let token = sessionStorage.getItem(TOKEN_STORAGE) ?? "";
  let api = new ApiClient(token);
  let configurator: ConfiguratorController | null = null;
  let monitor: RunMonitor | null = null;
  let scheduler: SchedulerScreen | null = null;
  let search: SearchScreen | null = null;

  function setContent(html: string): void {
    root.innerHTML = html;
  }

  function teardown(): void {
    if (monitor) monitor.stop();
    monitor = null;
    configurator = null;
    scheduler = null;
    search = null;
  }

  async function route(): Promise<void> {
    teardown();
    const hash = location.hash.replace(/^#/, "");
    const [screen, ...rest] = hash.split("/");
    const argument = rest.join("/");
    if (!token && screen !== "report") {
      setContent(
        `<h2>Sign in</h2><p>Paste an API token (issued via the admin CLI).</p>` +
          `<input id="token-input" type="password" placeholder="token">` +
          `<button data-action="save-token">Save</button>`,
      );
      return;
    }
    try {
      if (screen === "configure" && argument) {
        const doc = await api.getToolchain(argument);
        configurator = new ConfiguratorController(api, argument, doc.spec.blocks, (state) =>
          setContent(renderConfigurator(state)),
        );
        await configurator.refresh();
      } else if (screen === "run" && argument) {
        monitor = new RunMonitor(api, argument, (state) => setContent(renderRunView(state)));
        monitor.start();
      } else if (screen === "scheduler") {
        scheduler = new SchedulerScreen(api, () => setContent(scheduler!.render()));
        await scheduler.refresh();
      } else if (screen === "search" && argument) {
        search = new SearchScreen(api, () => setContent(search!.render()));
        await search.open(argument);
        await search.refreshFeed();
      } else if (screen === "report" && argument) {
        const anonymous = new ApiClient(token); // works without a token once locked
        setContent(renderReport(await anonymous.getReportByNumber(argument)));
      } else {
        await renderHome();
      }
    } catch (error) {
      const message = error instanceof ApiError ? `${error.status}: ${error.message}` : String(error);
      setContent(`<div class="error banner">${message}</div>`);
    }
  }

  async function renderHome(): Promise<void> {
    const [toolchains, experiments, searches] = await Promise.all([
      api.listObjects("toolchains"),
      api.listObjects("experiments"),
      api.listObjects("searches"),
    ]);
    const links = (items: { ref: string }[], prefix: string) =>
      items.map((o) => `<li><a href="#${prefix}/${o.ref}">${o.ref}</a></li>`).join("") || "<li>(none)</li>";
    setContent(
      `<h2>Toolchains</h2><ul>${links(toolchains.objects, "configure")}</ul>` +
        `<h2>Experiments</h2><ul>${links(experiments.objects, "run")}</ul>` +
        `<h2>Searches</h2><ul>${links(searches.objects, "search")}</ul>` +
        `<p><a href="#scheduler">scheduler</a></p>` +
        `<p>Open report: <input id="report-number" placeholder="9-digit number">` +
        `<button data-action="open-report">view</button></p>`,
    );
  }

  document.addEventListener("click", (event) => {
    const target = event.target as HTMLElement;
    const action = target.dataset["action"];
    if (!action) return;
    if (action === "save-token") {
      token = (document.getElementById("token-input") as HTMLInputElement).value.trim();
      sessionStorage.setItem(TOKEN_STORAGE, token);
      api = new ApiClient(token);
      void route();
    } else if (action === "run" && configurator) {
      const name = (document.getElementById("exp-name") as HTMLInputElement).value.trim() || "trial";
      void configurator.submit(name, "default", "python");
    } else if (action === "unselect" && configurator) {
      void configurator.drop(target.dataset["block"]!);
    } else if (action === "cancel" && monitor) {
      void monitor.cancel();
    } else if (action === "disable-worker" && scheduler) {
      void scheduler.setWorker(target.dataset["worker"]!, "disable");
    } else if (action === "enable-worker" && scheduler) {
      void scheduler.setWorker(target.dataset["worker"]!, "enable");
    } else if (action === "search-run" && search) {
      void search.run();
    } else if (action === "toggle-leaderboard" && search) {
      void search.toggleLeaderboard();
    } else if (action === "open-report") {
      const num = (document.getElementById("report-number") as HTMLInputElement).value.trim();
      if (num) location.hash = `#report/${num}`;
    }
  });

  document.addEventListener("change", (event) => {
    const target = event.target as HTMLSelectElement;
    if (target.dataset["action"] === "select" && configurator && target.value) {
      void configurator.choose(target.dataset["block"]!, target.value, target.dataset["kind"]!);
    }
  });

  window.addEventListener("hashchange", () => void route());
  void route();
}

main();
