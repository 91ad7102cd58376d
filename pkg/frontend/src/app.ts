/** Browser entry point: load config.json, then poll and render forever. */

import { ApiClient } from "./api.js";
import { Controller, type Store } from "./controller.js";
import { renderPage } from "./render.js";
import { bannerVisible, initialState, type DashboardState } from "./state.js";
import type { DashboardConfig } from "./types.js";

const BASE_TITLE = "experiment operator console";

async function loadConfig(): Promise<DashboardConfig> {
  const resp = await fetch("config.json");
  if (!resp.ok) throw new Error(`config.json: HTTP ${resp.status}`);
  const cfg = (await resp.json()) as Partial<DashboardConfig>;
  return {
    endpoint: cfg.endpoint || window.location.origin,
    poll_ms: cfg.poll_ms || 2000,
  };
}

async function main(): Promise<void> {
  const root = document.getElementById("root");
  if (!root) throw new Error("missing #root element");
  const cfg = await loadConfig();
  const api = new ApiClient(cfg.endpoint);

  let state: DashboardState = initialState();
  const store: Store = {
    get: () => state,
    set: (next) => {
      state = next;
      paint();
    },
  };
  const controller = new Controller(api, store);

  function paint(): void {
    root!.innerHTML = renderPage(state, Date.now(), cfg.poll_ms);
    document.title = bannerVisible(state) ? `[ALARM] ${BASE_TITLE}` : BASE_TITLE;
  }

  root.addEventListener("submit", (ev) => {
    const form = ev.target as HTMLFormElement;
    if (!form.classList.contains("verify-form")) return;
    ev.preventDefault();
    const sessionId = form.dataset.session;
    const code = (form.elements.namedItem("code") as HTMLInputElement | null)?.value ?? "";
    if (!sessionId || !code.trim()) return;
    void controller.verify(sessionId, code.trim());
  });

  paint();
  // strict serial polling: the next cycle is scheduled only after the
  // current one settles, so a slow service never stacks requests
  const loop = async (): Promise<void> => {
    await controller.poll();
    window.setTimeout(() => void loop(), cfg.poll_ms);
  };
  void loop();
}

void main().catch((err) => {
  const root = document.getElementById("root");
  if (root) {
    root.innerHTML = `<div class="alarm-banner">failed to start: ${String(err)}</div>`;
  }
});
