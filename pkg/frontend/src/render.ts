/** HTML renderers: state in, markup string out.  No DOM access here so
 * the exact markup is assertable from node tests.
 */

import type { DashboardState } from "./state.js";
import {
  bannerVisible,
  isStale,
  pendingVerifications,
  percent,
} from "./state.js";
import type { FunnelJson, MgmtHealthJson, SessionSummaryJson } from "./types.js";

export function escapeHtml(text: string): string {
  return text
    .replace(/&/g, "&amp;")
    .replace(/</g, "&lt;")
    .replace(/>/g, "&gt;")
    .replace(/"/g, "&quot;");
}

function bar(label: string, pct: number, detail: string): string {
  return (
    `<div class="bar-row">` +
    `<span class="bar-label">${escapeHtml(label)}</span>` +
    `<div class="bar-track"><div class="bar-fill" style="width:${pct}%"></div></div>` +
    `<span class="bar-value">${pct}% <small>${escapeHtml(detail)}</small></span>` +
    `</div>`
  );
}

export function renderBanner(s: DashboardState): string {
  if (!bannerVisible(s)) return "";
  const why =
    s.staleCount > 0
      ? `${s.staleCount} polls failed`
      : "service reports an unreachable target";
  return `<div class="alarm-banner" role="alert">ALARM: ${escapeHtml(why)}</div>`;
}

export function renderFunnel(funnel: FunnelJson | null): string {
  if (!funnel) return `<section class="card"><h2>Funnel</h2><p>waiting for data</p></section>`;
  const t = funnel.total;
  return (
    `<section class="card"><h2>Funnel</h2>` +
    bar("capable", percent(t.capable_rate), `${t.capable} of ${t.accessed}`) +
    bar("completed", percent(t.completion_rate), `${t.completed} of ${t.capable}`) +
    `<p class="counts">accessed ${t.accessed} / capable ${t.capable} / completed ${t.completed}</p>` +
    `</section>`
  );
}

export function renderHealth(health: MgmtHealthJson | null): string {
  if (!health) return `<section class="card"><h2>Health</h2><p>waiting for data</p></section>`;
  const rows = health.targets
    .map(
      (t) =>
        `<li class="health-${escapeHtml(t.state.toLowerCase())}">` +
        `${escapeHtml(t.target)}: ${escapeHtml(t.state)}` +
        (t.uptime_s !== undefined ? ` <small>up ${Math.floor(t.uptime_s)}s</small>` : "") +
        `</li>`,
    )
    .join("");
  return (
    `<section class="card"><h2>Health</h2><ul>${rows}</ul>` +
    `<p><small>${health.alarms_on_record} alarms on record</small></p></section>`
  );
}

function sessionRow(row: SessionSummaryJson): string {
  return (
    `<tr>` +
    `<td>${escapeHtml(row.session_id)}</td>` +
    `<td>${escapeHtml(row.participant_id)}</td>` +
    `<td>${escapeHtml(row.treatment)}</td>` +
    `<td>${escapeHtml(row.state)}</td>` +
    `<td>${row.trials_reconstructed}/${row.trials_total}</td>` +
    `<td>${new Date(row.updated_ts_ms).toISOString()}</td>` +
    `</tr>`
  );
}

export function renderSessions(s: DashboardState, limit = 50): string {
  const rows = [...s.sessions]
    .sort((a, b) => b.updated_ts_ms - a.updated_ts_ms)
    .slice(0, limit);
  if (rows.length === 0) {
    return `<section class="card"><h2>Sessions</h2><p>none yet</p></section>`;
  }
  return (
    `<section class="card"><h2>Sessions <small>${s.sessions.length} total</small></h2>` +
    `<table><thead><tr><th>session</th><th>participant</th><th>treatment</th>` +
    `<th>state</th><th>trials</th><th>updated</th></tr></thead>` +
    `<tbody>${rows.map(sessionRow).join("")}</tbody></table></section>`
  );
}

export function renderPending(s: DashboardState): string {
  const pending = pendingVerifications(s);
  const items = pending
    .map((row) => {
      const sid = escapeHtml(row.session_id);
      const busy = s.verifying !== null;
      return (
        `<form class="verify-form" data-session="${sid}">` +
        `<span>${sid} <small>${escapeHtml(row.participant_id)}</small></span>` +
        `<input name="code" placeholder="completion code" autocomplete="off">` +
        `<button type="submit"${busy ? " disabled" : ""}>verify</button>` +
        `</form>`
      );
    })
    .join("");
  const rewarded = Object.entries(s.rewarded)
    .map(([sid, usd]) => `<li>${escapeHtml(sid)} rewarded ${escapeHtml(usd)}</li>`)
    .join("");
  return (
    `<section class="card"><h2>Pending verification <small>${pending.length}</small></h2>` +
    (items || `<p>nothing waiting</p>`) +
    (rewarded ? `<ul class="rewarded">${rewarded}</ul>` : "") +
    `</section>`
  );
}

export function renderToast(s: DashboardState): string {
  if (!s.toast) return "";
  return `<div class="toast toast-${s.toast.kind}">${escapeHtml(s.toast.text)}</div>`;
}

export function renderPage(s: DashboardState, now: number, pollMs: number): string {
  const staleNote = isStale(s, now, pollMs)
    ? `<span class="stale">stale, last poll ${new Date(s.lastPollTs ?? 0).toISOString()}</span>`
    : "";
  return (
    renderBanner(s) +
    renderToast(s) +
    `<header><h1>experiment operator console</h1>${staleNote}</header>` +
    `<main>` +
    renderFunnel(s.funnel) +
    renderHealth(s.health) +
    renderPending(s) +
    renderSessions(s) +
    `</main>`
  );
}
