// HTML renderers: pure functions from model state to markup strings. No DOM
// access here so the test suite can assert on output without a browser;
// main.ts owns the actual elements.

import type { ConsoleModel, TransferKey } from "./model.js";
import type { SessionRow, VaultRow, TransferProgressFrame } from "./schema.js";

export function escapeHtml(s: string): string {
  return s
    .replace(/&/g, "&amp;")
    .replace(/</g, "&lt;")
    .replace(/>/g, "&gt;")
    .replace(/"/g, "&quot;");
}

function sessionRow(row: SessionRow, selected: boolean): string {
  const remote = row.remote === null ? "—" : `${row.remote[0]}:${row.remote[1]}`;
  const flags = [
    row.blocked ? "blocked" : "",
    row.turning ? "turning" : "",
    row.queued > 0 ? `${row.queued} queued` : "",
  ]
    .filter(Boolean)
    .join(", ");
  return (
    `<tr class="session phase-${row.phase}${selected ? " selected" : ""}" data-pad="${row.pad}">` +
    `<td class="pad">${row.pad}</td>` +
    `<td class="phase">${row.phase}</td>` +
    `<td class="remote">${escapeHtml(remote)}</td>` +
    `<td class="tx">${row.tx[0]}:${row.tx[1]}</td>` +
    `<td class="rx">${row.rx[0]}:${row.rx[1]}</td>` +
    `<td class="remaining">${row.tx_remaining}</td>` +
    `<td class="turn">${row.controls_turns ? "this end" : "peer"}</td>` +
    `<td class="flags">${escapeHtml(flags)}</td>` +
    `</tr>`
  );
}

export function renderSessionList(model: ConsoleModel): string {
  if (model.sessions.size === 0) return `<p class="empty">no sessions in the vault</p>`;
  const rows = [...model.sessions.values()]
    .map((r) => sessionRow(r, r.pad === model.selected))
    .join("");
  return (
    `<table class="sessions"><thead><tr>` +
    `<th>pad</th><th>phase</th><th>peer</th><th>tx pg:off</th><th>rx pg:off</th>` +
    `<th>tx bytes left</th><th>turns</th><th></th>` +
    `</tr></thead><tbody>${rows}</tbody></table>`
  );
}

function turnControl(row: VaultRow): string {
  if (row.controls_turns === null) return "—"; // a reserve has no peer
  return row.controls_turns ? "this end" : "peer";
}

export function renderVaultTable(model: ConsoleModel): string {
  if (model.vault === null) return `<p class="empty">no vault report yet (/v)</p>`;
  const rows = model.vault
    .map(
      (r) =>
        `<tr data-pad="${r.pad}">` +
        `<td>${r.pad}</td><td>${r.kb_per_page} KiB</td><td>${r.pages}</td>` +
        `<td>${r.tx_pg}:${r.tx_off}</td><td>${r.rx_pg}:${r.rx_off}</td>` +
        `<td class="turn-control">${turnControl(r)}</td>` +
        `</tr>`,
    )
    .join("");
  return (
    `<table class="vault"><thead><tr>` +
    `<th>pad</th><th>page</th><th>pages</th><th>tx pg:off</th><th>rx pg:off</th>` +
    `<th>turn control</th>` +
    `</tr></thead><tbody>${rows}</tbody></table>`
  );
}

export function renderTranscript(model: ConsoleModel, session: number): string {
  const lines = model.transcripts.get(session) ?? [];
  if (lines.length === 0) return `<p class="empty">nothing yet on pad ${session}</p>`;
  const items = lines
    .map((l) => {
      const cls = [l.who, l.pending ? "pending" : "", l.failed ? "failed" : ""]
        .filter(Boolean)
        .join(" ");
      const mark = l.pending ? " …" : l.failed ? " ✗" : "";
      const body = l.listing
        ? `<pre>${escapeHtml(l.text)}</pre>`
        : escapeHtml(l.text);
      return `<div class="line ${cls}">${body}${mark}</div>`;
    })
    .join("");
  return `<div class="transcript" data-pad="${session}">${items}</div>`;
}

function transferBar(key: TransferKey, t: TransferProgressFrame): string {
  const pct = t.total > 0 ? Math.floor((t.done / t.total) * 100) : 100;
  const label =
    t.state === "done"
      ? t.direction === "in" && t.saved_as !== undefined
        ? `saved as ${t.saved_as}`
        : "done"
      : t.state === "aborted"
        ? "aborted"
        : `${t.done} / ${t.total}`;
  return (
    `<div class="transfer state-${t.state}" data-key="${key}">` +
    `<span class="name">${escapeHtml(t.name)}</span> ` +
    `<span class="dir">${t.direction === "out" ? "→" : "←"} pad ${t.session}</span>` +
    `<div class="bar"><div class="fill" style="width:${pct}%"></div></div>` +
    `<span class="label">${escapeHtml(label)}</span>` +
    `</div>`
  );
}

export function renderTransfers(model: ConsoleModel): string {
  if (model.transfers.size === 0) return "";
  return [...model.transfers.entries()].map(([k, t]) => transferBar(k, t)).join("");
}

export function renderStatusLog(model: ConsoleModel): string {
  const tail = model.statusLog.slice(-40);
  const banner = !model.connected
    ? `<div class="line banner">control connection lost — reload to reconnect</div>`
    : "";
  const skew =
    model.malformed > 0
      ? `<div class="line banner">${model.malformed} frame(s) failed validation ` +
        `(last: ${escapeHtml(model.lastMalformedReason ?? "?")}) — version skew?</div>`
      : "";
  return banner + skew + tail.map((t) => `<div class="line">${escapeHtml(t)}</div>`).join("");
}
