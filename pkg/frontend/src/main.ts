// Browser entry point. Wires a WebSocket (via `padlink bridge`) to the model
// and repaints the four panels on every change. The page is static; there is
// no build-time templating, just the renderers.

import { ConsoleModel } from "./model.js";
import {
  renderSessionList,
  renderStatusLog,
  renderTranscript,
  renderTransfers,
  renderVaultTable,
} from "./render.js";
import { WsStream } from "./transport.js";

function el(id: string): HTMLElement {
  const e = document.getElementById(id);
  if (e === null) throw new Error(`missing #${id} in index.html`);
  return e;
}

function wsUrl(): string {
  const fromQuery = new URLSearchParams(location.search).get("ws");
  if (fromQuery) return fromQuery;
  // default: a bridge on the same host, conventional port
  return `ws://${location.hostname || "127.0.0.1"}:8791/`;
}

function boot(): void {
  const model = new ConsoleModel();
  const sessionsEl = el("sessions");
  const vaultEl = el("vault");
  const transcriptEl = el("transcript");
  const transfersEl = el("transfers");
  const logEl = el("log");
  const input = el("command") as HTMLInputElement;

  const repaint = () => {
    sessionsEl.innerHTML = renderSessionList(model);
    vaultEl.innerHTML = renderVaultTable(model);
    transcriptEl.innerHTML =
      model.selected !== null
        ? renderTranscript(model, model.selected)
        : `<p class="empty">select a session (click a row or type /N)</p>`;
    transfersEl.innerHTML = renderTransfers(model);
    logEl.innerHTML = renderStatusLog(model);
    logEl.scrollTop = logEl.scrollHeight;
    transcriptEl.scrollTop = transcriptEl.scrollHeight;
  };
  model.onChange(repaint);

  sessionsEl.addEventListener("click", (ev) => {
    const row = (ev.target as HTMLElement).closest("tr[data-pad]");
    if (row !== null) model.selectSession(Number((row as HTMLElement).dataset.pad));
  });

  input.addEventListener("keydown", (ev) => {
    if (ev.key !== "Enter") return;
    const line = input.value;
    input.value = "";
    if (line === "") return;
    try {
      if (line.startsWith("/") && !line.startsWith("//")) {
        model.raw(line);
      } else if (model.selected !== null) {
        // plain text is chat; model handles the // escape itself
        model.sendChat(model.selected, line.startsWith("//") ? line.slice(1) : line);
      } else {
        model.raw(line); // let the daemon complain about the missing selection
      }
    } catch (err) {
      logEl.innerHTML += `<div class="line banner">${String(err)}</div>`;
    }
  });

  model.attach(new WsStream(wsUrl()));
  repaint();
}

boot();
