// Console state: everything the UI shows, built purely from validated
// frames plus the operator's own actions. Rendering is elsewhere (render.ts)
// and dumb; anything resembling a decision lives here.

import {
  parseFrame,
  type Frame,
  type SessionRow,
  type VaultRow,
  type TransferProgressFrame,
} from "./schema.js";
import type { MessageStream } from "./transport.js";

export interface TranscriptLine {
  who: "operator" | "peer" | "daemon";
  text: string;
  /** operator line sent but not yet echoed back by the daemon */
  pending?: boolean;
  /** operator line the daemon rejected (stop-and-wait "blocked"); resend it */
  failed?: boolean;
  /** peer line that is a directory listing, not chat */
  listing?: boolean;
}

export type TransferKey = `${number}:${"out" | "in"}`;

const STATUS_LOG_CAP = 200;

export class ConsoleModel {
  sessions = new Map<number, SessionRow>();
  transcripts = new Map<number, TranscriptLine[]>();
  vault: VaultRow[] | null = null;
  /** latest progress frame per session+direction — what a progress bar shows */
  transfers = new Map<TransferKey, TransferProgressFrame>();
  statusLog: string[] = [];
  lastError: { error: string; text: string; session?: number } | null = null;
  /** frames that failed validation; anything nonzero is a version-skew alarm */
  malformed = 0;
  lastMalformedReason: string | null = null;
  connected = false;

  /** mirror of the daemon-side session selection for this control connection */
  selected: number | null = null;

  private stream: MessageStream | null = null;
  private pendingChat = new Map<number, TranscriptLine>();
  private listeners: (() => void)[] = [];

  onChange(cb: () => void): void {
    this.listeners.push(cb);
  }

  private changed(): void {
    for (const cb of this.listeners) cb();
  }

  attach(stream: MessageStream): void {
    // every fresh control connection opens with a session-list snapshot, so
    // state from before a reconnect is dropped wholesale, not patched up
    this.stream = stream;
    this.connected = true;
    this.sessions.clear();
    this.vault = null;
    this.transfers.clear();
    this.selected = null;
    this.pendingChat.clear();
    stream.onLine((line) => this.ingest(line));
    stream.onClose((reason) => {
      this.connected = false;
      this.note(`control connection lost${reason ? `: ${reason}` : ""}`);
      this.changed();
    });
    this.changed();
  }

  /** One NDJSON line from the daemon. */
  ingest(line: string): void {
    const res = parseFrame(line);
    if (!res.ok) {
      this.malformed += 1;
      this.lastMalformedReason = res.reason;
      this.changed();
      return;
    }
    this.apply(res.frame);
    this.changed();
  }

  private apply(f: Frame): void {
    switch (f.event) {
      case "session-list": {
        this.sessions.clear();
        for (const row of f.rows) this.sessions.set(row.pad, row);
        break;
      }
      case "vault-rows": {
        this.vault = f.rows;
        break;
      }
      case "chat-in": {
        this.transcript(f.session).push({
          who: "peer",
          text: f.text,
          ...(f.listing ? { listing: true } : {}),
        });
        break;
      }
      case "chat-echo": {
        // confirms the oldest pending line for that session when the text
        // matches; otherwise it was sent from another console or the terminal
        const pending = this.pendingChat.get(f.session);
        if (pending && pending.text === f.text) {
          pending.pending = false;
          this.pendingChat.delete(f.session);
        } else {
          this.transcript(f.session).push({ who: "operator", text: f.text });
        }
        break;
      }
      case "status": {
        this.note(f.session != null ? `[pad ${f.session}] ${f.text}` : f.text);
        if (f.session != null) {
          this.transcript(f.session).push({ who: "daemon", text: f.text });
        }
        break;
      }
      case "error": {
        this.lastError = { error: f.error, text: f.text, ...(f.session !== undefined ? { session: f.session } : {}) };
        this.note(`error (${f.error}): ${f.text}`);
        if (f.error === "blocked") {
          // the daemon refused the last command; if a chat was pending on the
          // selected session, that is the one that bounced
          const sel = this.selected;
          const pending = sel !== null ? this.pendingChat.get(sel) : undefined;
          if (pending) {
            pending.pending = false;
            pending.failed = true;
            this.pendingChat.delete(sel as number);
          }
        }
        break;
      }
      case "transfer-progress": {
        this.transfers.set(`${f.session}:${f.direction}`, f);
        break;
      }
    }
  }

  private transcript(session: number): TranscriptLine[] {
    let lines = this.transcripts.get(session);
    if (lines === undefined) {
      lines = [];
      this.transcripts.set(session, lines);
    }
    return lines;
  }

  private note(text: string): void {
    this.statusLog.push(text);
    if (this.statusLog.length > STATUS_LOG_CAP) {
      this.statusLog.splice(0, this.statusLog.length - STATUS_LOG_CAP);
    }
  }

  // ---- operator actions ----------------------------------------------------------
  // Inbound control messages are JSON too: {"command": "<operator line>"} or
  // {"chat": text, "session": N} — the chat form selects the session and keeps
  // a leading slash literal, so chat text never needs escaping here.

  private sendMessage(msg: object): void {
    if (this.stream === null || !this.connected) throw new Error("not attached to a daemon");
    this.stream.send(JSON.stringify(msg));
  }

  private command(line: string): void {
    this.sendMessage({ command: line });
  }

  /** Select a session (the daemon keeps one selection per control connection). */
  selectSession(session: number): void {
    this.command(`/${session}`);
    this.selected = session;
    this.changed();
  }

  private ensureSelected(session: number): void {
    if (this.selected !== session) this.selectSession(session);
  }

  sendChat(session: number, text: string): void {
    this.sendMessage({ chat: text, session });
    this.selected = session; // the chat form selects on the daemon side too
    const line: TranscriptLine = { who: "operator", text, pending: true };
    this.pendingChat.set(session, line);
    this.transcript(session).push(line);
    this.changed();
  }

  connectSession(session: number): void {
    this.ensureSelected(session);
    this.command("/c");
  }

  sendFile(session: number, path: string): void {
    this.ensureSelected(session);
    this.command(`/s${path}`);
  }

  abortTransfer(session: number): void {
    this.ensureSelected(session);
    this.command("/a");
  }

  requestVault(): void {
    this.command("/v");
  }

  quit(): void {
    this.command("/q");
  }

  /** Pass one raw operator line through as a command (command box). */
  raw(line: string): void {
    const m = /^\/(\d+)$/.exec(line);
    if (m) {
      // keep the selection mirror honest when the operator types /N directly
      this.selectSession(Number(m[1]));
      return;
    }
    this.command(line);
  }
}
