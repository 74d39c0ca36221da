import { describe, expect, it } from "vitest";

import { ConsoleModel } from "../src/model.js";
import {
  renderSessionList,
  renderStatusLog,
  renderTranscript,
  renderTransfers,
  renderVaultTable,
} from "../src/render.js";
import type { MessageStream } from "../src/transport.js";

class FakeStream implements MessageStream {
  sent: string[] = [];
  private lineCbs: ((line: string) => void)[] = [];
  private closeCbs: ((reason?: string) => void)[] = [];

  send(line: string): void {
    this.sent.push(line);
  }
  onLine(cb: (line: string) => void): void {
    this.lineCbs.push(cb);
  }
  onClose(cb: (reason?: string) => void): void {
    this.closeCbs.push(cb);
  }
  close(): void {}

  // test controls
  deliver(frame: object): void {
    for (const cb of this.lineCbs) cb(JSON.stringify(frame));
  }
  drop(reason?: string): void {
    for (const cb of this.closeCbs) cb(reason);
  }
}

function freshPair(): { model: ConsoleModel; stream: FakeStream } {
  const model = new ConsoleModel();
  const stream = new FakeStream();
  model.attach(stream);
  return { model, stream };
}

const ROW1 = {
  pad: 1, phase: "idle", blocked: false, queued: 0, remote: null,
  controls_turns: false, tx: [0, 0], rx: [1, 0], tx_remaining: 8192,
  turning: false,
};

describe("session list", () => {
  it("a snapshot replaces, never merges", () => {
    const { model, stream } = freshPair();
    stream.deliver({ rows: [ROW1, { ...ROW1, pad: 2 }], v: 1, event: "session-list" });
    expect([...model.sessions.keys()]).toEqual([1, 2]);
    stream.deliver({ rows: [{ ...ROW1, pad: 2, phase: "connected" }], v: 1, event: "session-list" });
    expect([...model.sessions.keys()]).toEqual([2]);
    expect(model.sessions.get(2)?.phase).toBe("connected");
  });

  it("renders one row per session with the turn owner spelled out", () => {
    const { model, stream } = freshPair();
    stream.deliver({
      rows: [ROW1, { ...ROW1, pad: 2, controls_turns: true, remote: ["10.0.0.9", 700] }],
      v: 1, event: "session-list",
    });
    const html = renderSessionList(model);
    expect(html).toContain(`data-pad="1"`);
    expect(html).toContain(`data-pad="2"`);
    expect(html).toContain("10.0.0.9:700");
    expect(html).toContain("peer");
    expect(html).toContain("this end");
  });
});

describe("chat", () => {
  it("sends the chat form and confirms on the echo", () => {
    const { model, stream } = freshPair();
    model.sendChat(1, "hello");
    expect(stream.sent).toEqual([`{"chat":"hello","session":1}`]);
    let html = renderTranscript(model, 1);
    expect(html).toContain("pending");
    stream.deliver({ session: 1, text: "hello", v: 1, event: "chat-echo" });
    html = renderTranscript(model, 1);
    expect(html).not.toContain("pending");
    expect(html).toContain("hello");
  });

  it("a leading slash rides inside the chat form untouched", () => {
    // the daemon keeps it literal for {"chat": ...}; no console-side escaping
    const { model, stream } = freshPair();
    model.sendChat(1, "/etc/hosts is a file");
    expect(stream.sent).toEqual([`{"chat":"/etc/hosts is a file","session":1}`]);
  });

  it("marks the pending line failed when the daemon says blocked", () => {
    const { model, stream } = freshPair();
    model.sendChat(1, "too eager");
    stream.deliver({ error: "blocked", text: "pad 1: previous packet still awaiting ACK", v: 1, event: "error" });
    const html = renderTranscript(model, 1);
    expect(html).toContain("failed");
    expect(model.lastError?.error).toBe("blocked");
    // the resend goes through cleanly
    model.sendChat(1, "too eager");
    stream.deliver({ session: 1, text: "too eager", v: 1, event: "chat-echo" });
    expect(renderTranscript(model, 1)).not.toContain("pending");
  });

  it("keeps peer lines and listings apart", () => {
    const { model, stream } = freshPair();
    stream.deliver({ session: 3, text: "hi there", v: 1, event: "chat-in" });
    stream.deliver({ session: 3, text: "a.txt 12\nb.bin 90", listing: true, v: 1, event: "chat-in" });
    const html = renderTranscript(model, 3);
    expect(html).toContain("hi there");
    expect(html).toContain("<pre>");
    expect(html).toContain("b.bin 90");
  });

  it("shows an echo it never sent as someone else's line, not a confirmation", () => {
    const { model, stream } = freshPair();
    model.sendChat(1, "mine");
    stream.deliver({ session: 1, text: "typed at the terminal", v: 1, event: "chat-echo" });
    const html = renderTranscript(model, 1);
    expect(html).toContain("typed at the terminal");
    expect(html).toContain("pending"); // "mine" is still waiting for its own echo
  });
});

describe("vault table", () => {
  it("maps the control column to this end / peer / —", () => {
    const { model, stream } = freshPair();
    model.requestVault();
    expect(stream.sent).toEqual([`{"command":"/v"}`]);
    stream.deliver({
      rows: [
        { pad: 1, kb_per_page: 8, pages: 6, tx_pg: 3, rx_pg: 2, tx_off: 0, rx_off: 0, controls_turns: true },
        { pad: 2, kb_per_page: 8, pages: 6, tx_pg: 0, rx_pg: 1, tx_off: 5, rx_off: 9, controls_turns: false },
        { pad: 9, kb_per_page: 4, pages: 20, tx_pg: 0, rx_pg: 20, tx_off: 0, rx_off: 0, controls_turns: null },
      ],
      v: 1, event: "vault-rows",
    });
    const html = renderVaultTable(model);
    expect(html).toContain("turn control");
    expect(html).toContain("this end");
    expect(html).toContain("peer");
    expect(html).toContain("—");
  });
});

describe("transfers", () => {
  it("tracks live progress and the final resting place", () => {
    const { model, stream } = freshPair();
    model.sendFile(1, "/tmp/payload.bin");
    expect(stream.sent).toEqual([`{"command":"/1"}`, `{"command":"/s/tmp/payload.bin"}`]);
    const frame = (done: number, state: string) => ({
      session: 1, direction: "out", name: "payload.bin", done, total: 3000,
      state, v: 1, event: "transfer-progress",
    });
    stream.deliver(frame(1415, "active"));
    expect(renderTransfers(model)).toContain("1415 / 3000");
    stream.deliver(frame(2830, "active"));
    expect(renderTransfers(model)).toContain("2830 / 3000");
    stream.deliver(frame(3000, "done"));
    const html = renderTransfers(model);
    expect(html).toContain("state-done");
    expect(html).not.toContain("1415"); // bars show the latest frame only

    stream.deliver({
      session: 2, direction: "in", name: "notes.txt", done: 10, total: 10,
      state: "done", saved_as: "/rx/notes.txt", v: 1, event: "transfer-progress",
    });
    expect(renderTransfers(model)).toContain("saved as /rx/notes.txt");
  });
});

describe("hygiene", () => {
  it("counts malformed frames instead of displaying them", () => {
    const { model, stream } = freshPair();
    const bad = [
      "not json at all",
      `{"v": 2, "event": "status", "text": "future"}`,
      `{"v": 1, "event": "status", "text": "x", "surprise": true}`,
      `{"v": 1, "event": "made-up"}`,
    ];
    for (const line of bad) model.ingest(line);
    expect(model.malformed).toBe(4);
    expect(renderStatusLog(model)).toContain("4 frame(s) failed validation");
    // nothing leaked into the visible state
    expect(model.statusLog.some((l) => l.includes("future"))).toBe(false);
    void stream;
  });

  it("statuses with a session land in that transcript too", () => {
    const { model, stream } = freshPair();
    stream.deliver({ session: 2, text: "probing on pad 2", v: 1, event: "status" });
    expect(renderTranscript(model, 2)).toContain("probing on pad 2");
    expect(renderStatusLog(model)).toContain("[pad 2] probing on pad 2");
  });

  it("a reconnect starts from the fresh snapshot, not leftovers", () => {
    const { model, stream } = freshPair();
    stream.deliver({ rows: [ROW1], v: 1, event: "session-list" });
    stream.deliver({
      rows: [{ pad: 1, kb_per_page: 8, pages: 6, tx_pg: 0, rx_pg: 1, tx_off: 0, rx_off: 0, controls_turns: false }],
      v: 1, event: "vault-rows",
    });
    stream.drop("daemon restarted");
    expect(model.connected).toBe(false);
    expect(renderStatusLog(model)).toContain("control connection lost");

    const again = new FakeStream();
    model.attach(again);
    expect(model.connected).toBe(true);
    expect(model.sessions.size).toBe(0); // cleared; the snapshot will refill it
    expect(model.vault).toBeNull();
    again.deliver({ rows: [{ ...ROW1, pad: 4 }], v: 1, event: "session-list" });
    expect([...model.sessions.keys()]).toEqual([4]);
  });

  it("refuses to send while detached", () => {
    const model = new ConsoleModel();
    expect(() => model.requestVault()).toThrow(/not attached/);
  });
});
