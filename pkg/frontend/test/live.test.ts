// The console against live daemons: a hub carrying two pads and two peer
// daemons, all real processes exchanging real UDP datagrams on loopback.
// The console attaches to the hub's control port and must
//   - render the session list,
//   - complete a chat round trip,
//   - run /v and display the turn-control column,
//   - drive a file transfer to completion with live progress.
//
// Operating note baked into every driver here: the link is stop-and-wait.
// Right after "connected" (and right after any send) the previous packet's
// ACK may still be in flight, and the daemon answers {"error":"blocked"} —
// the fix is always to wait a beat and resubmit, never to give up.

import { spawn, spawnSync, type ChildProcess } from "node:child_process";
import crypto from "node:crypto";
import dgram from "node:dgram";
import fs from "node:fs";
import net from "node:net";
import os from "node:os";
import path from "node:path";
import { fileURLToPath } from "node:url";
import { afterAll, beforeAll, describe, expect, it } from "vitest";

import { ConsoleModel } from "../src/model.js";
import {
  renderSessionList,
  renderTranscript,
  renderTransfers,
  renderVaultTable,
} from "../src/render.js";
import { NdjsonTcpStream } from "../src/tcp.js";

const HERE = path.dirname(fileURLToPath(import.meta.url));
const REPO_SRC = path.resolve(HERE, "..", "..", "src");
const PYTHON = process.env.PADLINK_PYTHON ?? "python3";
const DEADMAN_S = 180; // daemons self-destruct if teardown never reaches them

function sleep(ms: number): Promise<void> {
  return new Promise((r) => setTimeout(r, ms));
}

function freeTcpPort(): Promise<number> {
  return new Promise((resolve, reject) => {
    const srv = net.createServer();
    srv.once("error", reject);
    srv.listen(0, "127.0.0.1", () => {
      const port = (srv.address() as net.AddressInfo).port;
      srv.close(() => resolve(port));
    });
  });
}

function freeUdpPort(): Promise<number> {
  return new Promise((resolve, reject) => {
    const sock = dgram.createSocket("udp4");
    sock.once("error", reject);
    sock.bind(0, "127.0.0.1", () => {
      const port = sock.address().port;
      sock.close(() => resolve(port));
    });
  });
}

interface Daemon {
  name: string;
  proc: ChildProcess;
  output: string[];
  exited: Promise<number | null>;
}

function cli(args: string[], cwd: string): { status: number | null; out: string } {
  const res = spawnSync(PYTHON, ["-m", "padlink.cli", ...args], {
    cwd,
    env: { ...process.env, PYTHONPATH: REPO_SRC },
    encoding: "utf8",
  });
  return { status: res.status, out: `${res.stdout}${res.stderr}` };
}

function spawnDaemon(name: string, conf: string, ctlPort: number, cwd: string): Daemon {
  const proc = spawn(
    PYTHON,
    ["-m", "padlink.cli", "run", conf, "--no-stdin",
     "--control-port", String(ctlPort), "--max-seconds", String(DEADMAN_S)],
    { cwd, env: { ...process.env, PYTHONPATH: REPO_SRC }, stdio: ["ignore", "pipe", "pipe"] },
  );
  const output: string[] = [];
  proc.stdout?.setEncoding("utf8");
  proc.stderr?.setEncoding("utf8");
  proc.stdout?.on("data", (c: string) => output.push(c));
  proc.stderr?.on("data", (c: string) => output.push(c));
  const exited = new Promise<number | null>((resolve) => {
    proc.on("exit", (code) => resolve(code));
  });
  return { name, proc, output, exited };
}

async function connectCtl(port: number, d: Daemon): Promise<NdjsonTcpStream> {
  for (let tries = 0; tries < 100; tries++) {
    if (d.proc.exitCode !== null) {
      throw new Error(`${d.name} exited ${d.proc.exitCode} before accepting control:\n${d.output.join("")}`);
    }
    try {
      return await NdjsonTcpStream.connect("127.0.0.1", port);
    } catch {
      await sleep(100);
    }
  }
  throw new Error(`${d.name}: control port ${port} never opened`);
}

type AnyFrame = Record<string, unknown>;

/** Raw control client for the simulated peers (the console uses the model). */
class PeerDriver {
  frames: AnyFrame[] = [];
  private waiters: (() => void)[] = [];

  constructor(
    public stream: NdjsonTcpStream,
    public name: string,
  ) {
    stream.onLine((line) => {
      this.frames.push(JSON.parse(line) as AnyFrame);
      for (const w of this.waiters.splice(0)) w();
    });
  }

  cmd(line: string): void {
    this.stream.send(JSON.stringify({ command: line }));
  }

  async waitFor(
    pred: (f: AnyFrame) => boolean,
    what: string,
    timeoutMs = 20_000,
    fromIndex = 0,
  ): Promise<AnyFrame> {
    let scanned = fromIndex;
    const deadline = Date.now() + timeoutMs;
    for (;;) {
      while (scanned < this.frames.length) {
        const f = this.frames[scanned++] as AnyFrame;
        if (pred(f)) return f;
      }
      if (Date.now() > deadline) {
        const tail = this.frames.slice(-5).map((f) => JSON.stringify(f)).join("\n  ");
        throw new Error(`${this.name}: gave up waiting for ${what}; recent frames:\n  ${tail}`);
      }
      await new Promise<void>((r) => {
        this.waiters.push(r);
        setTimeout(r, 200);
      });
    }
  }

  /** Send a line, resubmitting while the daemon answers "blocked". */
  async cmdRetry(line: string, donePred: (f: AnyFrame) => boolean, what: string): Promise<AnyFrame> {
    const deadline = Date.now() + 30_000;
    for (;;) {
      const mark = this.frames.length;
      this.cmd(line);
      const f = await this.waitFor(
        (g) => donePred(g) || g.event === "error",
        what,
        Math.max(1_000, deadline - Date.now()),
        mark,
      );
      if (f.event !== "error") return f;
      if (f.error !== "blocked") {
        throw new Error(`${this.name}: '${line}' failed: ${JSON.stringify(f)}`);
      }
      if (Date.now() > deadline) throw new Error(`${this.name}: '${line}' still blocked`);
      await sleep(150);
    }
  }
}

function waitModel(model: ConsoleModel, pred: () => boolean, what: string, timeoutMs = 20_000): Promise<void> {
  return new Promise((resolve, reject) => {
    let settled = false;
    const finish = () => {
      if (!settled && pred()) {
        settled = true;
        clearTimeout(timer);
        resolve();
      }
    };
    const timer = setTimeout(() => {
      if (!settled) {
        settled = true;
        reject(new Error(`console: gave up waiting for ${what}`));
      }
    }, timeoutMs);
    model.onChange(finish);
    finish();
  });
}

/** Chat from the console, resubmitting while the daemon says blocked. */
async function chatFromConsole(model: ConsoleModel, session: number, text: string): Promise<void> {
  const deadline = Date.now() + 30_000;
  const mine = () =>
    (model.transcripts.get(session) ?? []).filter((l) => l.who === "operator" && l.text === text);
  for (;;) {
    model.sendChat(session, text);
    const attempt = mine().length - 1; // the line sendChat just pushed
    await waitModel(
      model,
      () => mine()[attempt]?.pending === false,
      `echo of '${text}'`,
      Math.max(1_000, deadline - Date.now()),
    );
    if (!mine()[attempt]?.failed) return; // confirmed by the echo
    if (Date.now() > deadline) throw new Error(`chat '${text}' stayed blocked`);
    await sleep(150);
  }
}

/** Start a file transfer from the console, resubmitting while blocked. */
async function sendFileFromConsole(model: ConsoleModel, session: number, filePath: string): Promise<void> {
  const deadline = Date.now() + 30_000;
  const accepted = () => model.statusLog.some((l) => l.includes(`sending file ${path.basename(filePath)}`));
  for (;;) {
    const errBefore = model.lastError;
    model.sendFile(session, filePath);
    await waitModel(
      model,
      () => accepted() || (model.lastError !== errBefore && model.lastError?.error === "blocked"),
      "the transfer to start",
      Math.max(1_000, deadline - Date.now()),
    );
    if (accepted()) return;
    if (Date.now() > deadline) throw new Error("file send stayed blocked");
    await sleep(150);
  }
}

// ---- the scenario -------------------------------------------------------------------

describe("console against a live daemon with two peers", () => {
  let work: string;
  const daemons: Daemon[] = [];
  const streams: NdjsonTcpStream[] = [];

  beforeAll(() => {
    work = fs.mkdtempSync(path.join(os.tmpdir(), "console-live-"));
  });

  afterAll(async () => {
    for (const s of streams) s.close();
    for (const d of daemons) {
      if (d.proc.exitCode === null) d.proc.kill("SIGKILL");
    }
    await sleep(100);
    fs.rmSync(work, { recursive: true, force: true });
  });

  it(
    "renders sessions, chats round trip, shows /v, and drives a transfer",
    async () => {
      // -- pads and configs: hub holds pad 1 (to peer A) and pad 2 (to peer B)
      const PAGE_BYTES = 8 * 1024;
      const PAGES = 6;
      const padBytes = PAGE_BYTES * PAGES;
      fs.writeFileSync(path.join(work, "entropy.bin"), crypto.randomBytes(2 * padBytes));

      let r = cli(
        ["install", "entropy.bin", "hub.vault", "peerA.vault",
         "--pad", "1", "--kb-per-page", "8", "--pages", String(PAGES)],
        work,
      );
      expect(r.status, r.out).toBe(0);
      r = cli(
        ["install", "entropy.bin", "hub.vault", "peerB.vault",
         "--pad", "2", "--kb-per-page", "8", "--pages", String(PAGES),
         "--append", "--source-offset", String(padBytes)],
        work,
      );
      expect(r.status, r.out).toBe(0);

      const [udpHub, udpA, udpB] = [await freeUdpPort(), await freeUdpPort(), await freeUdpPort()];
      const [ctlHub, ctlA, ctlB] = [await freeTcpPort(), await freeTcpPort(), await freeTcpPort()];

      fs.mkdirSync(path.join(work, "rxA"));
      fs.writeFileSync(
        path.join(work, "hub.conf"),
        `Server\nListenOn ${udpHub}\nVault "${path.join(work, "hub.vault")}"\n`,
      );
      fs.writeFileSync(
        path.join(work, "peerA.conf"),
        `ListenOn ${udpA}\nVault "${path.join(work, "peerA.vault")}"\nUser 1\n` +
          `ServerAddr "127.0.0.1"\nServerPort ${udpHub}\nRxFiles "${path.join(work, "rxA")}"\n`,
      );
      fs.writeFileSync(
        path.join(work, "peerB.conf"),
        `ListenOn ${udpB}\nVault "${path.join(work, "peerB.vault")}"\nUser 2\n` +
          `ServerAddr "127.0.0.1"\nServerPort ${udpHub}\n`,
      );

      const hub = spawnDaemon("hub", "hub.conf", ctlHub, work);
      const peerA = spawnDaemon("peerA", "peerA.conf", ctlA, work);
      const peerB = spawnDaemon("peerB", "peerB.conf", ctlB, work);
      daemons.push(hub, peerA, peerB);

      // -- the console proper: model + TCP control stream to the hub
      const model = new ConsoleModel();
      const hubStream = await connectCtl(ctlHub, hub);
      streams.push(hubStream);
      model.attach(hubStream);

      await waitModel(model, () => model.sessions.size === 2, "the session-list snapshot");
      let html = renderSessionList(model);
      expect(html).toContain(`data-pad="1"`);
      expect(html).toContain(`data-pad="2"`);
      expect(html).toContain("idle");

      // -- both peers dial in; the console sees the phases flip
      const a = new PeerDriver(await connectCtl(ctlA, peerA), "peerA");
      const b = new PeerDriver(await connectCtl(ctlB, peerB), "peerB");
      streams.push(a.stream, b.stream);

      a.cmd("/1");
      a.cmd("/c");
      await a.waitFor(
        (f) =>
          f.event === "session-list" &&
          (f.rows as AnyFrame[]).some((row) => row.pad === 1 && row.phase === "connected"),
        "pad 1 to connect",
      );
      b.cmd("/2");
      b.cmd("/c");
      await b.waitFor(
        (f) =>
          f.event === "session-list" &&
          (f.rows as AnyFrame[]).some((row) => row.pad === 2 && row.phase === "connected"),
        "pad 2 to connect",
      );
      await waitModel(
        model,
        () => [1, 2].every((p) => model.sessions.get(p)?.phase === "connected"),
        "both sessions to show connected",
      );
      html = renderSessionList(model);
      expect(html.match(/connected/g)?.length).toBeGreaterThanOrEqual(2);

      // -- chat round trip on pad 1
      await chatFromConsole(model, 1, "hello from the console");
      await a.waitFor(
        (f) => f.event === "chat-in" && f.text === "hello from the console",
        "the console's chat to arrive",
      );
      await a.cmdRetry(
        "hi back from peer A",
        (f) => f.event === "chat-echo" && f.text === "hi back from peer A",
        "the reply to be accepted",
      );
      await waitModel(
        model,
        () => (model.transcripts.get(1) ?? []).some((l) => l.who === "peer" && l.text === "hi back from peer A"),
        "the reply to arrive",
      );
      html = renderTranscript(model, 1);
      expect(html).toContain("hello from the console");
      expect(html).toContain("hi back from peer A");

      // -- /v: the vault table with the turn-control column
      model.requestVault();
      await waitModel(model, () => model.vault !== null, "the vault report");
      html = renderVaultTable(model);
      expect(html).toContain("turn control");
      // the hub took role a on both pads, so the peers own the page turns
      expect(html.match(/<td class="turn-control">peer<\/td>/g)?.length).toBe(2);

      // -- file transfer hub -> peer A, watching live progress frames
      const payload = crypto.randomBytes(3_000);
      const payloadPath = path.join(work, "payload.bin");
      fs.writeFileSync(payloadPath, payload);

      const seen: { done: number; state: string }[] = [];
      model.onChange(() => {
        const t = model.transfers.get("1:out");
        if (t && (seen.length === 0 || seen[seen.length - 1]?.done !== t.done
                  || seen[seen.length - 1]?.state !== t.state)) {
          seen.push({ done: t.done, state: t.state });
        }
      });
      await sendFileFromConsole(model, 1, payloadPath);
      await waitModel(
        model,
        () => model.transfers.get("1:out")?.state === "done",
        "the transfer to finish",
        60_000,
      );

      const final = model.transfers.get("1:out");
      expect(final?.done).toBe(3_000);
      expect(final?.total).toBe(3_000);
      const actives = seen.filter((s) => s.state === "active").map((s) => s.done);
      expect(actives.length, `progress seen: ${JSON.stringify(seen)}`).toBeGreaterThanOrEqual(2);
      expect([...actives].sort((x, y) => x - y)).toEqual(actives); // monotone
      html = renderTransfers(model);
      expect(html).toContain("state-done");
      expect(html).toContain("payload.bin");

      // peer A's daemon reports where it put the file; the bytes must match
      const saved = await a.waitFor(
        (f) => f.event === "transfer-progress" && f.direction === "in" && f.state === "done",
        "peer A to finish receiving",
        60_000,
      );
      const savedAs = path.resolve(work, saved.saved_as as string);
      expect(saved.saved_as).toBeTruthy();
      expect(fs.readFileSync(savedAs).equals(payload), "received bytes differ").toBe(true);

      // the console never saw a frame outside the published schema
      expect(model.malformed, model.lastMalformedReason ?? "").toBe(0);

      // -- teardown through the protocol, not signals:
      // peer B detaches first (its /q alone would strand it: a QUIT needs a
      // live hub to ACK it), then the console quits hub and peer A as a pair.
      await b.cmdRetry(
        "/d",
        (f) => f.event === "status" && typeof f.text === "string" && f.text.includes("disconnect requested"),
        "peer B to start disconnecting",
      );
      await b.waitFor(
        (f) =>
          f.event === "session-list" &&
          (f.rows as AnyFrame[]).some((row) => row.pad === 2 && row.phase === "disconnected"),
        "peer B to finish disconnecting",
      );
      b.cmd("/q");
      expect(await peerB.exited).toBe(0);

      await waitModel(
        model,
        () => model.sessions.get(2)?.phase === "disconnected",
        "the hub to notice peer B left",
      );

      model.selectSession(1);
      model.quit();
      await waitModel(
        model,
        () => model.statusLog.some((l) => l.includes("quit requested at both endpoints")),
        "the quit handshake to start",
      );
      expect(await hub.exited).toBe(0);
      expect(await peerA.exited).toBe(0);
    },
    120_000,
  );
});
