// Transport: anything that moves whole NDJSON lines between the console and
// the daemon. The browser build talks WebSocket to `padlink bridge`; tests
// talk TCP straight to the control port (see tcp.ts). Model code only ever
// sees this interface.

export interface MessageStream {
  /** Queue one operator line (no trailing newline). */
  send(line: string): void;
  onLine(cb: (line: string) => void): void;
  onClose(cb: (reason?: string) => void): void;
  close(): void;
}

/**
 * Carry-buffer newline splitter.
 *
 * Every complete line is surfaced the moment its newline arrives; a partial
 * tail waits for the next chunk. Callers must consume everything this
 * returns before waiting for more input — a reader that stops at the first
 * interesting line and then blocks has the rest of the burst sitting in its
 * own buffer while the daemon looks hung.
 */
export class LineSplitter {
  private buf = "";

  push(chunk: string): string[] {
    this.buf += chunk;
    const lines: string[] = [];
    let nl: number;
    while ((nl = this.buf.indexOf("\n")) >= 0) {
      const line = this.buf.slice(0, nl).replace(/\r$/, "");
      this.buf = this.buf.slice(nl + 1);
      if (line !== "") lines.push(line);
    }
    return lines;
  }

  /** Whatever is left without a newline (useful at close). */
  tail(): string {
    return this.buf;
  }
}

/**
 * WebSocket transport for the browser, pointed at `padlink bridge`.
 *
 * The bridge relays one control line per text message, but nothing here
 * depends on that: frames are fed through the splitter with a newline
 * appended, so a message carrying several lines (or none) also works.
 */
export class WsStream implements MessageStream {
  private ws: WebSocket;
  private splitter = new LineSplitter();
  private lineCbs: ((line: string) => void)[] = [];
  private closeCbs: ((reason?: string) => void)[] = [];
  private closed = false;

  constructor(url: string) {
    this.ws = new WebSocket(url);
    this.ws.onmessage = (ev) => {
      if (typeof ev.data !== "string") return; // the bridge never sends binary
      for (const line of this.splitter.push(ev.data + "\n")) {
        for (const cb of this.lineCbs) cb(line);
      }
    };
    const fireClose = (reason?: string) => {
      if (this.closed) return;
      this.closed = true;
      for (const cb of this.closeCbs) cb(reason);
    };
    this.ws.onclose = (ev) => fireClose(ev.reason || `closed (${ev.code})`);
    // not every runtime follows a pre-handshake failure with a close event,
    // so error must count as one too (guarded: whichever lands first wins)
    this.ws.onerror = () => fireClose("connection failed");
  }

  send(line: string): void {
    this.ws.send(line);
  }

  onLine(cb: (line: string) => void): void {
    this.lineCbs.push(cb);
  }

  onClose(cb: (reason?: string) => void): void {
    this.closeCbs.push(cb);
  }

  close(): void {
    this.ws.close();
  }
}
