// Node-only transport: NDJSON over TCP, straight to the daemon's control
// port. This is what the test suite uses (no browser, no bridge hop); it is
// not part of the browser bundle.

import net from "node:net";

import { LineSplitter, type MessageStream } from "./transport.js";

export class NdjsonTcpStream implements MessageStream {
  private sock: net.Socket;
  private splitter = new LineSplitter();
  private lineCbs: ((line: string) => void)[] = [];
  private closeCbs: ((reason?: string) => void)[] = [];
  private closed = false;

  private constructor(sock: net.Socket) {
    this.sock = sock;
    sock.setEncoding("utf8");
    sock.on("data", (chunk: string) => {
      for (const line of this.splitter.push(chunk)) {
        for (const cb of this.lineCbs) cb(line);
      }
    });
    const fireClose = (reason?: string) => {
      if (this.closed) return;
      this.closed = true;
      for (const cb of this.closeCbs) cb(reason);
    };
    sock.on("close", () => fireClose());
    sock.on("error", (err) => fireClose(err.message));
  }

  static connect(host: string, port: number): Promise<NdjsonTcpStream> {
    return new Promise((resolve, reject) => {
      const sock = net.createConnection({ host, port }, () => {
        sock.removeListener("error", reject);
        resolve(new NdjsonTcpStream(sock));
      });
      sock.once("error", reject);
    });
  }

  send(line: string): void {
    this.sock.write(line + "\n");
  }

  onLine(cb: (line: string) => void): void {
    this.lineCbs.push(cb);
  }

  onClose(cb: (reason?: string) => void): void {
    this.closeCbs.push(cb);
  }

  close(): void {
    this.sock.destroy();
  }
}
