// Control API schema, version 1.
//
// The daemon streams newline-delimited JSON frames; every frame carries
// `v: 1` and an `event` discriminator. The console validates each frame
// against the field tables below and REFUSES anything that does not match —
// a field name outside the table means the two ends disagree about the
// schema, and quietly ignoring it would hide exactly the skew this check
// exists to surface. Rejected frames are counted, never displayed.

export const SCHEMA_VERSION = 1;

export type Addr = [host: string, port: number];

export type Phase = "idle" | "probing" | "connected" | "disconnected" | "halted";

export interface SessionRow {
  pad: number;
  phase: Phase;
  blocked: boolean;
  queued: number;
  remote: Addr | null;
  controls_turns: boolean;
  tx: [page: number, offset: number];
  rx: [page: number, offset: number];
  tx_remaining: number;
  turning: boolean;
}

export interface VaultRow {
  pad: number;
  kb_per_page: number;
  pages: number;
  tx_pg: number;
  rx_pg: number;
  tx_off: number;
  rx_off: number;
  /** true: this end turns pages; false: the peer does; null: an uncarved reserve. */
  controls_turns: boolean | null;
}

export interface SessionListFrame { v: 1; event: "session-list"; rows: SessionRow[] }
export interface VaultRowsFrame { v: 1; event: "vault-rows"; rows: VaultRow[] }
export interface ChatInFrame { v: 1; event: "chat-in"; session: number; text: string; listing?: boolean }
export interface ChatEchoFrame { v: 1; event: "chat-echo"; session: number; text: string }
export interface StatusFrame { v: 1; event: "status"; text: string; session?: number | null; elapsed?: number; code?: number }
export interface ErrorFrame { v: 1; event: "error"; error: string; text: string; session?: number }
export interface TransferProgressFrame {
  v: 1;
  event: "transfer-progress";
  session: number;
  direction: "out" | "in";
  name: string;
  done: number;
  total: number;
  state: "active" | "done" | "aborted";
  /** present only on direction "in" with state "done": where the file landed. */
  saved_as?: string;
}

export type Frame =
  | SessionListFrame
  | VaultRowsFrame
  | ChatInFrame
  | ChatEchoFrame
  | StatusFrame
  | ErrorFrame
  | TransferProgressFrame;

export type ParseResult = { ok: true; frame: Frame } | { ok: false; reason: string };

// ---- field checkers ---------------------------------------------------------------
// A checker returns null when the value is acceptable, otherwise a complaint
// fragment; the caller prefixes it with the field's location.

type Check = (v: unknown) => string | null;

const isInt: Check = (v) =>
  typeof v === "number" && Number.isInteger(v) ? null : "expected an integer";
const isNum: Check = (v) => (typeof v === "number" && Number.isFinite(v) ? null : "expected a number");
const isStr: Check = (v) => (typeof v === "string" ? null : "expected a string");
const isBool: Check = (v) => (typeof v === "boolean" ? null : "expected a boolean");

function oneOf(...allowed: string[]): Check {
  return (v) =>
    typeof v === "string" && allowed.includes(v)
      ? null
      : `expected one of ${allowed.join("/")}`;
}

const intOrNull: Check = (v) => (v === null ? null : isInt(v));
const boolOrNull: Check = (v) => (v === null ? null : isBool(v));

/** [page, offset] — two integers exactly. */
const pagePair: Check = (v) => {
  if (!Array.isArray(v) || v.length !== 2) return "expected [page, offset]";
  if (!Number.isInteger(v[0]) || !Number.isInteger(v[1])) return "expected [page, offset]";
  return null;
};

/** null or ["host", port]. */
const addrOrNull: Check = (v) => {
  if (v === null) return null;
  if (!Array.isArray(v) || v.length !== 2) return "expected null or [host, port]";
  if (typeof v[0] !== "string" || !Number.isInteger(v[1])) return "expected null or [host, port]";
  return null;
};

interface FieldSpec {
  required: Record<string, Check>;
  optional: Record<string, Check>;
}

/**
 * Check `obj` against a field table: every required name present and valid,
 * optional names valid when present, no name outside the table at all.
 */
function checkFields(obj: Record<string, unknown>, spec: FieldSpec, where: string): string | null {
  for (const [name, check] of Object.entries(spec.required)) {
    if (!(name in obj)) return `${where}: missing field '${name}'`;
    const bad = check(obj[name]);
    if (bad) return `${where}.${name}: ${bad}`;
  }
  for (const name of Object.keys(obj)) {
    if (name in spec.required) continue;
    const check = spec.optional[name];
    if (check === undefined) return `${where}: unexpected field '${name}'`;
    const bad = check(obj[name]);
    if (bad) return `${where}.${name}: ${bad}`;
  }
  return null;
}

const SESSION_ROW: FieldSpec = {
  required: {
    pad: isInt,
    phase: oneOf("idle", "probing", "connected", "disconnected", "halted"),
    blocked: isBool,
    queued: isInt,
    remote: addrOrNull,
    controls_turns: isBool,
    tx: pagePair,
    rx: pagePair,
    tx_remaining: isInt,
    turning: isBool,
  },
  optional: {},
};

const VAULT_ROW: FieldSpec = {
  required: {
    pad: isInt,
    kb_per_page: isInt,
    pages: isInt,
    tx_pg: isInt,
    rx_pg: isInt,
    tx_off: isInt,
    rx_off: isInt,
    controls_turns: boolOrNull,
  },
  optional: {},
};

function rowsOf(rowSpec: FieldSpec, what: string): Check {
  return (v) => {
    if (!Array.isArray(v)) return `expected an array of ${what}s`;
    for (let i = 0; i < v.length; i++) {
      const row = v[i];
      if (typeof row !== "object" || row === null || Array.isArray(row))
        return `${what}[${i}]: expected an object`;
      const bad = checkFields(row as Record<string, unknown>, rowSpec, `${what}[${i}]`);
      if (bad) return bad;
    }
    return null;
  };
}

// The version and event fields are handled before this table is consulted,
// so they appear here only to be tolerated by the unknown-name scan.
const STAMP: Record<string, Check> = { v: isInt, event: isStr };

const FRAME_SPECS: Record<Frame["event"], FieldSpec> = {
  "session-list": {
    required: { ...STAMP, rows: rowsOf(SESSION_ROW, "session") },
    optional: {},
  },
  "vault-rows": {
    required: { ...STAMP, rows: rowsOf(VAULT_ROW, "vault-row") },
    optional: {},
  },
  "chat-in": {
    required: { ...STAMP, session: isInt, text: isStr },
    optional: { listing: isBool },
  },
  "chat-echo": {
    required: { ...STAMP, session: isInt, text: isStr },
    optional: {},
  },
  status: {
    required: { ...STAMP, text: isStr },
    optional: { session: intOrNull, elapsed: isNum, code: isInt },
  },
  error: {
    required: { ...STAMP, error: isStr, text: isStr },
    optional: { session: isInt },
  },
  "transfer-progress": {
    required: {
      ...STAMP,
      session: isInt,
      direction: oneOf("out", "in"),
      name: isStr,
      done: isInt,
      total: isInt,
      state: oneOf("active", "done", "aborted"),
    },
    optional: { saved_as: isStr },
  },
};

/** Parse and validate one NDJSON line from the daemon. */
export function parseFrame(line: string): ParseResult {
  let raw: unknown;
  try {
    raw = JSON.parse(line);
  } catch {
    return { ok: false, reason: "not JSON" };
  }
  if (typeof raw !== "object" || raw === null || Array.isArray(raw))
    return { ok: false, reason: "frame is not an object" };
  const obj = raw as Record<string, unknown>;
  if (obj.v !== SCHEMA_VERSION)
    return { ok: false, reason: `schema version ${String(obj.v)} (this console speaks ${SCHEMA_VERSION})` };
  const event = obj.event;
  if (typeof event !== "string") return { ok: false, reason: "missing event" };
  const spec = FRAME_SPECS[event as Frame["event"]];
  if (spec === undefined) return { ok: false, reason: `unknown event '${event}'` };
  const bad = checkFields(obj, spec, event);
  if (bad) return { ok: false, reason: bad };
  return { ok: true, frame: obj as unknown as Frame };
}
