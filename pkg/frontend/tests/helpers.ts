/**
 * Test doubles: an in-memory WebSocket pair and a miniature sync server
 * speaking the same frame protocol, good enough to exercise the dashboard's
 * connection, store, and optimistic-update flows without a network.
 */

import { WebSocketLike } from "../src/connection.js";
import { KIND, TreeValue, WireMessage, decode, encode } from "../src/protocol.js";

export class FakeSocket implements WebSocketLike {
  onopen: (() => void) | null = null;
  onmessage: ((ev: { data: unknown }) => void) | null = null;
  onclose: (() => void) | null = null;
  onerror: (() => void) | null = null;
  sentFrames: WireMessage[] = [];
  closed = false;

  constructor(private readonly onSend: (msg: WireMessage, socket: FakeSocket) => void) {}

  send(data: string): void {
    const msg = decode(data);
    this.sentFrames.push(msg);
    this.onSend(msg, this);
  }

  close(): void {
    if (this.closed) return;
    this.closed = true;
    this.onclose?.();
  }

  /** Simulate the server pushing one frame to this client. */
  deliver(msg: WireMessage): void {
    this.onmessage?.({ data: encode(msg) });
  }

  /** Simulate the transport opening. */
  open(): void {
    this.onopen?.();
  }

  /** Simulate an abrupt server-side disconnect. */
  drop(): void {
    this.close();
  }
}

interface FakeSession {
  socket: FakeSocket;
  authenticated: boolean;
  subscriptions: Map<number, string>;
}

/** A tiny in-memory sync server: auth, subscribe with initial snapshot,
 * PUT with revisioned fan-out. Enough semantics for dashboard tests. */
export class FakeServer {
  revision = 0;
  tree = new Map<string, TreeValue>(); // leaf path -> value
  private sessions: FakeSession[] = [];
  private nextSub = 1;
  private timeMs = 1_000;

  connect(): FakeSocket {
    const session: FakeSession = {
      socket: new FakeSocket((msg, s) => this.handle(msg, s)),
      authenticated: false,
      subscriptions: new Map(),
    };
    this.sessions.push(session);
    queueMicrotask(() => session.socket.open());
    return session.socket;
  }

  private session(socket: FakeSocket): FakeSession {
    const found = this.sessions.find((s) => s.socket === socket);
    if (!found) throw new Error("unknown socket");
    return found;
  }

  private handle(msg: WireMessage, socket: FakeSocket): void {
    const session = this.session(socket);
    const reply = (m: WireMessage) => socket.deliver(m);
    this.timeMs += 1;

    if (msg.kind === KIND.AUTH) {
      if (msg.payload.token === "good-token") {
        session.authenticated = true;
        reply(ack(msg.msg_id, this.timeMs));
      } else {
        reply(err(msg.msg_id, "DENIED", "BadToken"));
      }
      return;
    }
    if (!session.authenticated) {
      reply(err(msg.msg_id, "AUTH_REQUIRED", "authenticate first"));
      return;
    }
    if (msg.kind === KIND.SUBSCRIBE) {
      const path = String(msg.payload.path);
      const subId = this.nextSub++;
      session.subscriptions.set(subId, path);
      reply(ack(msg.msg_id, this.timeMs, { sub_id: subId, revision: this.revision }));
      reply(this.eventFor(subId, path));
      return;
    }
    if (msg.kind === KIND.PUT) {
      const path = String(msg.payload.path);
      const value = msg.payload.value as TreeValue;
      if (path.startsWith("/leds/") && typeof value !== "boolean") {
        reply(err(msg.msg_id, "DENIED", "MustBeBoolean"));
        return;
      }
      this.revision += 1;
      this.tree.set(path, value);
      reply(ack(msg.msg_id, this.timeMs, { revision: this.revision }));
      this.broadcast(path, value);
      return;
    }
    reply(err(msg.msg_id, "MALFORMED", `unhandled kind ${msg.kind}`));
  }

  /** Push a change that did not originate from any client (e.g. the device). */
  externalPut(path: string, value: TreeValue): void {
    this.revision += 1;
    this.timeMs += 1;
    this.tree.set(path, value);
    this.broadcast(path, value);
  }

  private broadcast(path: string, value: TreeValue): void {
    for (const session of this.sessions) {
      if (session.socket.closed) continue;
      for (const [subId, subPath] of session.subscriptions) {
        if (path === subPath || path.startsWith(subPath === "/" ? "/" : subPath + "/")) {
          session.socket.deliver(event(subId, this.revision, path, value, this.timeMs));
        }
      }
    }
  }

  private eventFor(subId: number, path: string): WireMessage {
    if (this.tree.has(path)) {
      return event(subId, this.revision, path, this.tree.get(path)!, this.timeMs);
    }
    // Root-ish subscriptions get a nested snapshot built from the leaves.
    const doc: Record<string, TreeValue> = {};
    for (const [leaf, value] of this.tree) {
      if (path !== "/" && !leaf.startsWith(path + "/")) continue;
      const parts = (path === "/" ? leaf : leaf.slice(path.length)).replace(/^\//, "").split("/");
      let node = doc;
      for (const seg of parts.slice(0, -1)) {
        node = (node[seg] as Record<string, TreeValue>) ?? (node[seg] = {});
      }
      node[parts[parts.length - 1]] = value;
    }
    const absent = Object.keys(doc).length === 0;
    return {
      kind: KIND.EVENT,
      msg_id: 0,
      payload: {
        sub_id: subId,
        revision: this.revision,
        path,
        value: absent ? null : doc,
        absent,
        server_time_ms: this.timeMs,
      },
    };
  }
}

export function ack(
  msgId: number,
  serverTimeMs: number,
  extra: Record<string, unknown> = {},
): WireMessage {
  return { kind: KIND.ACK, msg_id: msgId, payload: { msg_id: msgId, server_time_ms: serverTimeMs, ...extra } };
}

export function err(msgId: number, code: string, reason: string): WireMessage {
  return { kind: KIND.ERR, msg_id: msgId, payload: { msg_id: msgId, code, reason } };
}

export function event(
  subId: number,
  revision: number,
  path: string,
  value: TreeValue,
  serverTimeMs: number,
): WireMessage {
  return {
    kind: KIND.EVENT,
    msg_id: 0,
    payload: { sub_id: subId, revision, path, value, absent: false, server_time_ms: serverTimeMs },
  };
}

/** Flush pending microtasks so socket callbacks and promises settle. */
export async function settle(rounds = 5): Promise<void> {
  for (let i = 0; i < rounds; i++) {
    await Promise.resolve();
  }
}
