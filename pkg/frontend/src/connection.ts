/**
 * WebSocket session against the sync server: request/ack correlation,
 * subscription event dispatch, and automatic reconnect with exponential
 * backoff. The socket factory and timers are injectable so the whole state
 * machine is testable without a network.
 */

import {
  AckPayload,
  ErrPayload,
  EventPayload,
  KIND,
  WireMessage,
  auth,
  decode,
  encode,
  subscribe,
} from "./protocol.js";

/** The subset of the browser WebSocket API the connection relies on. */
export interface WebSocketLike {
  send(data: string): void;
  close(): void;
  onopen: (() => void) | null;
  onmessage: ((ev: { data: unknown }) => void) | null;
  onclose: (() => void) | null;
  onerror: (() => void) | null;
}

export type ConnectionStatus = "connecting" | "open" | "closed";

export interface ConnectionOptions {
  url: string;
  token: string;
  /** Paths subscribed on every (re)connect. */
  subscriptions: string[];
  socketFactory?: (url: string) => WebSocketLike;
  setTimer?: (fn: () => void, ms: number) => unknown;
  clearTimer?: (handle: unknown) => void;
  reconnectBaseMs?: number;
  reconnectCapMs?: number;
  requestTimeoutMs?: number;
}

export class RequestError extends Error {
  constructor(public code: string, reason: string) {
    super(`${code}: ${reason}`);
  }
}

interface Pending {
  resolve: (ack: AckPayload) => void;
  reject: (err: Error) => void;
  timer: unknown;
}

export class SyncConnection {
  onEvent: (ev: EventPayload) => void = () => {};
  onStatusChange: (status: ConnectionStatus) => void = () => {};

  private readonly opts: Required<ConnectionOptions>;
  private socket: WebSocketLike | null = null;
  private pending = new Map<number, Pending>();
  private nextId = 1;
  private reconnectDelayMs: number;
  private reconnectTimer: unknown = null;
  private stopped = false;
  private status: ConnectionStatus = "closed";

  constructor(options: ConnectionOptions) {
    this.opts = {
      socketFactory: (url) => new WebSocket(url) as unknown as WebSocketLike,
      setTimer: (fn, ms) => setTimeout(fn, ms),
      clearTimer: (h) => clearTimeout(h as ReturnType<typeof setTimeout>),
      reconnectBaseMs: 500,
      reconnectCapMs: 8000,
      requestTimeoutMs: 10_000,
      ...options,
    };
    this.reconnectDelayMs = this.opts.reconnectBaseMs;
  }

  get currentStatus(): ConnectionStatus {
    return this.status;
  }

  connect(): void {
    this.stopped = false;
    this.open();
  }

  close(): void {
    this.stopped = true;
    if (this.reconnectTimer !== null) {
      this.opts.clearTimer(this.reconnectTimer);
      this.reconnectTimer = null;
    }
    this.socket?.close();
    this.socket = null;
    this.setStatus("closed");
  }

  /** Send one request frame; resolves with its ACK, rejects on ERR/timeout. */
  request(make: (msgId: number) => WireMessage): Promise<AckPayload> {
    const msgId = this.nextId++;
    const msg = make(msgId);
    return new Promise<AckPayload>((resolve, reject) => {
      if (this.socket === null || this.status !== "open") {
        reject(new RequestError("DISCONNECTED", "no open session"));
        return;
      }
      const timer = this.opts.setTimer(() => {
        this.pending.delete(msgId);
        reject(new RequestError("TIMEOUT", `no reply to msg ${msgId}`));
      }, this.opts.requestTimeoutMs);
      this.pending.set(msgId, { resolve, reject, timer });
      this.socket.send(encode(msg));
    });
  }

  private open(): void {
    this.setStatus("connecting");
    const socket = this.opts.socketFactory(this.opts.url);
    this.socket = socket;
    socket.onopen = () => void this.handshake(socket);
    socket.onmessage = (ev) => this.handleFrame(String(ev.data));
    socket.onerror = () => {};
    socket.onclose = () => this.handleClose(socket);
  }

  private async handshake(socket: WebSocketLike): Promise<void> {
    // Authenticate and re-establish subscriptions before reporting "open";
    // requests are correlated by msg_id so replies route normally.
    this.setStatus("open");
    try {
      await this.request((id) => auth(id, this.opts.token));
      for (const path of this.opts.subscriptions) {
        await this.request((id) => subscribe(id, path));
      }
      this.reconnectDelayMs = this.opts.reconnectBaseMs; // healthy session
    } catch {
      socket.close();
    }
  }

  private handleFrame(text: string): void {
    let msg: WireMessage;
    try {
      msg = decode(text);
    } catch {
      return; // tolerate garbage frames from proxies
    }
    if (msg.kind === KIND.EVENT) {
      this.onEvent(msg.payload as unknown as EventPayload);
      return;
    }
    if (msg.kind === KIND.ACK || msg.kind === KIND.ERR || msg.kind === KIND.PONG) {
      const correlated = (msg.payload as { msg_id?: number }).msg_id ?? msg.msg_id;
      const pending = this.pending.get(correlated);
      if (!pending) return;
      this.pending.delete(correlated);
      this.opts.clearTimer(pending.timer);
      if (msg.kind === KIND.ERR) {
        const err = msg.payload as unknown as ErrPayload;
        pending.reject(new RequestError(err.code, err.reason));
      } else {
        pending.resolve(msg.payload as unknown as AckPayload);
      }
    }
  }

  private handleClose(socket: WebSocketLike): void {
    if (this.socket !== socket) return; // stale socket from a previous attempt
    this.socket = null;
    for (const [, p] of this.pending) {
      this.opts.clearTimer(p.timer);
      p.reject(new RequestError("DISCONNECTED", "socket closed"));
    }
    this.pending.clear();
    this.setStatus("closed");
    if (this.stopped) return;
    this.reconnectTimer = this.opts.setTimer(() => {
      this.reconnectTimer = null;
      this.open();
    }, this.reconnectDelayMs);
    this.reconnectDelayMs = Math.min(this.reconnectDelayMs * 2, this.opts.reconnectCapMs);
  }

  private setStatus(status: ConnectionStatus): void {
    if (status !== this.status) {
      this.status = status;
      this.onStatusChange(status);
    }
  }
}
