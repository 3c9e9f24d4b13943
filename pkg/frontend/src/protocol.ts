/**
 * Wire protocol frames shared with the sync server.
 *
 * One JSON object per WebSocket text message:
 *   { "msg_id": number, "kind": string, "payload": object }
 * Every client request is answered by exactly one ACK or ERR correlated via
 * msg_id; EVENT frames are pushed for subscriptions.
 */

export type TreeValue = boolean | number | string | TreeBranch;
export interface TreeBranch {
  [key: string]: TreeValue;
}

export const KIND = {
  AUTH: "AUTH",
  PUT: "PUT",
  UPDATE: "UPDATE",
  GET: "GET",
  SUBSCRIBE: "SUBSCRIBE",
  UNSUBSCRIBE: "UNSUBSCRIBE",
  PING: "PING",
  EVENT: "EVENT",
  ACK: "ACK",
  ERR: "ERR",
  PONG: "PONG",
} as const;
export type Kind = (typeof KIND)[keyof typeof KIND];

export interface WireMessage {
  kind: Kind;
  msg_id: number;
  payload: Record<string, unknown>;
}

export interface EventPayload {
  sub_id: number;
  revision: number;
  path: string;
  value: TreeValue | null;
  absent: boolean;
  server_time_ms: number;
}

export interface AckPayload {
  msg_id: number;
  server_time_ms: number;
  revision?: number;
  sub_id?: number;
  value?: TreeValue | null;
  absent?: boolean;
}

export interface ErrPayload {
  msg_id: number;
  code: string;
  reason: string;
}

export class ProtocolError extends Error {}

/** Serialize a frame as one canonical JSON text message. */
export function encode(msg: WireMessage): string {
  return JSON.stringify({ msg_id: msg.msg_id, kind: msg.kind, payload: msg.payload });
}

/** Parse and structurally validate an incoming frame. */
export function decode(text: string): WireMessage {
  let raw: unknown;
  try {
    raw = JSON.parse(text);
  } catch {
    throw new ProtocolError(`invalid JSON frame: ${text.slice(0, 80)}`);
  }
  if (typeof raw !== "object" || raw === null || Array.isArray(raw)) {
    throw new ProtocolError("frame is not an object");
  }
  const obj = raw as Record<string, unknown>;
  const kind = obj.kind;
  const msgId = obj.msg_id ?? 0;
  const payload = obj.payload ?? {};
  if (typeof kind !== "string" || typeof msgId !== "number" || typeof payload !== "object" || payload === null) {
    throw new ProtocolError("frame fields have wrong types");
  }
  return { kind: kind as Kind, msg_id: msgId, payload: payload as Record<string, unknown> };
}

export function auth(msgId: number, token: string): WireMessage {
  return { kind: KIND.AUTH, msg_id: msgId, payload: { token } };
}

export function put(msgId: number, path: string, value: TreeValue): WireMessage {
  return { kind: KIND.PUT, msg_id: msgId, payload: { path, value } };
}

export function get(msgId: number, path: string): WireMessage {
  return { kind: KIND.GET, msg_id: msgId, payload: { path } };
}

export function subscribe(msgId: number, path: string): WireMessage {
  return { kind: KIND.SUBSCRIBE, msg_id: msgId, payload: { path } };
}

export function ping(msgId: number): WireMessage {
  return { kind: KIND.PING, msg_id: msgId, payload: {} };
}

export function isEvent(msg: WireMessage): msg is WireMessage & { payload: EventPayload & Record<string, unknown> } {
  return msg.kind === KIND.EVENT;
}
