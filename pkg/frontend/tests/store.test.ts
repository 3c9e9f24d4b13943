import { afterEach, beforeEach, describe, expect, it, vi } from "vitest";

import { SyncConnection } from "../src/connection.js";
import { DashboardStore } from "../src/store.js";
import { AckPayload, EventPayload } from "../src/protocol.js";
import { FakeServer, settle } from "./helpers.js";

function makeEvent(path: string, value: EventPayload["value"], revision = 1): EventPayload {
  return { sub_id: 1, revision, path, value, absent: value === null, server_time_ms: 0 };
}

describe("DashboardStore event routing", () => {
  const noChannel = { request: () => Promise.reject(new Error("unused")) };

  it("populates gauges and LEDs from a root snapshot", () => {
    const store = new DashboardStore(noChannel);
    store.applyEvent(
      makeEvent("/", {
        sensors: { temperature: 23.2, humidity: 72.2, distance: 17.68 },
        leds: { led1: true, led2: false },
        metadata: { status: { mode: "normal" } },
      }, 9),
    );
    expect(store.sensors).toEqual({ temperature: 23.2, humidity: 72.2, distance: 17.68 });
    expect(store.leds.led1.value).toBe(true);
    expect(store.leds.led2.value).toBe(false);
    expect(store.deviceStatus).toEqual({ mode: "normal" });
    expect(store.revision).toBe(9);
  });

  it("updates a single sensor leaf", () => {
    const store = new DashboardStore(noChannel);
    store.applyEvent(makeEvent("/sensors/temperature", 25.5));
    expect(store.sensors.temperature).toBe(25.5);
    expect(store.sensors.humidity).toBeNull();
  });

  it("clears a sensor when its value becomes absent", () => {
    const store = new DashboardStore(noChannel);
    store.applyEvent(makeEvent("/sensors/temperature", 25.5));
    store.applyEvent(makeEvent("/sensors/temperature", null, 2));
    expect(store.sensors.temperature).toBeNull();
  });

  it("revision never decreases on out-of-order snapshots", () => {
    const store = new DashboardStore(noChannel);
    store.applyEvent(makeEvent("/sensors/temperature", 1.0, 5));
    store.applyEvent(makeEvent("/sensors/humidity", 2.0, 3));
    expect(store.revision).toBe(5);
  });

  it("ignores non-boolean LED values", () => {
    const store = new DashboardStore(noChannel);
    store.applyEvent(makeEvent("/leds/led1", 42 as unknown as boolean));
    expect(store.leds.led1.value).toBe(false);
  });
});

describe("optimistic LED toggles", () => {
  beforeEach(() => vi.useFakeTimers());
  afterEach(() => vi.useRealTimers());

  function manualChannel() {
    const calls: { resolve: (a: AckPayload) => void; reject: (e: Error) => void }[] = [];
    return {
      calls,
      request: () =>
        new Promise<AckPayload>((resolve, reject) => {
          calls.push({ resolve, reject });
        }),
    };
  }

  it("flips immediately and marks the LED pending", () => {
    const channel = manualChannel();
    const store = new DashboardStore(channel);
    void store.toggle("led1");
    expect(store.leds.led1).toEqual({ value: true, pending: true });
  });

  it("clears pending when the confirming event arrives", async () => {
    const channel = manualChannel();
    const store = new DashboardStore(channel);
    void store.toggle("led1");
    channel.calls[0].resolve({ msg_id: 1, server_time_ms: 0, revision: 1 });
    store.applyEvent(makeEvent("/leds/led1", true, 1));
    expect(store.leds.led1).toEqual({ value: true, pending: false });
  });

  it("keeps pending when an event carries a different value", () => {
    const channel = manualChannel();
    const store = new DashboardStore(channel);
    void store.toggle("led1"); // wants true
    store.applyEvent(makeEvent("/leds/led1", false, 1)); // someone else's write
    expect(store.leds.led1.pending).toBe(true);
  });

  it("rolls back immediately when the write is rejected", async () => {
    const channel = manualChannel();
    const store = new DashboardStore(channel);
    void store.toggle("led1");
    channel.calls[0].reject(new Error("DENIED"));
    await settle();
    expect(store.leds.led1).toEqual({ value: false, pending: false });
  });

  it("rolls back after the revert window with no confirmation", () => {
    const channel = manualChannel();
    const store = new DashboardStore(channel, { revertMs: 5000 });
    void store.toggle("led2");
    vi.advanceTimersByTime(4999);
    expect(store.leds.led2).toEqual({ value: true, pending: true });
    vi.advanceTimersByTime(1);
    expect(store.leds.led2).toEqual({ value: false, pending: false });
  });

  it("ignores a second toggle while one is pending", () => {
    const channel = manualChannel();
    const store = new DashboardStore(channel);
    void store.toggle("led1");
    void store.toggle("led1");
    expect(channel.calls.length).toBe(1);
    expect(store.leds.led1.value).toBe(true);
  });
});

describe("end to end against the fake server", () => {
  beforeEach(() => vi.useFakeTimers());
  afterEach(() => vi.useRealTimers());

  function dashboard(server: FakeServer) {
    const connection = new SyncConnection({
      url: "ws://test",
      token: "good-token",
      subscriptions: ["/"],
      socketFactory: () => server.connect(),
    });
    const store = new DashboardStore(connection);
    connection.onEvent = (ev) => store.applyEvent(ev);
    connection.connect();
    return store;
  }

  it("a toggle is confirmed by the echoed event and clears pending", async () => {
    const server = new FakeServer();
    const store = dashboard(server);
    await settle(20);

    // The fake server echoes the event synchronously, so by the time the
    // toggle promise settles the confirmation has already landed.
    await store.toggle("led1");
    await settle(10);
    expect(store.leds.led1).toEqual({ value: true, pending: false });
    expect(server.tree.get("/leds/led1")).toBe(true);
  });

  it("two concurrent dashboards converge after each commit", async () => {
    const server = new FakeServer();
    const a = dashboard(server);
    const b = dashboard(server);
    await settle(20);

    await a.toggle("led1");
    await settle(10);
    expect(a.leds.led1.value).toBe(true);
    expect(b.leds.led1.value).toBe(true);
    expect(a.revision).toBe(b.revision);

    await b.toggle("led2");
    await settle(10);
    expect(a.leds.led2.value).toBe(true);
    expect(b.leds.led2.value).toBe(true);

    server.externalPut("/sensors/temperature", 24.5);
    await settle(10);
    expect(a.sensors.temperature).toBe(24.5);
    expect(b.sensors.temperature).toBe(24.5);
    expect(a.revision).toBe(b.revision);
  });

  it("a late joiner receives the current state as its initial snapshot", async () => {
    const server = new FakeServer();
    const a = dashboard(server);
    await settle(20);
    await a.toggle("led1");
    server.externalPut("/sensors/humidity", 70.0);
    await settle(10);

    const b = dashboard(server);
    await settle(20);
    expect(b.leds.led1.value).toBe(true);
    expect(b.sensors.humidity).toBe(70.0);
  });
});
