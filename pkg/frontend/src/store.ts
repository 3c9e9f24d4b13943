/**
 * Dashboard state fed by subscription events, with optimistic LED control.
 *
 * Toggling an LED flips the local value immediately and marks it pending;
 * the pending flag clears when the server's confirming EVENT arrives. If the
 * write is rejected or no confirmation shows up within the revert window,
 * the LED rolls back to its last confirmed value.
 */

import { AckPayload, EventPayload, TreeBranch, TreeValue, WireMessage, put } from "./protocol.js";

export type LedTarget = "led1" | "led2";

export interface LedView {
  value: boolean;
  pending: boolean;
}

export interface SensorView {
  temperature: number | null;
  humidity: number | null;
  distance: number | null;
}

export interface RequestChannel {
  request(make: (msgId: number) => WireMessage): Promise<AckPayload>;
}

export interface StoreOptions {
  /** How long an unconfirmed optimistic toggle survives before rollback. */
  revertMs?: number;
  setTimer?: (fn: () => void, ms: number) => unknown;
  clearTimer?: (handle: unknown) => void;
}

interface PendingToggle {
  wanted: boolean;
  previous: boolean;
  timer: unknown;
}

export class DashboardStore {
  sensors: SensorView = { temperature: null, humidity: null, distance: null };
  leds: Record<LedTarget, LedView> = {
    led1: { value: false, pending: false },
    led2: { value: false, pending: false },
  };
  deviceStatus: TreeBranch | null = null;
  revision = 0;
  onChange: () => void = () => {};

  private pendingToggles = new Map<LedTarget, PendingToggle>();
  private readonly revertMs: number;
  private readonly setTimer: (fn: () => void, ms: number) => unknown;
  private readonly clearTimer: (handle: unknown) => void;

  constructor(private readonly channel: RequestChannel, options: StoreOptions = {}) {
    this.revertMs = options.revertMs ?? 5000;
    this.setTimer = options.setTimer ?? ((fn, ms) => setTimeout(fn, ms));
    this.clearTimer = options.clearTimer ?? ((h) => clearTimeout(h as ReturnType<typeof setTimeout>));
  }

  /** Route one subscription event into the view state. */
  applyEvent(ev: EventPayload): void {
    if (ev.revision > this.revision) this.revision = ev.revision;
    this.applyPath(ev.path, ev.absent ? null : ev.value);
    this.onChange();
  }

  /** Optimistically flip an LED and send the write. */
  async toggle(target: LedTarget): Promise<void> {
    const led = this.leds[target];
    if (led.pending) return; // one in-flight toggle per LED
    const wanted = !led.value;
    const previous = led.value;
    led.value = wanted;
    led.pending = true;
    const timer = this.setTimer(() => this.rollback(target), this.revertMs);
    this.pendingToggles.set(target, { wanted, previous, timer });
    this.onChange();
    try {
      await this.channel.request((id) => put(id, `/leds/${target}`, wanted));
    } catch {
      this.rollback(target);
    }
  }

  private rollback(target: LedTarget): void {
    const pending = this.pendingToggles.get(target);
    if (!pending) return;
    this.clearTimer(pending.timer);
    this.pendingToggles.delete(target);
    const led = this.leds[target];
    led.value = pending.previous;
    led.pending = false;
    this.onChange();
  }

  private applyPath(path: string, value: TreeValue | null): void {
    const parts = path === "/" ? [] : path.replace(/^\//, "").split("/");
    if (parts.length === 0) {
      this.applyRoot(value);
      return;
    }
    const [head, leaf] = [parts[0], parts[1]];
    if (head === "sensors") {
      if (parts.length === 1) this.applySensors(value);
      else this.applySensorLeaf(leaf, value);
    } else if (head === "leds") {
      if (parts.length === 1) this.applyLeds(value);
      else this.applyLedLeaf(leaf, value);
    } else if (head === "metadata") {
      if (parts.length === 1) {
        const branch = asBranch(value);
        if (branch && "status" in branch) this.deviceStatus = asBranch(branch.status);
      } else if (leaf === "status") {
        this.deviceStatus = asBranch(value);
      }
    }
  }

  private applyRoot(value: TreeValue | null): void {
    const doc = asBranch(value);
    this.applySensors(doc?.sensors ?? null);
    this.applyLeds(doc?.leds ?? null);
    const metadata = asBranch(doc?.metadata ?? null);
    this.deviceStatus = metadata ? asBranch(metadata.status ?? null) : null;
  }

  private applySensors(value: TreeValue | null | undefined): void {
    const branch = asBranch(value ?? null);
    for (const key of ["temperature", "humidity", "distance"] as const) {
      const v = branch?.[key];
      this.sensors[key] = typeof v === "number" ? v : null;
    }
  }

  private applySensorLeaf(name: string, value: TreeValue | null): void {
    if (name === "temperature" || name === "humidity" || name === "distance") {
      this.sensors[name] = typeof value === "number" ? value : null;
    }
  }

  private applyLeds(value: TreeValue | null | undefined): void {
    const branch = asBranch(value ?? null);
    this.applyLedLeaf("led1", branch?.led1 ?? null);
    this.applyLedLeaf("led2", branch?.led2 ?? null);
  }

  private applyLedLeaf(name: string, value: TreeValue | null): void {
    if (name !== "led1" && name !== "led2") return;
    if (typeof value !== "boolean") return;
    const target = name as LedTarget;
    const led = this.leds[target];
    led.value = value;
    const pending = this.pendingToggles.get(target);
    if (pending && value === pending.wanted) {
      // Server confirmed our own write: the optimistic state is now real.
      this.clearTimer(pending.timer);
      this.pendingToggles.delete(target);
      led.pending = false;
    }
  }
}

function asBranch(value: TreeValue | null | undefined): TreeBranch | null {
  return typeof value === "object" && value !== null ? (value as TreeBranch) : null;
}
