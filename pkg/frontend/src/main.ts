/**
 * Dashboard entry point: wires the connection and store to the DOM.
 *
 * Query parameters: ?server=ws://host:port&token=<token>
 */

import { Series, polylinePoints } from "./chart.js";
import { SyncConnection } from "./connection.js";
import { DashboardStore, LedTarget } from "./store.js";

const params = new URLSearchParams(window.location.search);
const serverUrl = params.get("server") ?? "ws://127.0.0.1:8788";
const token = params.get("token") ?? "user-tok";

const connection = new SyncConnection({
  url: serverUrl,
  token,
  subscriptions: ["/"],
});
const store = new DashboardStore(connection);
const temperatureSeries = new Series(300);

connection.onEvent = (ev) => {
  store.applyEvent(ev);
  if (ev.path === "/" || ev.path.startsWith("/sensors")) {
    const t = store.sensors.temperature;
    if (t !== null) temperatureSeries.push(Date.now(), t);
  }
};

function el(id: string): HTMLElement {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing element #${id}`);
  return node;
}

function fmt(value: number | null, unit: string): string {
  return value === null ? "--" : `${value.toFixed(1)} ${unit}`;
}

function render(): void {
  el("gauge-temperature").textContent = fmt(store.sensors.temperature, "°C");
  el("gauge-humidity").textContent = fmt(store.sensors.humidity, "%");
  el("gauge-distance").textContent = fmt(store.sensors.distance, "cm");
  el("revision").textContent = String(store.revision);

  for (const target of ["led1", "led2"] as LedTarget[]) {
    const led = store.leds[target];
    const button = el(`btn-${target}`);
    button.textContent = `${target}: ${led.value ? "ON" : "OFF"}${led.pending ? " …" : ""}`;
    button.classList.toggle("on", led.value);
    button.classList.toggle("pending", led.pending);
  }

  const status = store.deviceStatus;
  el("device-status").textContent = status ? JSON.stringify(status) : "(no status yet)";
  el("chart-line").setAttribute("points", polylinePoints(temperatureSeries, 600, 160));
}

store.onChange = render;
connection.onStatusChange = (status) => {
  el("conn-status").textContent = status;
  el("conn-status").className = `status ${status}`;
  render();
};

el("btn-led1").addEventListener("click", () => void store.toggle("led1"));
el("btn-led2").addEventListener("click", () => void store.toggle("led2"));

connection.connect();
render();
