/**
 * Minimal time-series buffer and SVG polyline rendering for the dashboard
 * chart — no charting library needed for one line and two axis labels.
 */

export interface Sample {
  t: number;
  v: number;
}

/** Fixed-capacity time series that drops the oldest sample on overflow. */
export class Series {
  private samples: Sample[] = [];

  constructor(readonly capacity: number = 300) {
    if (capacity < 1) throw new Error("capacity must be positive");
  }

  push(t: number, v: number): void {
    this.samples.push({ t, v });
    if (this.samples.length > this.capacity) this.samples.shift();
  }

  values(): readonly Sample[] {
    return this.samples;
  }

  get length(): number {
    return this.samples.length;
  }

  min(): number | null {
    return this.samples.length ? Math.min(...this.samples.map((s) => s.v)) : null;
  }

  max(): number | null {
    return this.samples.length ? Math.max(...this.samples.map((s) => s.v)) : null;
  }
}

/**
 * Project a series onto a width x height viewport as an SVG polyline
 * `points` attribute. The time axis spans the series extent; the value axis
 * spans [min, max] padded so a flat line still renders mid-height.
 */
export function polylinePoints(series: Series, width: number, height: number): string {
  const samples = series.values();
  if (samples.length === 0) return "";
  const t0 = samples[0].t;
  const t1 = samples[samples.length - 1].t;
  const span = Math.max(t1 - t0, 1);
  let lo = series.min() as number;
  let hi = series.max() as number;
  if (hi - lo < 1e-9) {
    lo -= 1;
    hi += 1;
  }
  return samples
    .map((s) => {
      const x = ((s.t - t0) / span) * width;
      const y = height - ((s.v - lo) / (hi - lo)) * height;
      return `${x.toFixed(1)},${y.toFixed(1)}`;
    })
    .join(" ");
}
