/** Log-scaled rendering of the sampling surface.
 *
 * Surface mass is heavily skewed after cluster-weighted initialization, so
 * raw probabilities paint as one bright pixel in a black field. Intensities
 * are log-interpolated between the smallest and largest live probability;
 * exhausted (zero) cells stay at 0.
 */

export function logIntensities(probs: number[][]): number[][] {
  let lo = Infinity;
  let hi = -Infinity;
  for (const row of probs) {
    for (const p of row) {
      if (p > 0) {
        if (p < lo) lo = p;
        if (p > hi) hi = p;
      }
    }
  }
  if (hi === -Infinity) return probs.map((row) => row.map(() => 0));
  const logLo = Math.log(lo);
  const span = Math.log(hi) - logLo;
  return probs.map((row) =>
    row.map((p) => {
      if (p <= 0) return 0;
      if (span === 0) return 1;
      return (Math.log(p) - logLo) / span;
    }),
  );
}

/** Intensity in [0, 1] to a dark-blue → yellow CSS color. */
export function intensityColor(v: number): string {
  const t = Math.min(1, Math.max(0, v));
  const r = Math.round(20 + 235 * t);
  const g = Math.round(24 + 206 * t);
  const b = Math.round(60 + 20 * t - 60 * t * t);
  return `rgb(${r},${g},${b})`;
}

export interface HeatmapCell {
  row: number;
  col: number;
  intensity: number;
  color: string;
}

export function heatmapCells(probs: number[][]): HeatmapCell[] {
  const intensities = logIntensities(probs);
  const cells: HeatmapCell[] = [];
  intensities.forEach((rowVals, row) => {
    rowVals.forEach((v, col) => {
      cells.push({ row, col, intensity: v, color: intensityColor(v) });
    });
  });
  return cells;
}
