/**
 * Deterministic swatch rendering: a feature vector becomes a colored
 * tile with a shape glyph and a small profile strip of the leading
 * dimensions. Same vector, same SVG string — the gallery stays stable
 * across reloads and two similar-but-different vectors still get
 * visibly different tiles via the hash.
 */

const SHAPES = ["circle", "square", "triangle", "diamond"] as const;
export type ShapeName = (typeof SHAPES)[number];

/** FNV-1a over a stable fixed-precision encoding of the vector. */
export function hashFeatures(features: number[]): number {
  let h = 0x811c9dc5;
  for (const v of features) {
    const s = v.toFixed(4);
    for (let i = 0; i < s.length; i++) {
      h ^= s.charCodeAt(i);
      h = Math.imul(h, 0x01000193) >>> 0;
    }
  }
  return h >>> 0;
}

export interface SwatchSpec {
  hue: number;
  accentHue: number;
  shape: ShapeName;
}

export function swatchSpec(features: number[]): SwatchSpec {
  const h = hashFeatures(features);
  return {
    hue: h % 360,
    accentHue: (h >>> 9) % 360,
    shape: SHAPES[(h >>> 20) % SHAPES.length] as ShapeName,
  };
}

function shapePath(shape: ShapeName, cx: number, cy: number, r: number): string {
  switch (shape) {
    case "circle":
      return `<circle cx="${cx}" cy="${cy}" r="${r}"/>`;
    case "square":
      return `<rect x="${cx - r}" y="${cy - r}" width="${2 * r}" height="${2 * r}"/>`;
    case "triangle":
      return `<polygon points="${cx},${cy - r} ${cx + r},${cy + r} ${cx - r},${cy + r}"/>`;
    case "diamond":
      return `<polygon points="${cx},${cy - r} ${cx + r},${cy} ${cx},${cy + r} ${cx - r},${cy}"/>`;
  }
}

/** Bar heights for the first `n` dimensions, squashed to [0, 1] by tanh. */
function profile(features: number[], n: number): number[] {
  const out: number[] = [];
  for (let i = 0; i < n; i++) {
    const v = features[i] ?? 0;
    out.push((Math.tanh(v) + 1) / 2);
  }
  return out;
}

/** Render a self-contained SVG tile of the given pixel size. */
export function renderSwatch(features: number[], size = 48): string {
  const { hue, accentHue, shape } = swatchSpec(features);
  const bars = profile(features, 8);
  const stripTop = size * 0.78;
  const barWidth = size / bars.length;
  const rects = bars
    .map((b, i) => {
      const h = Math.max(1, b * (size - stripTop));
      const x = (i * barWidth).toFixed(1);
      const y = (size - h).toFixed(1);
      return `<rect x="${x}" y="${y}" width="${barWidth.toFixed(1)}" height="${h.toFixed(1)}" fill="hsl(${accentHue},55%,38%)"/>`;
    })
    .join("");
  const glyph = shapePath(shape, size / 2, stripTop / 2, size * 0.22);
  return (
    `<svg xmlns="http://www.w3.org/2000/svg" width="${size}" height="${size}" viewBox="0 0 ${size} ${size}" role="img">` +
    `<rect width="${size}" height="${size}" fill="hsl(${hue},65%,82%)"/>` +
    `<g fill="hsl(${accentHue},60%,30%)">${glyph}</g>` +
    rects +
    `</svg>`
  );
}
