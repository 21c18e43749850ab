// Escape-time renderer over a fixed complex window.  A task owns a
// contiguous region (whole rows, or a pixel run when tasks outnumber
// rows) and appends one count per pixel as it sweeps.

"use strict";

function tfEscapeCount(cx, cy, maxIter) {
  let zx = 0.0;
  let zy = 0.0;
  let count = 0;
  while (count < maxIter) {
    const nzx = zx * zx - zy * zy + cx;
    const nzy = 2.0 * zx * zy + cy;
    zx = nzx;
    zy = nzy;
    count += 1;
    if (zx * zx + zy * zy > 4.0) {
      break;
    }
  }
  return count;
}

function tfPixelValue(payload, pixelIndex) {
  const col = pixelIndex % payload.grid_width;
  const row = (pixelIndex - col) / payload.grid_width;
  const cx = payload.x_min + (col + 0.5) * payload.step_x;
  const cy = payload.y_max - (row + 0.5) * payload.step_y;
  return tfEscapeCount(cx, cy, payload.max_iter);
}

__registerKernel({
  id: "mandelbrot",

  totalUnits(payload) {
    return payload.mode === "rows" ? payload.band_rows : payload.count_px;
  },

  doneUnits(payload) {
    return payload.mode === "rows" ? payload.done_rows : payload.done_px;
  },

  progressPayload(payload) {
    if (payload.mode === "rows") {
      return { counts: payload.counts, done_rows: payload.done_rows };
    }
    return { counts: payload.counts, done_px: payload.done_px };
  },

  runChunk(payload, until) {
    let startPx;
    let endPx;
    if (payload.mode === "rows") {
      startPx = (payload.row_offset + payload.done_rows) * payload.grid_width;
      endPx = (payload.row_offset + until) * payload.grid_width;
    } else {
      startPx = payload.offset_px + payload.done_px;
      endPx = payload.offset_px + until;
    }
    for (let p = startPx; p < endPx; p++) {
      payload.counts.push(tfPixelValue(payload, p));
    }
    if (payload.mode === "rows") {
      payload.done_rows = until;
    } else {
      payload.done_px = until;
    }
    return payload;
  },
});
