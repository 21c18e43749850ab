// Dartboard estimator: sample the unit square, count hits inside the
// quarter circle.  Point i reads draws 2i and 2i+1 of the task's
// stream, so progress can stop and resume anywhere without changing a
// single sample.

"use strict";

__registerKernel({
  id: "monte_carlo_pi",

  totalUnits(payload) {
    return payload.iterations;
  },

  doneUnits(payload) {
    return payload.done_iterations;
  },

  progressPayload(payload) {
    return { hits: payload.hits, done_iterations: payload.done_iterations };
  },

  runChunk(payload, until) {
    const seed = BigInt(payload.seed);
    const stop = Math.min(until, payload.iterations);
    let hits = payload.hits;
    for (let i = payload.done_iterations; i < stop; i++) {
      const x = tfUniformAt(seed, 2 * i);
      const y = tfUniformAt(seed, 2 * i + 1);
      if (x * x + y * y <= 1.0) {
        hits += 1;
      }
    }
    payload.hits = hits;
    payload.done_iterations = stop;
    return payload;
  },
});
