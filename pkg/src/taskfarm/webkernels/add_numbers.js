// Smoke-test kernel: one unit of work, adds two numbers.

"use strict";

__registerKernel({
  id: "add_numbers",

  totalUnits() {
    return 1;
  },

  doneUnits(payload) {
    return "result" in payload ? 1 : 0;
  },

  progressPayload(payload) {
    return Object.assign({}, payload);
  },

  runChunk(payload, until) {
    if (until >= 1 && !("result" in payload)) {
      payload.result = payload.a + payload.b;
    }
    return payload;
  },
});
