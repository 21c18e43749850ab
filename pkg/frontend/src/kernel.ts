// The kernel contract a downloaded bundle must satisfy, and the loader
// that evaluates bundle text into a live kernel object.

import type { Payload } from "./protocol.js";

export interface Kernel {
  id: string;
  totalUnits(payload: Payload): number;
  doneUnits(payload: Payload): number;
  progressPayload(payload: Payload): Payload;
  runChunk(payload: Payload, until: number): Payload;
}

export class BadBundle extends Error {}

// Bundles are plain scripts that call __registerKernel(...), which the
// server-provided shim routes to globalThis.TF_KERNEL.  Evaluation
// happens in whatever scope we run in (worker or test process); the
// couple of globals the shim installs are part of the bundle contract.
export function loadBundle(source: string): Kernel {
  const before = (globalThis as Record<string, unknown>).TF_KERNEL;
  try {
    new Function(source)();
  } catch (err) {
    throw new BadBundle(`bundle failed to evaluate: ${err}`);
  }
  const kernel = (globalThis as Record<string, unknown>).TF_KERNEL as Kernel | undefined;
  if (!kernel || kernel === before || typeof kernel.runChunk !== "function") {
    throw new BadBundle("bundle did not register a kernel");
  }
  return kernel;
}
