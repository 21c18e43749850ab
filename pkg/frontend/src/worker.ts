// Worker-side entry point: fetch the kernel bundle from the task
// manager, then run sessions until the queue drains.  A connection or
// server failure backs off and tries again with a fresh session, so a
// page left open rides out server restarts.

import { loadBundle } from "./kernel.js";
import { Policy, SYNC_SINGLE, runSession } from "./runtime.js";
import {
  RequestResponseTransport,
  SocketCtor,
  StreamTransport,
  Transport,
} from "./transports.js";

export interface WorkerConfig {
  origin: string;
  kernel: string;
  transport?: "request_response" | "stream";
  policy?: Policy;
}

export interface WorkerDeps {
  fetchImpl?: typeof fetch;
  Socket?: SocketCtor;
  post?: (message: unknown) => void;
  sleep?: (seconds: number) => Promise<void>;
}

const BACKOFF_START_S = 1.0;
const BACKOFF_CAP_S = 30.0;

function makeTransport(cfg: WorkerConfig, deps: WorkerDeps): Transport {
  if (cfg.transport === "stream") return new StreamTransport(cfg.origin, deps.Socket);
  return new RequestResponseTransport(cfg.origin, deps.fetchImpl);
}

export async function workerMain(cfg: WorkerConfig, deps: WorkerDeps = {}): Promise<void> {
  const post = deps.post ?? ((m: unknown) => (globalThis as { postMessage?: (m: unknown) => void }).postMessage?.(m));
  const sleep =
    deps.sleep ?? ((seconds: number) => new Promise<void>((r) => setTimeout(r, seconds * 1000)));
  const fetchImpl = deps.fetchImpl ?? globalThis.fetch;
  const policy = cfg.policy ?? SYNC_SINGLE;

  let backoff = BACKOFF_START_S;
  for (;;) {
    let transport: Transport | null = null;
    try {
      const resp = await fetchImpl(`${cfg.origin}/bundle/${cfg.kernel}`);
      if (!resp.ok) throw new Error(`bundle fetch failed: HTTP ${resp.status}`);
      const kernel = loadBundle(await resp.text());
      transport = makeTransport(cfg, deps);
      const result = await runSession(transport, kernel, policy, clientInfo(), {
        onFinal: (taskId) => post({ kind: "final", taskId }),
      });
      post({ kind: "drained", tasksCompleted: result.tasksCompleted });
      return;
    } catch (err) {
      post({ kind: "retry", error: String(err), nextTryInS: backoff });
      await sleep(backoff);
      backoff = Math.min(backoff * 2, BACKOFF_CAP_S);
    } finally {
      transport?.close();
    }
  }
}

function clientInfo(): Record<string, unknown> {
  const nav = (globalThis as { navigator?: { userAgent?: string; hardwareConcurrency?: number } })
    .navigator;
  return {
    agent: nav?.userAgent ?? "worker",
    cores: nav?.hardwareConcurrency ?? 1,
  };
}
