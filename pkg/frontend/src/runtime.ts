// The worker's decision loop: what to do next, how to run a task, when
// to checkpoint.  A direct port of the server package's client runtime,
// so a page session behaves exactly like a simulated one.

import type { Kernel } from "./kernel.js";
import {
  Ack,
  Payload,
  ServerMessage,
  TaskAssignment,
} from "./protocol.js";
import type { Transport } from "./transports.js";

export interface Policy {
  mode: "sync_single" | "async_prefetch";
  batchSize: number;
  prefetchThreshold: number;
  checkpointEvery: number | null;
}

export const SYNC_SINGLE: Policy = {
  mode: "sync_single",
  batchSize: 1,
  prefetchThreshold: 0,
  checkpointEvery: null,
};

export const EMPTY_QUEUE_RETRY_S = 0.5;

// Yield to the event loop between compute chunks at least this often so
// a close message or devtools can get a word in.
const MAX_CHUNK_UNITS = 250_000;

export interface SessionHooks {
  sleep?: (seconds: number) => Promise<void>;
  onFinal?: (taskId: string, payload: Payload) => void;
}

export interface SessionResult {
  tasksCompleted: number;
  busyUnits: number;
  finals: Map<string, Payload>;
}

const defaultSleep = (seconds: number) =>
  new Promise<void>((resolve) => setTimeout(resolve, seconds * 1000));

type NextAction =
  | { kind: "run" }
  | { kind: "request"; count: number }
  | { kind: "prefetch"; count: number }
  | { kind: "idle" };

interface LoopState {
  buffer: TaskAssignment[];
  prefetch: Promise<ServerMessage> | null;
  drained: boolean;
}

function nextAction(state: LoopState, policy: Policy): NextAction {
  if (state.buffer.length === 0) {
    if (state.prefetch !== null || state.drained) return { kind: "idle" };
    return { kind: "request", count: policy.batchSize };
  }
  if (
    policy.mode === "async_prefetch" &&
    state.prefetch === null &&
    !state.drained &&
    state.buffer.length === policy.prefetchThreshold
  ) {
    return { kind: "prefetch", count: policy.batchSize };
  }
  return { kind: "run" };
}

function acceptTasks(state: LoopState, reply: ServerMessage): boolean {
  if (reply.type === "drained") {
    state.drained = true;
    return false;
  }
  if (reply.type !== "tasks") {
    throw new Error(`unexpected reply to a task request: ${reply.type}`);
  }
  state.buffer.push(...reply.tasks);
  return reply.tasks.length > 0;
}

async function runTask(
  transport: Transport,
  kernel: Kernel,
  policy: Policy,
  assignment: TaskAssignment,
  result: SessionResult,
  hooks: SessionHooks,
): Promise<void> {
  const payload = JSON.parse(JSON.stringify(assignment.payload)) as Payload;
  let sequence = assignment.checkpoint ? assignment.checkpoint.sequence : 0;
  let done = kernel.doneUnits(payload);
  const total = kernel.totalUnits(payload);
  const every = policy.checkpointEvery;
  while (done < total) {
    const boundary = every === null ? total : Math.min(total, (Math.floor(done / every) + 1) * every);
    while (done < boundary) {
      const target = Math.min(boundary, done + MAX_CHUNK_UNITS);
      kernel.runChunk(payload, target);
      result.busyUnits += target - done;
      done = target;
      if (done < boundary) await defaultSleep(0);
    }
    if (done < total) {
      sequence += 1;
      const ack = (await transport.request({
        type: "partial",
        task_id: assignment.task_id,
        sequence,
        progress_units: done,
        partial_payload: kernel.progressPayload(payload),
      })) as Ack;
      if (ack.type === "ack" && ack.status === "already_complete") return;
    }
  }
  sequence += 1;
  const ack = await transport.request({
    type: "final",
    task_id: assignment.task_id,
    sequence,
    payload,
  });
  if (ack.type === "ack" && ack.status === "accepted") {
    result.tasksCompleted += 1;
    result.finals.set(assignment.task_id, payload);
    hooks.onFinal?.(assignment.task_id, payload);
  }
}

// One whole session, hello to drain.  Page close simply abandons the
// promise; there is no goodbye in the protocol.
export async function runSession(
  transport: Transport,
  kernel: Kernel,
  policy: Policy,
  clientInfo: Payload = {},
  hooks: SessionHooks = {},
): Promise<SessionResult> {
  const sleep = hooks.sleep ?? defaultSleep;
  const result: SessionResult = { tasksCompleted: 0, busyUnits: 0, finals: new Map() };
  const state: LoopState = { buffer: [], prefetch: null, drained: false };
  await transport.hello(clientInfo);
  for (;;) {
    if (state.drained && state.buffer.length === 0) {
      if (state.prefetch === null) return result;
      // a straggler prefetch may still carry rotated tasks
      acceptTasks(state, await state.prefetch);
      state.prefetch = null;
      continue;
    }
    const action = nextAction(state, policy);
    if (action.kind === "request") {
      const got = acceptTasks(state, await transport.request({ type: "request_tasks", count: action.count }));
      if (!got && !state.drained) await sleep(EMPTY_QUEUE_RETRY_S);
    } else if (action.kind === "prefetch") {
      state.prefetch = transport.request({ type: "request_tasks", count: action.count });
    } else if (action.kind === "idle") {
      if (state.prefetch === null) return result;
      acceptTasks(state, await state.prefetch);
      state.prefetch = null;
    } else {
      const assignment = state.buffer.shift() as TaskAssignment;
      await runTask(transport, kernel, policy, assignment, result, hooks);
    }
  }
}
