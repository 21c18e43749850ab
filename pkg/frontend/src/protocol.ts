// Wire messages, mirrored field for field from the server's protocol
// module.  Encoding is canonical JSON (sorted keys, no spaces) so the
// bytes produced here are identical to the server's own encoder for the
// same message, which the test suite pins against frozen fixtures.

export type Payload = Record<string, unknown>;

export type AckStatus =
  | "applied"
  | "stale"
  | "already_complete"
  | "accepted"
  | "duplicate";

export interface Hello {
  type: "hello";
  client_info: Payload;
}

export interface RequestTasks {
  type: "request_tasks";
  count: number;
}

export interface PartialResult {
  type: "partial";
  task_id: string;
  sequence: number;
  progress_units: number;
  partial_payload: Payload;
}

export interface FinalResult {
  type: "final";
  task_id: string;
  sequence: number;
  payload: Payload;
}

export interface CheckpointRecord {
  sequence: number;
  partial_payload: Payload;
  progress_units: number;
}

export interface TaskAssignment {
  task_id: string;
  kernel_id: string;
  payload: Payload;
  checkpoint?: CheckpointRecord | null;
}

export interface Tasks {
  type: "tasks";
  tasks: TaskAssignment[];
}

export interface Ack {
  type: "ack";
  task_id: string;
  status: AckStatus;
}

export interface Drained {
  type: "drained";
}

export type ClientMessage = Hello | RequestTasks | PartialResult | FinalResult;
export type ServerMessage = Tasks | Ack | Drained;
export type Message = ClientMessage | ServerMessage;

export class MalformedMessage extends Error {}

const ACK_STATUSES = new Set([
  "applied",
  "stale",
  "already_complete",
  "accepted",
  "duplicate",
]);

// Escape every unit from DEL up so non-ASCII strings serialize to the
// same bytes the server produces; astral characters come out as their
// surrogate pair, which is also what the server writes.
function jsonString(value: string): string {
  return JSON.stringify(value).replace(
    /[-￿]/g,
    (c) => "\\u" + c.charCodeAt(0).toString(16).padStart(4, "0"),
  );
}

function canonical(value: unknown): string {
  if (value === null || typeof value === "number" || typeof value === "boolean") {
    return JSON.stringify(value);
  }
  if (typeof value === "string") {
    return jsonString(value);
  }
  if (Array.isArray(value)) {
    return "[" + value.map(canonical).join(",") + "]";
  }
  if (typeof value === "object") {
    const obj = value as Record<string, unknown>;
    const keys = Object.keys(obj).sort();
    return "{" + keys.map((k) => jsonString(k) + ":" + canonical(obj[k])).join(",") + "}";
  }
  throw new MalformedMessage(`cannot encode value of type ${typeof value}`);
}

export function encode(message: Message): string {
  // drop a null checkpoint so the doc matches the server's shape exactly
  if (message.type === "tasks") {
    const tasks = message.tasks.map((t) => {
      const doc: Record<string, unknown> = {
        task_id: t.task_id,
        kernel_id: t.kernel_id,
        payload: t.payload,
      };
      if (t.checkpoint != null) doc.checkpoint = t.checkpoint;
      return doc;
    });
    return canonical({ type: "tasks", tasks });
  }
  return canonical(message);
}

function need(doc: Record<string, unknown>, key: string, kind: string): unknown {
  const value = doc[key];
  if (value === undefined) throw new MalformedMessage(`missing field ${key}`);
  const actual = Array.isArray(value) ? "array" : typeof value;
  if (actual !== kind) throw new MalformedMessage(`field ${key} has wrong type`);
  return value;
}

export function decode(text: string): Message {
  let doc: unknown;
  try {
    doc = JSON.parse(text);
  } catch (err) {
    throw new MalformedMessage(`undecodable body: ${err}`);
  }
  if (typeof doc !== "object" || doc === null || Array.isArray(doc)) {
    throw new MalformedMessage("body is not an object");
  }
  const d = doc as Record<string, unknown>;
  switch (d.type) {
    case "hello":
      return { type: "hello", client_info: need(d, "client_info", "object") as Payload };
    case "request_tasks": {
      const count = need(d, "count", "number") as number;
      if (count < 1) throw new MalformedMessage("count must be >= 1");
      return { type: "request_tasks", count };
    }
    case "partial":
      return {
        type: "partial",
        task_id: need(d, "task_id", "string") as string,
        sequence: need(d, "sequence", "number") as number,
        progress_units: need(d, "progress_units", "number") as number,
        partial_payload: need(d, "partial_payload", "object") as Payload,
      };
    case "final":
      return {
        type: "final",
        task_id: need(d, "task_id", "string") as string,
        sequence: need(d, "sequence", "number") as number,
        payload: need(d, "payload", "object") as Payload,
      };
    case "tasks": {
      const items = need(d, "tasks", "array") as unknown[];
      const tasks = items.map((item) => {
        if (typeof item !== "object" || item === null) {
          throw new MalformedMessage("task entry is not an object");
        }
        const t = item as Record<string, unknown>;
        const assignment: TaskAssignment = {
          task_id: need(t, "task_id", "string") as string,
          kernel_id: need(t, "kernel_id", "string") as string,
          payload: need(t, "payload", "object") as Payload,
        };
        if (t.checkpoint != null) {
          const c = t.checkpoint as Record<string, unknown>;
          assignment.checkpoint = {
            sequence: need(c, "sequence", "number") as number,
            partial_payload: need(c, "partial_payload", "object") as Payload,
            progress_units: need(c, "progress_units", "number") as number,
          };
        }
        return assignment;
      });
      return { type: "tasks", tasks };
    }
    case "ack": {
      const status = need(d, "status", "string") as string;
      if (!ACK_STATUSES.has(status)) {
        throw new MalformedMessage(`unknown ack status ${status}`);
      }
      return { type: "ack", task_id: need(d, "task_id", "string") as string, status: status as AckStatus };
    }
    case "drained":
      return { type: "drained" };
    default:
      throw new MalformedMessage(`unknown message type ${String(d.type)}`);
  }
}
