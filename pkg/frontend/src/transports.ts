// Two ways to speak to the task manager: one HTTP POST per message with
// a session token in the query string, or one long-lived socket whose
// connection is the session.  Behind this interface the session loop
// cannot tell them apart, which is the point.

import {
  ClientMessage,
  Message,
  Payload,
  ServerMessage,
  decode,
  encode,
} from "./protocol.js";

export class TransportFailure extends Error {}

export interface Transport {
  readonly kind: "request_response" | "stream";
  hello(clientInfo: Payload): Promise<void>;
  // Ordered: the n-th request gets the n-th reply on both transports.
  request(message: ClientMessage): Promise<ServerMessage>;
  close(): void;
}

function expectServerMessage(message: Message): ServerMessage {
  if (message.type === "tasks" || message.type === "ack" || message.type === "drained") {
    return message;
  }
  throw new TransportFailure(`server sent a client message: ${message.type}`);
}

// ------------------------------------------------------- request-response

const ROUTES: Record<string, string> = {
  request_tasks: "tasks",
  partial: "partial",
  final: "final",
};

export class RequestResponseTransport implements Transport {
  readonly kind = "request_response" as const;
  private session: string | null = null;

  constructor(
    private origin: string,
    private fetchImpl: typeof fetch = globalThis.fetch,
  ) {}

  async hello(clientInfo: Payload): Promise<void> {
    const resp = await this.fetchImpl(`${this.origin}/api/hello`, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: encode({ type: "hello", client_info: clientInfo }),
    });
    if (!resp.ok) throw new TransportFailure(`hello failed: HTTP ${resp.status}`);
    const doc = (await resp.json()) as { session?: string };
    if (!doc.session) throw new TransportFailure("hello reply carried no session token");
    this.session = doc.session;
  }

  async request(message: ClientMessage): Promise<ServerMessage> {
    if (this.session === null) throw new TransportFailure("request before hello");
    const route = ROUTES[message.type];
    if (!route) throw new TransportFailure(`not a request message: ${message.type}`);
    const url = `${this.origin}/api/${route}?session=${encodeURIComponent(this.session)}`;
    const resp = await this.fetchImpl(url, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: encode(message),
    });
    if (!resp.ok) throw new TransportFailure(`${route} failed: HTTP ${resp.status}`);
    return expectServerMessage(decode(await resp.text()));
  }

  close(): void {
    // nothing held open between requests
    this.session = null;
  }
}

// ---------------------------------------------------------------- stream

// Structural subset of both the browser WebSocket and the ws package.
export interface SocketLike {
  binaryType: string;
  onopen: ((ev: unknown) => void) | null;
  onmessage: ((ev: { data: unknown }) => void) | null;
  onclose: ((ev: unknown) => void) | null;
  onerror: ((ev: unknown) => void) | null;
  send(data: Uint8Array): void;
  close(): void;
}

export type SocketCtor = new (url: string) => SocketLike;

const FLAG_RAW = 0;
const FLAG_DEFLATE = 1;

async function inflate(data: Uint8Array): Promise<Uint8Array> {
  const stream = new Blob([data as BlobPart])
    .stream()
    .pipeThrough(new DecompressionStream("deflate"));
  return new Uint8Array(await new Response(stream).arrayBuffer());
}

interface Waiter {
  resolve: (message: ServerMessage) => void;
  reject: (err: Error) => void;
}

export class StreamTransport implements Transport {
  readonly kind = "stream" as const;
  private sock: SocketLike;
  private opened: Promise<void>;
  private waiters: Waiter[] = [];
  private closed = false;

  constructor(origin: string, Socket?: SocketCtor) {
    const Ctor =
      Socket ?? ((globalThis as Record<string, unknown>).WebSocket as SocketCtor | undefined);
    if (!Ctor) throw new TransportFailure("no WebSocket implementation available");
    const url = origin.replace(/^http/, "ws") + "/ws";
    this.sock = new Ctor(url);
    this.sock.binaryType = "arraybuffer";
    this.opened = new Promise((resolve, reject) => {
      this.sock.onopen = () => resolve();
      this.sock.onerror = () => reject(new TransportFailure("stream failed to open"));
    });
    this.opened.catch(() => undefined); // surfaced again on first use
    this.sock.onmessage = (ev) => void this.onFrame(ev.data);
    this.sock.onclose = () => this.fail(new TransportFailure("stream closed"));
  }

  private async onFrame(data: unknown): Promise<void> {
    try {
      let bytes: Uint8Array =
        data instanceof ArrayBuffer ? new Uint8Array(data) : new Uint8Array(data as Uint8Array);
      if (bytes.length === 0) throw new TransportFailure("empty frame");
      const flag = bytes[0];
      bytes = bytes.subarray(1);
      if (flag === FLAG_DEFLATE) bytes = await inflate(bytes);
      else if (flag !== FLAG_RAW) throw new TransportFailure(`unknown frame flag ${flag}`);
      const message = expectServerMessage(decode(new TextDecoder().decode(bytes)));
      const waiter = this.waiters.shift();
      // a reply nobody asked for means the two sides lost sync
      if (!waiter) throw new TransportFailure("unsolicited server message");
      waiter.resolve(message);
    } catch (err) {
      this.fail(err instanceof Error ? err : new TransportFailure(String(err)));
    }
  }

  private fail(err: Error): void {
    if (this.closed) return;
    this.closed = true;
    const pending = this.waiters;
    this.waiters = [];
    for (const waiter of pending) waiter.reject(err);
    try {
      this.sock.close();
    } catch {
      // already gone
    }
  }

  private send(message: ClientMessage): void {
    const body = new TextEncoder().encode(encode(message));
    const frame = new Uint8Array(1 + body.length);
    frame[0] = FLAG_RAW;
    frame.set(body, 1);
    this.sock.send(frame);
  }

  // The identity handshake: the connection is the session, so the
  // server sends no reply and there is no token to hold on to.
  async hello(clientInfo: Payload): Promise<void> {
    await this.opened;
    this.send({ type: "hello", client_info: clientInfo });
  }

  async request(message: ClientMessage): Promise<ServerMessage> {
    await this.opened;
    if (this.closed) throw new TransportFailure("stream closed");
    const reply = new Promise<ServerMessage>((resolve, reject) => {
      this.waiters.push({ resolve, reject });
    });
    this.send(message);
    return reply;
  }

  close(): void {
    this.fail(new TransportFailure("transport closed locally"));
  }
}
