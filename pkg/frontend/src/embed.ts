// Page-side bootstrap.  The same built file plays two roles: loaded by
// the snippet's script tag it reads its data attributes and starts a
// worker; loaded inside that worker it waits for the config message and
// runs the compute loop.  Keeping it one file means a site embeds one
// script and nothing else.

import { WorkerConfig, workerMain } from "./worker.js";

function configFromTag(tag: HTMLScriptElement): WorkerConfig | null {
  const origin = tag.dataset.taskfarmOrigin;
  const kernel = tag.dataset.taskfarmKernel;
  if (!origin || !kernel) return null;
  const transport = tag.dataset.taskfarmTransport === "request_response"
    ? "request_response"
    : "stream";
  return { origin, kernel, transport };
}

async function startWorker(tag: HTMLScriptElement): Promise<void> {
  const cfg = configFromTag(tag);
  if (!cfg) return;
  // Fetch our own source and boot the worker from a blob URL, which
  // works even when this script is served from a third-party host.
  const source = await (await fetch(tag.src)).text();
  const blob = new Blob([source], { type: "text/javascript" });
  const worker = new Worker(URL.createObjectURL(blob));
  worker.postMessage(cfg);
}

export function boot(): void {
  const g = globalThis as {
    document?: Document;
    importScripts?: unknown;
    onmessage?: unknown;
  };
  if (g.document) {
    const tag = g.document.currentScript;
    if (tag instanceof HTMLScriptElement && tag.dataset.taskfarmOrigin) {
      void startWorker(tag);
    }
  } else if (typeof g.importScripts === "function") {
    // worker side: first message is the page's config
    (globalThis as unknown as Worker).onmessage = (ev: MessageEvent) => {
      void workerMain(ev.data as WorkerConfig);
    };
  }
}

boot();
