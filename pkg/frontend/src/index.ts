export * from "./protocol.js";
export * from "./rng.js";
export { Kernel, BadBundle, loadBundle } from "./kernel.js";
export * from "./transports.js";
export * from "./runtime.js";
export * from "./worker.js";
export { embedSnippet } from "./snippet.js";
