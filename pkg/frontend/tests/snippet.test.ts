import { describe, expect, it } from "vitest";

import { embedSnippet } from "../src/snippet.js";

describe("embed snippet", () => {
  it("stays within seven lines", () => {
    const snippet = embedSnippet(
      "https://cdn.example.net/embed.js",
      "https://farm.example.net",
      "monte_carlo_pi",
    );
    expect(snippet.split("\n").length).toBeLessThanOrEqual(7);
  });

  it("configures the worker entirely through data attributes", () => {
    const snippet = embedSnippet("https://x/embed.js", "https://farm", "mandelbrot", "request_response");
    expect(snippet).toContain('src="https://x/embed.js"');
    expect(snippet).toContain('data-taskfarm-origin="https://farm"');
    expect(snippet).toContain('data-taskfarm-kernel="mandelbrot"');
    expect(snippet).toContain('data-taskfarm-transport="request_response"');
    expect(snippet).toContain("async");
  });

  it("defaults to the stream transport", () => {
    const snippet = embedSnippet("https://x/embed.js", "https://farm", "k");
    expect(snippet).toContain('data-taskfarm-transport="stream"');
  });
});
