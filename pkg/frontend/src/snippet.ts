// What a site owner pastes into their page.  Kept to a handful of
// lines on purpose; everything else is configuration by data attribute
// on the tag, read by the embed script when it loads.

export function embedSnippet(
  scriptUrl: string,
  origin: string,
  kernel: string,
  transport: "request_response" | "stream" = "stream",
): string {
  return [
    `<script async src="${scriptUrl}"`,
    `  data-taskfarm-origin="${origin}"`,
    `  data-taskfarm-kernel="${kernel}"`,
    `  data-taskfarm-transport="${transport}">`,
    `</script>`,
  ].join("\n");
}
