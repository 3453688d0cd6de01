/** Provenance details for a result: the exact request the service recorded,
 * viewable and downloadable.  Re-posting it to /api/generate reproduces the
 * displayed images byte for byte. */

import type { App } from "./app.js";
import { h } from "./dom.js";
import type { ResultRecord } from "./state.js";

export function renderProvenance(app: App, record: ResultRecord): HTMLElement {
  const json = JSON.stringify(record.provenance, null, 2);
  // data URI instead of a blob URL so the link works without object URLs
  const href = "data:application/json;charset=utf-8," + encodeURIComponent(json);
  return h(
    "details",
    { class: "provenance" },
    h("summary", {}, "provenance"),
    h("pre", { "data-testid": "provenance-json" }, json),
    h(
      "a",
      {
        href,
        download: `provenance-${record.provenance_ref}.json`,
        "data-testid": "provenance-download",
      },
      "download provenance",
    ),
    h(
      "span",
      { class: "slot-note" },
      ` artifact ${record.provenance_ref}`,
    ),
  );
}
