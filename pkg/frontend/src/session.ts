/** Session strip: every generation of this browser session, newest last.
 * Lives entirely client-side; entries point back at server artifacts. */

import type { App } from "./app.js";
import { clear, h } from "./dom.js";

export function renderSession(app: App, host: HTMLElement): void {
  if (!host) return;
  clear(host);
  host.append(h("h2", {}, "session"));
  if (!app.state.results.length) {
    host.append(h("p", { class: "placeholder" }, "no generations yet"));
    return;
  }
  const strip = h("div", { class: "strip", "data-testid": "session-strip" });
  for (const record of app.state.results) {
    const active = record.provenance_ref === app.state.current;
    strip.append(
      h(
        "button",
        {
          class: active ? "strip-entry active" : "strip-entry",
          "data-testid": "strip-entry",
          "data-ref": record.provenance_ref,
          onclick: () => app.showResult(record.provenance_ref),
        },
        h("img", {
          src: app.api.base + record.images[0].url,
          alt: record.label,
          width: 48,
          height: 48,
        }),
        h("span", { class: "strip-label" }, record.label),
        h("span", { class: "strip-seed" }, `seed ${record.seed}`),
      ),
    );
  }
  host.append(strip);
}
