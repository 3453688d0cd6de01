/** Result panel: the four camera views of the current record, which parts
 * changed since the previous generation, optional attention overlays, and the
 * provenance that reproduces the images server-side. */

import type { App } from "./app.js";
import { clear, h } from "./dom.js";
import { renderProvenance } from "./provenance.js";
import type { ResultRecord } from "./state.js";

function partChips(app: App, record: ResultRecord): HTMLElement {
  const roles = app.catalog!.part_roles;
  const row = h("div", { class: "chip-row", "data-testid": "part-chips" });
  roles.forEach((role, m) => {
    const changed = record.changed.includes(m);
    row.append(
      h(
        "span",
        {
          class: changed ? "chip changed" : "chip",
          "data-testid": `part-chip-${m}`,
        },
        changed ? `${role} *` : role,
      ),
    );
  });
  return row;
}

function attentionControls(app: App, record: ResultRecord): HTMLElement {
  const box = h("div", { class: "attention-row" });
  const toggle = h("input", {
    type: "checkbox",
    "data-testid": "attention-toggle",
  }) as HTMLInputElement;
  toggle.checked = app.attentionOn;
  toggle.addEventListener("change", () => void app.toggleAttention(toggle.checked));
  box.append(h("label", {}, toggle, " attention overlays"));
  if (app.attentionOn && record.attention) {
    const roles = app.catalog!.part_roles;
    const picker = h("div", { class: "chip-row" });
    roles.forEach((role, m) => {
      picker.append(
        h(
          "button",
          {
            class: m === app.attentionPart ? "mini active" : "mini",
            "data-testid": `attention-part-${m}`,
            onclick: () => app.setAttentionPart(m),
          },
          role,
        ),
      );
    });
    box.append(picker);
  }
  return box;
}

function viewFigure(app: App, record: ResultRecord, index: number): HTMLElement {
  const img = record.images[index];
  const stack = h(
    "div",
    { class: "view-stack" },
    h("img", {
      class: "view-image",
      src: app.api.base + img.url,
      alt: `camera ${img.camera}`,
      "data-testid": `view-image-${img.camera}`,
      "data-ref": img.ref,
    }),
  );
  if (app.attentionOn && record.attention) {
    const map = record.attention.find(
      (a) => a.camera === img.camera && a.part === app.attentionPart,
    );
    if (map) {
      stack.append(
        h("img", {
          class: "view-overlay",
          src: app.api.base + map.url,
          alt: `${map.part_role} attention`,
          "data-testid": `view-overlay-${img.camera}`,
        }),
      );
    }
  }
  return h(
    "figure",
    { class: "view" },
    stack,
    h("figcaption", {}, `${img.view_name} (camera ${img.camera})`),
  );
}

export function renderResults(app: App, host: HTMLElement): void {
  if (!host) return;
  clear(host);
  host.append(h("h2", {}, "result"));
  const record = app.currentResult;
  if (!record) {
    host.append(h("p", { class: "placeholder" }, "nothing generated yet"));
    return;
  }
  host.append(
    h(
      "div",
      { class: "result-head" },
      h("span", { class: "result-label" }, record.label),
      h("span", { class: "seed-badge", "data-testid": "result-seed" }, `seed ${record.seed}`),
    ),
    partChips(app, record),
    h(
      "div",
      { class: "views", "data-testid": "views" },
      ...record.images.map((_, i) => viewFigure(app, record, i)),
    ),
    attentionControls(app, record),
    renderProvenance(app, record),
  );
}
