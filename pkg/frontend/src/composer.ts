/** Per-part slot editor plus the generate controls.  Three slot modes: a seen
 * species part, a fresh draw from that part's prior, or a blend of two
 * species at a slider position. */

import type { App } from "./app.js";
import { clear, h, option } from "./dom.js";
import { ALPHA_STEP, snapAlpha } from "./state.js";
import type { SlotChoice } from "./state.js";

function speciesSelect(
  app: App,
  value: number,
  testid: string,
  onPick: (sid: number) => void,
): HTMLSelectElement {
  const sel = h(
    "select",
    {
      "data-testid": testid,
      onchange: () => onPick(Number(sel.value)),
    },
    ...app.catalog!.species.map((card) =>
      option(card.id, `${card.id} ${card.name}`, card.id === value),
    ),
  );
  return sel;
}

function slotControls(app: App, m: number, slot: SlotChoice): HTMLElement {
  const box = h("div", { class: "slot-controls" });
  if (slot.kind === "species") {
    box.append(
      speciesSelect(app, slot.species_id, `slot-${m}-species`, (sid) =>
        app.setSlot(m, { kind: "species", species_id: sid }),
      ),
    );
  } else if (slot.kind === "sample") {
    const seedInput = h("input", {
      type: "number",
      value: slot.seed,
      "data-testid": `slot-${m}-sample-seed`,
    }) as HTMLInputElement;
    seedInput.addEventListener("change", () =>
      app.setSlot(m, { kind: "sample", seed: Number(seedInput.value), values: null }),
    );
    const status = slot.values
      ? `drawn, ${slot.values.length} dims, |z| ${Math.hypot(...slot.values).toFixed(2)}`
      : "not drawn yet";
    box.append(
      h("label", {}, "seed ", seedInput),
      h(
        "button",
        {
          class: "mini",
          "data-testid": `slot-${m}-draw`,
          onclick: () => void app.drawSample(m),
        },
        "draw",
      ),
      h("span", { class: "slot-note", "data-testid": `slot-${m}-drawn` }, status),
    );
  } else {
    const alphaInput = h("input", {
      type: "range",
      min: 0,
      max: 1,
      step: ALPHA_STEP,
      value: slot.alpha,
      "data-testid": `slot-${m}-alpha`,
    }) as HTMLInputElement;
    alphaInput.addEventListener("input", () =>
      app.setSlot(m, { ...slot, alpha: snapAlpha(Number(alphaInput.value)) }),
    );
    box.append(
      speciesSelect(app, slot.species_a, `slot-${m}-species-a`, (sid) =>
        app.setSlot(m, { ...slot, species_a: sid }),
      ),
      h("span", {}, "to"),
      speciesSelect(app, slot.species_b, `slot-${m}-species-b`, (sid) =>
        app.setSlot(m, { ...slot, species_b: sid }),
      ),
      h(
        "span",
        { class: "slot-note" },
        "alpha ",
        h("output", { "data-testid": `slot-${m}-alpha-value` }, slot.alpha.toFixed(2)),
      ),
      alphaInput,
      h(
        "button",
        {
          class: "mini",
          title: "generate the five stops from 0 to 1",
          "data-testid": `slot-${m}-sweep`,
          disabled: app.busy,
          onclick: () => void app.sweep(m),
        },
        "sweep 0 to 1",
      ),
    );
  }
  return box;
}

function defaultChoice(kind: string): SlotChoice {
  if (kind === "sample") return { kind: "sample", seed: 0, values: null };
  if (kind === "interpolate") {
    return { kind: "interpolate", species_a: 0, species_b: 1, alpha: 0.5 };
  }
  return { kind: "species", species_id: 0 };
}

export function renderComposer(app: App, host: HTMLElement): void {
  if (!host || !app.catalog) return;
  clear(host);
  const roles = app.catalog.part_roles;
  const slots = h("div", { class: "slots" });
  app.state.slots.forEach((slot, m) => {
    const modeSel = h(
      "select",
      { "data-testid": `slot-${m}-mode` },
      option("species", "seen species", slot.kind === "species"),
      option("sample", "sampled", slot.kind === "sample"),
      option("interpolate", "interpolated", slot.kind === "interpolate"),
    );
    modeSel.addEventListener("change", () =>
      app.setSlot(m, defaultChoice(modeSel.value)),
    );
    slots.append(
      h(
        "div",
        { class: "slot", "data-testid": `slot-${m}` },
        h("span", { class: "slot-role" }, roles[m] ?? `part ${m}`),
        modeSel,
        slotControls(app, m, slot),
      ),
    );
  });

  const seedInput = h("input", {
    type: "number",
    value: app.state.seed,
    "data-testid": "seed-input",
  }) as HTMLInputElement;
  seedInput.addEventListener("change", () =>
    app.setGenerationParams({ seed: Number(seedInput.value) }),
  );
  const stepsInput = h("input", {
    type: "number",
    min: 1,
    max: 1000,
    value: app.state.steps,
    "data-testid": "steps-input",
  }) as HTMLInputElement;
  stepsInput.addEventListener("change", () =>
    app.setGenerationParams({ steps: Number(stepsInput.value) }),
  );
  const guidanceInput = h("input", {
    type: "number",
    step: 0.5,
    value: app.state.guidance,
    "data-testid": "guidance-input",
  }) as HTMLInputElement;
  guidanceInput.addEventListener("change", () =>
    app.setGenerationParams({ guidance: Number(guidanceInput.value) }),
  );

  host.append(
    h("h2", {}, "composer"),
    slots,
    h(
      "div",
      { class: "generate-row" },
      h("label", {}, "seed ", seedInput),
      h("label", {}, "steps ", stepsInput),
      h("label", {}, "guidance ", guidanceInput),
      h(
        "button",
        {
          class: "primary",
          "data-testid": "generate",
          disabled: app.busy,
          onclick: () => void app.composeAndGenerate(),
        },
        app.busy ? "working..." : "generate",
      ),
    ),
  );
}
