/** 3D lift panel: submit the current creature's tokens for volumetric
 * optimization, watch the job, then scrub around the finished turntable. */

import type { App } from "./app.js";
import { clear, h } from "./dom.js";
import type { LiftRecord } from "./state.js";

function turntable(app: App, lift: LiftRecord): HTMLElement {
  const refs = lift.turntable ?? [];
  const names = app.catalog ? app.catalog.view_names : [];
  const index = Math.min(app.azimuth.get(lift.job_id) ?? 0, refs.length - 1);
  const scrub = h("input", {
    type: "range",
    min: 0,
    max: refs.length - 1,
    step: 1,
    value: index,
    "data-testid": `turntable-scrub-${lift.job_id}`,
  }) as HTMLInputElement;
  scrub.addEventListener("input", () =>
    app.setAzimuth(lift.job_id, Number(scrub.value)),
  );
  return h(
    "div",
    { class: "turntable" },
    h("img", {
      src: app.api.artifactUrl(refs[index]),
      alt: `azimuth view ${index}`,
      width: 128,
      height: 128,
      "data-testid": `turntable-image-${lift.job_id}`,
      "data-ref": refs[index],
    }),
    h(
      "div",
      { class: "turntable-controls" },
      scrub,
      h("span", { class: "slot-note" }, names[index] ?? `view ${index}`),
    ),
  );
}

function liftCard(app: App, lift: LiftRecord): HTMLElement {
  const card = h(
    "div",
    { class: "lift-card", "data-testid": `lift-${lift.job_id}` },
    h(
      "div",
      { class: "lift-head" },
      h("span", {}, `job ${lift.job_id.slice(0, 8)}`),
      h("span", { class: "seed-badge" }, `seed ${lift.seed}, ${lift.steps} steps`),
      h(
        "span",
        {
          class: `job-state ${lift.state}`,
          "data-testid": `lift-state-${lift.job_id}`,
        },
        lift.state,
      ),
    ),
  );
  if (lift.state === "queued" || lift.state === "running") {
    card.append(h("p", { class: "placeholder" }, "optimizing..."));
  } else if (lift.state === "failed") {
    card.append(
      h(
        "pre",
        { class: "error-detail", "data-testid": `lift-error-${lift.job_id}` },
        lift.error ?? "no error detail",
      ),
    );
  } else if (lift.turntable && lift.turntable.length) {
    card.append(turntable(app, lift));
  }
  return card;
}

export function renderLift(app: App, host: HTMLElement): void {
  if (!host) return;
  clear(host);
  host.append(h("h2", {}, "3d lift"));

  const stepsInput = h("input", {
    type: "number",
    min: 1,
    max: 20000,
    value: 2000,
    "data-testid": "lift-steps",
  }) as HTMLInputElement;
  const seedInput = h("input", {
    type: "number",
    value: 0,
    "data-testid": "lift-seed",
  }) as HTMLInputElement;
  const guidanceInput = h("input", {
    type: "number",
    step: 0.5,
    value: 7.5,
    "data-testid": "lift-guidance",
  }) as HTMLInputElement;

  host.append(
    h(
      "div",
      { class: "generate-row" },
      h("label", {}, "steps ", stepsInput),
      h("label", {}, "seed ", seedInput),
      h("label", {}, "guidance ", guidanceInput),
      h(
        "button",
        {
          class: "primary",
          "data-testid": "lift-submit",
          disabled: !app.currentResult,
          title: app.currentResult
            ? "lift the current creature to 3d"
            : "generate something first",
          onclick: () =>
            void app.lift({
              steps: Number(stepsInput.value),
              seed: Number(seedInput.value),
              guidance: Number(guidanceInput.value),
              lr: 0.05,
            }),
        },
        "lift to 3d",
      ),
    ),
  );
  for (const lift of [...app.state.lifts].reverse()) {
    host.append(liftCard(app, lift));
  }
}
