/** The single-page composer: holds state, talks to the service, and asks the
 * panel modules to re-render.  All model work happens server-side; every
 * displayed image is an artifact ref with provenance. */

import { ApiError } from "./api.js";
import type { Catalog, Lift3dConfig, PollOptions, StudioApi } from "./api.js";
import { clear, h } from "./dom.js";
import { renderCatalog } from "./catalog.js";
import { renderComposer } from "./composer.js";
import { renderLift } from "./lift.js";
import { renderResults } from "./results.js";
import { renderSession } from "./session.js";
import {
  changedParts,
  loadState,
  saveState,
  slotSelections,
  snapAlpha,
} from "./state.js";
import type { ComposerState, LiftRecord, ResultRecord, SlotChoice } from "./state.js";

export interface AppOptions {
  storage?: Storage;
  cameras?: number[];
  poll?: PollOptions;
}

const SWEEP_ALPHAS = [0.0, 0.25, 0.5, 0.75, 1.0];

export class App {
  catalog: Catalog | null = null;
  state!: ComposerState;
  busy = false;
  error: string | null = null;
  attentionOn = false;
  attentionPart = 0;
  /** Transient azimuth index per lift job, for the turntable scrubber. */
  azimuth = new Map<string, number>();
  readonly cameras: number[];
  private readonly storage: Storage;
  private regions: Record<string, HTMLElement> = {};

  constructor(
    readonly api: StudioApi,
    readonly root: HTMLElement,
    readonly opts: AppOptions = {},
  ) {
    this.storage = opts.storage ?? window.localStorage;
    this.cameras = opts.cameras ?? [0, 1, 2, 3];
  }

  async boot(): Promise<void> {
    clear(this.root);
    this.root.append(h("p", { class: "loading" }, "contacting service..."));
    try {
      const health = await this.api.health();
      this.catalog = await this.api.catalog();
      this.state = loadState(health.part_count, this.storage);
    } catch (err) {
      this.renderOffline(err);
      return;
    }
    this.buildLayout();
    this.renderAll();
  }

  private renderOffline(err: unknown): void {
    const detail = err instanceof ApiError ? err.message : String(err);
    clear(this.root);
    this.root.append(
      h(
        "div",
        { class: "offline-banner", "data-testid": "offline" },
        h("p", {}, "the studio service is not reachable"),
        h("p", { class: "detail" }, detail),
        h(
          "button",
          { "data-testid": "retry", onclick: () => void this.boot() },
          "retry",
        ),
      ),
    );
  }

  private buildLayout(): void {
    clear(this.root);
    const region = (name: string, cls: string) => {
      const el = h("section", { class: cls, "data-region": name });
      this.regions[name] = el;
      return el;
    };
    const n = this.catalog ? this.catalog.species.length : 0;
    this.root.append(
      h(
        "header",
        {},
        h("h1", {}, "part studio"),
        h(
          "p",
          { class: "tagline" },
          `${n} species, ${this.partCount} parts; pick, sample, blend, generate`,
        ),
      ),
      region("error", "error-region"),
      h(
        "main",
        {},
        h(
          "div",
          { class: "column left" },
          region("catalog", "panel catalog-panel"),
          region("composer", "panel composer-panel"),
        ),
        h(
          "div",
          { class: "column right" },
          region("results", "panel results-panel"),
          region("session", "panel session-panel"),
          region("lift", "panel lift-panel"),
        ),
      ),
    );
  }

  get partCount(): number {
    return this.catalog ? this.catalog.part_count : 0;
  }

  get currentResult(): ResultRecord | null {
    if (!this.state.current) return null;
    return (
      this.state.results.find((r) => r.provenance_ref === this.state.current) ??
      null
    );
  }

  save(): void {
    saveState(this.state, this.storage);
  }

  renderAll(): void {
    renderCatalog(this, this.regions.catalog);
    renderComposer(this, this.regions.composer);
    renderResults(this, this.regions.results);
    renderSession(this, this.regions.session);
    renderLift(this, this.regions.lift);
    this.renderError();
  }

  renderError(): void {
    const host = this.regions.error;
    if (!host) return;
    clear(host);
    if (this.error) {
      host.append(
        h("div", { class: "error-box", "data-testid": "error-box" }, this.error),
      );
    }
  }

  setError(err: unknown): void {
    if (err instanceof ApiError) {
      this.error =
        err.status > 0 ? `service said ${err.status}: ${err.message}` : err.message;
    } else {
      this.error = String(err);
    }
    this.renderError();
  }

  clearError(): void {
    this.error = null;
    this.renderError();
  }

  // --- composer edits -------------------------------------------------------

  setSlot(m: number, choice: SlotChoice): void {
    this.state.slots[m] = choice;
    this.save();
    renderComposer(this, this.regions.composer);
  }

  useSpeciesEverywhere(sid: number): void {
    this.state.slots = this.state.slots.map(() => ({
      kind: "species",
      species_id: sid,
    }));
    this.save();
    renderComposer(this, this.regions.composer);
  }

  setGenerationParams(params: Partial<Pick<ComposerState, "seed" | "steps" | "guidance">>): void {
    Object.assign(this.state, params);
    this.save();
  }

  async drawSample(m: number): Promise<void> {
    const slot = this.state.slots[m];
    if (slot.kind !== "sample") return;
    try {
      const drawn = await this.api.samplePart(m, slot.seed);
      this.setSlot(m, { ...slot, values: drawn.values });
      this.clearError();
    } catch (err) {
      this.setError(err);
    }
  }

  // --- generation -----------------------------------------------------------

  private async ensureSampledValues(): Promise<void> {
    for (let m = 0; m < this.state.slots.length; m++) {
      const slot = this.state.slots[m];
      if (slot.kind === "sample" && !slot.values) {
        const drawn = await this.api.samplePart(m, slot.seed);
        this.state.slots[m] = { ...slot, values: drawn.values };
      }
    }
  }

  /** One compose + generate round trip; appends to the session strip. */
  private async generateOnce(label: string): Promise<void> {
    await this.ensureSampledValues();
    const selections = slotSelections(this.state.slots);
    const composed = await this.api.compose(selections, this.state.seed);
    const res = await this.api.generate({
      tokens_ref: composed.tokens_ref,
      cameras: this.cameras,
      seed: this.state.seed,
      guidance: this.state.guidance,
      steps: this.state.steps,
      rescale: 0.3,
      attention: false,
    });
    const prev = this.state.results.at(-1) ?? null;
    const record: ResultRecord = {
      provenance_ref: res.provenance_ref,
      tokens_ref: composed.tokens_ref,
      seed: this.state.seed,
      label,
      selections,
      changed: changedParts(prev ? prev.selections : null, selections),
      images: res.images,
      provenance: res.provenance,
      attention: res.attention,
    };
    this.state.results.push(record);
    this.state.current = record.provenance_ref;
    this.save();
  }

  private async withBusy(work: () => Promise<void>): Promise<void> {
    if (this.busy) return;
    this.busy = true;
    this.clearError();
    renderComposer(this, this.regions.composer);
    try {
      await work();
    } catch (err) {
      this.setError(err);
    } finally {
      this.busy = false;
      this.renderAll();
    }
  }

  composeAndGenerate(): Promise<void> {
    return this.withBusy(async () => {
      await this.generateOnce(`seed ${this.state.seed}`);
      if (this.attentionOn) await this.ensureAttention();
    });
  }

  /** Slide one interpolated slot 0 to 1, archiving each stop in the strip. */
  sweep(m: number): Promise<void> {
    return this.withBusy(async () => {
      const slot = this.state.slots[m];
      if (slot.kind !== "interpolate") {
        throw new Error("sweep needs an interpolated slot");
      }
      for (const alpha of SWEEP_ALPHAS) {
        this.state.slots[m] = { ...slot, alpha: snapAlpha(alpha) };
        await this.generateOnce(`alpha ${alpha.toFixed(2)}`);
        renderSession(this, this.regions.session);
      }
    });
  }

  showResult(ref: string): void {
    this.state.current = ref;
    this.save();
    if (this.attentionOn) {
      void this.ensureAttention().then(() => this.renderAll());
    }
    this.renderAll();
  }

  // --- attention overlays -----------------------------------------------------

  /** Re-runs the recorded generation with overlay harvesting on.  Same seed
   * and settings, so the images are the ones already shown. */
  private async ensureAttention(): Promise<void> {
    const record = this.currentResult;
    if (!record || record.attention) return;
    const res = await this.api.generate({
      tokens_ref: record.provenance.tokens_ref,
      cameras: record.provenance.cameras,
      seed: record.provenance.seed,
      guidance: record.provenance.guidance,
      steps: record.provenance.steps,
      rescale: record.provenance.rescale,
      attention: true,
    });
    record.attention = res.attention;
    this.save();
  }

  toggleAttention(on: boolean): Promise<void> {
    this.attentionOn = on;
    if (!on) {
      this.renderAll();
      return Promise.resolve();
    }
    return this.ensureAttention()
      .catch((err) => this.setError(err))
      .then(() => this.renderAll());
  }

  setAttentionPart(m: number): void {
    this.attentionPart = m;
    this.renderAll();
  }

  // --- 3d lift ----------------------------------------------------------------

  async lift(config: Lift3dConfig): Promise<void> {
    const record = this.currentResult;
    if (!record) {
      this.setError(new Error("generate something before lifting"));
      return;
    }
    let ticket;
    try {
      ticket = await this.api.lift3d(record.tokens_ref, config);
    } catch (err) {
      this.setError(err);
      return;
    }
    const lift: LiftRecord = {
      job_id: ticket.job_id,
      state: ticket.state,
      tokens_ref: record.tokens_ref,
      seed: config.seed,
      steps: config.steps,
      error: null,
      turntable: null,
      report: null,
    };
    this.state.lifts.push(lift);
    this.state.pendingJobs.push(ticket.job_id);
    this.save();
    renderLift(this, this.regions.lift);
    try {
      const done = await this.api.pollJob(ticket.job_id, {
        ...this.opts.poll,
        onUpdate: (job) => {
          lift.state = job.state;
          renderLift(this, this.regions.lift);
        },
      });
      lift.state = done.state;
      lift.error = done.error;
      if (done.artifacts) {
        lift.turntable = (done.artifacts.turntable as string[]) ?? null;
        lift.report = (done.artifacts.report as string) ?? null;
      }
    } catch (err) {
      lift.state = "failed";
      lift.error = err instanceof Error ? err.message : String(err);
    }
    this.state.pendingJobs = this.state.pendingJobs.filter(
      (id) => id !== ticket.job_id,
    );
    this.save();
    renderLift(this, this.regions.lift);
  }

  setAzimuth(jobId: string, index: number): void {
    this.azimuth.set(jobId, index);
    renderLift(this, this.regions.lift);
  }
}
