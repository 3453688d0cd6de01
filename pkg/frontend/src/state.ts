/** Composer state: what the user picked, what came back, and the strip of
 * past results.  Everything displayable is an artifact ref handed out by the
 * service; nothing here invents image data. */

import type {
  AttentionMap,
  GeneratedImage,
  Provenance,
  Selection,
} from "./api.js";

export type SlotChoice =
  | { kind: "species"; species_id: number }
  | { kind: "sample"; seed: number; values: number[] | null }
  | { kind: "interpolate"; species_a: number; species_b: number; alpha: number };

export interface ResultRecord {
  provenance_ref: string;
  tokens_ref: string;
  seed: number;
  label: string;
  selections: Selection[];
  changed: number[];
  images: GeneratedImage[];
  provenance: Provenance;
  attention: AttentionMap[] | null;
}

export interface LiftRecord {
  job_id: string;
  state: string;
  tokens_ref: string;
  seed: number;
  steps: number;
  error: string | null;
  turntable: string[] | null;
  report: string | null;
}

export interface ComposerState {
  slots: SlotChoice[];
  seed: number;
  steps: number;
  guidance: number;
  results: ResultRecord[];
  current: string | null;
  lifts: LiftRecord[];
  pendingJobs: string[];
}

export const ALPHA_STEP = 0.05;

export function snapAlpha(a: number): number {
  const snapped = Math.round(a / ALPHA_STEP) * ALPHA_STEP;
  return Math.min(1, Math.max(0, Number(snapped.toFixed(2))));
}

export function defaultState(partCount: number): ComposerState {
  return {
    slots: Array.from(
      { length: partCount },
      (): SlotChoice => ({ kind: "species", species_id: 0 }),
    ),
    seed: 0,
    steps: 50,
    guidance: 3.0,
    results: [],
    current: null,
    lifts: [],
    pendingJobs: [],
  };
}

/** Compose-request rows for the slots.  Sampled slots send the values the
 * service drew for them, so a re-compose reproduces the same creature. */
export function slotSelections(slots: SlotChoice[]): Selection[] {
  return slots.map((slot): Selection => {
    switch (slot.kind) {
      case "species":
        return { kind: "species", species_id: slot.species_id };
      case "interpolate":
        return {
          kind: "interpolate",
          species_a: slot.species_a,
          species_b: slot.species_b,
          alpha: snapAlpha(slot.alpha),
        };
      case "sample":
        if (!slot.values) throw new Error("sampled slot has no drawn values yet");
        return { kind: "latent", values: slot.values };
    }
  });
}

/** Part indices whose selection differs from the previous result's. */
export function changedParts(
  prev: Selection[] | null,
  next: Selection[],
): number[] {
  if (!prev) return [];
  const out: number[] = [];
  next.forEach((sel, m) => {
    if (JSON.stringify(prev[m]) !== JSON.stringify(sel)) out.push(m);
  });
  return out;
}

const STORE_KEY = "partstudio-composer-v1";

export function saveState(state: ComposerState, storage: Storage): void {
  storage.setItem(STORE_KEY, JSON.stringify(state));
}

export function loadState(partCount: number, storage: Storage): ComposerState {
  const raw = storage.getItem(STORE_KEY);
  if (!raw) return defaultState(partCount);
  try {
    const state = JSON.parse(raw) as ComposerState;
    if (!Array.isArray(state.slots) || state.slots.length !== partCount) {
      return defaultState(partCount);
    }
    return { ...defaultState(partCount), ...state };
  } catch {
    return defaultState(partCount);
  }
}
