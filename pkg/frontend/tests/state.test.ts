import { describe, expect, it } from "vitest";

import {
  changedParts,
  defaultState,
  loadState,
  saveState,
  slotSelections,
  snapAlpha,
} from "../src/state.js";
import type { SlotChoice } from "../src/state.js";

class FakeStorage implements Storage {
  private map = new Map<string, string>();
  get length() {
    return this.map.size;
  }
  clear() {
    this.map.clear();
  }
  getItem(key: string) {
    return this.map.get(key) ?? null;
  }
  key(index: number) {
    return [...this.map.keys()][index] ?? null;
  }
  removeItem(key: string) {
    this.map.delete(key);
  }
  setItem(key: string, value: string) {
    this.map.set(key, value);
  }
}

describe("defaultState", () => {
  it("fills every slot with species 0", () => {
    const state = defaultState(5);
    expect(state.slots).toHaveLength(5);
    for (const slot of state.slots) {
      expect(slot).toEqual({ kind: "species", species_id: 0 });
    }
  });
});

describe("snapAlpha", () => {
  it("snaps to the 0.05 grid", () => {
    expect(snapAlpha(0.633)).toBeCloseTo(0.65, 10);
    expect(snapAlpha(0.62)).toBeCloseTo(0.6, 10);
    expect(snapAlpha(0.25)).toBeCloseTo(0.25, 10);
  });

  it("clamps to [0, 1]", () => {
    expect(snapAlpha(-0.4)).toBe(0);
    expect(snapAlpha(1.7)).toBe(1);
  });
});

describe("slotSelections", () => {
  it("maps each mode to its request row", () => {
    const slots: SlotChoice[] = [
      { kind: "species", species_id: 3 },
      { kind: "sample", seed: 7, values: [0.1, -0.2] },
      { kind: "interpolate", species_a: 0, species_b: 2, alpha: 0.633 },
    ];
    expect(slotSelections(slots)).toEqual([
      { kind: "species", species_id: 3 },
      { kind: "latent", values: [0.1, -0.2] },
      { kind: "interpolate", species_a: 0, species_b: 2, alpha: 0.65 },
    ]);
  });

  it("refuses a sampled slot that was never drawn", () => {
    const slots: SlotChoice[] = [{ kind: "sample", seed: 0, values: null }];
    expect(() => slotSelections(slots)).toThrow(/no drawn values/);
  });
});

describe("changedParts", () => {
  const base = slotSelections([
    { kind: "species", species_id: 0 },
    { kind: "species", species_id: 0 },
    { kind: "species", species_id: 0 },
  ]);

  it("flags nothing on the first generation", () => {
    expect(changedParts(null, base)).toEqual([]);
  });

  it("flags only the swapped slot", () => {
    const next = slotSelections([
      { kind: "species", species_id: 1 },
      { kind: "species", species_id: 0 },
      { kind: "species", species_id: 0 },
    ]);
    expect(changedParts(base, next)).toEqual([0]);
  });

  it("flags nothing when the selections repeat", () => {
    expect(changedParts(base, [...base])).toEqual([]);
  });
});

describe("state persistence", () => {
  it("round-trips through storage", () => {
    const storage = new FakeStorage();
    const state = defaultState(5);
    state.slots[1] = { kind: "interpolate", species_a: 0, species_b: 2, alpha: 0.35 };
    state.seed = 42;
    saveState(state, storage);
    const back = loadState(5, storage);
    expect(back.seed).toBe(42);
    expect(back.slots[1]).toEqual({
      kind: "interpolate",
      species_a: 0,
      species_b: 2,
      alpha: 0.35,
    });
  });

  it("resets when the checkpoint's part count differs", () => {
    const storage = new FakeStorage();
    saveState(defaultState(5), storage);
    const back = loadState(4, storage);
    expect(back.slots).toHaveLength(4);
  });

  it("survives corrupt storage", () => {
    const storage = new FakeStorage();
    storage.setItem("partstudio-composer-v1", "{nope");
    expect(loadState(5, storage).slots).toHaveLength(5);
  });
});
