import { defineConfig } from "vitest/config";

// The e2e suite trains a tiny checkpoint on first run and then serves it,
// so hooks get a long leash; individual assertions stay on a short one.
export default defineConfig({
  test: {
    environment: "node",
    testTimeout: 180_000,
    hookTimeout: 900_000,
  },
});
