import { defineConfig } from "vitest/config";

export default defineConfig({
  test: {
    include: ["test/**/*.test.ts"],
    // the integration test seeds a corpus and boots a real server
    testTimeout: 120_000,
    hookTimeout: 180_000,
  },
});
