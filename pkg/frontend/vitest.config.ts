import { defineConfig } from "vitest/config";

export default defineConfig({
  test: {
    environment: "node", // panel tests opt into jsdom per-file
    include: ["tests/**/*.test.ts"],
    testTimeout: 15000,
  },
});
