import { defineConfig } from "vitest/config";

export default defineConfig({
  server: {
    port: 5173,
    // Dev convenience: forward API calls to a locally running service so the
    // page and the API share an origin. Override the target with
    // AFLGAN_API=http://host:port npm run dev
    proxy: {
      "/health": { target: process.env.AFLGAN_API ?? "http://127.0.0.1:8000" },
      "/checkpoints": { target: process.env.AFLGAN_API ?? "http://127.0.0.1:8000" },
      "/generate": { target: process.env.AFLGAN_API ?? "http://127.0.0.1:8000" }
    }
  },
  test: {
    environment: "node",
    include: ["tests/**/*.test.ts"]
  }
});
