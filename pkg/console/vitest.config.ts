import { defineConfig } from 'vitest/config';

export default defineConfig({
  test: {
    include: ['tests/**/*.test.ts'],
    // the roundtrip test generates a corpus and boots the review server
    testTimeout: 120_000,
    hookTimeout: 180_000,
  },
});
