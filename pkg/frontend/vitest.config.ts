import { defineConfig } from 'vitest/config';

export default defineConfig({
  test: {
    include: ['tests/**/*.test.ts'],
    environment: 'node',
    // Integration tests script a real pause against a live service.
    testTimeout: 90_000,
    hookTimeout: 60_000,
  },
});
