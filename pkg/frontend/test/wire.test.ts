import { describe, expect, it } from 'vitest';
import { buildSubmitPath, makeBeaconSubmitter } from '../src/wire';
import type { SubmitState } from '../src/types';

// Same grammar the collector enforces, byte for byte.
const GRAMMAR =
  /^\/submit\?cmh-id=[0-9a-f]{8}-[0-9a-f]{4}-[0-9a-f]{4}-[0-9a-f]{4}-[0-9a-f]{12}&cmh-result=(init|success|failure)(&cmh-elapsed=\d+)?$/;

function randomUuid(): string {
  const hex = [...crypto.getRandomValues(new Uint8Array(16))]
    .map((b) => b.toString(16).padStart(2, '0'))
    .join('');
  return (
    hex.slice(0, 8) +
    '-' +
    hex.slice(8, 12) +
    '-4' +
    hex.slice(13, 16) +
    '-a' +
    hex.slice(17, 20) +
    '-' +
    hex.slice(20, 32)
  );
}

describe('buildSubmitPath', () => {
  it('produces the three exact forms', () => {
    const mid = '123e4567-e89b-42d3-a456-426614174000';
    expect(buildSubmitPath(mid, 'init')).toBe(`/submit?cmh-id=${mid}&cmh-result=init`);
    expect(buildSubmitPath(mid, 'success', 12.4)).toBe(
      `/submit?cmh-id=${mid}&cmh-result=success&cmh-elapsed=12`,
    );
    expect(buildSubmitPath(mid, 'failure')).toBe(`/submit?cmh-id=${mid}&cmh-result=failure`);
  });

  it('matches the collector grammar for fuzzed inputs', () => {
    const states: SubmitState[] = ['init', 'success', 'failure'];
    for (let i = 0; i < 500; i++) {
      const elapsed = Math.random() < 0.5 ? Math.random() * 10_000 : undefined;
      const path = buildSubmitPath(randomUuid(), states[i % 3], elapsed);
      expect(path).toMatch(GRAMMAR);
    }
  });

  it('rounds elapsed to integral milliseconds', () => {
    const mid = '123e4567-e89b-42d3-a456-426614174000';
    expect(buildSubmitPath(mid, 'success', 99.9)).toContain('cmh-elapsed=100');
    expect(buildSubmitPath(mid, 'success', 0)).toContain('cmh-elapsed=0');
  });
});

describe('makeBeaconSubmitter', () => {
  it('falls back to fetch outside a DOM and fires the exact URL', async () => {
    const seen: string[] = [];
    const origFetch = globalThis.fetch;
    globalThis.fetch = ((url: string) => {
      seen.push(String(url));
      return Promise.resolve(new Response(null, { status: 204 }));
    }) as typeof fetch;
    try {
      const submit = makeBeaconSubmitter(
        'http://collector.example/',
        '123e4567-e89b-42d3-a456-426614174000',
      );
      submit('init');
      submit('success', 42.6);
      expect(seen).toEqual([
        'http://collector.example/submit?cmh-id=123e4567-e89b-42d3-a456-426614174000&cmh-result=init',
        'http://collector.example/submit?cmh-id=123e4567-e89b-42d3-a456-426614174000&cmh-result=success&cmh-elapsed=43',
      ]);
    } finally {
      globalThis.fetch = origFetch;
    }
  });
});
