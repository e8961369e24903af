// Collector submission wire format. The query must match the grammar
// /submit?cmh-id=<uuid>&cmh-result=(init|success|failure)(&cmh-elapsed=<int>)?
// byte for byte; the server rejects anything else.

import type { SubmitState, Submitter } from './types';

export function buildSubmitPath(
  measurementId: string,
  state: SubmitState,
  elapsedMs?: number,
): string {
  let path = `/submit?cmh-id=${measurementId}&cmh-result=${state}`;
  if (elapsedMs !== undefined && elapsedMs !== null) {
    path += `&cmh-elapsed=${Math.round(elapsedMs)}`;
  }
  return path;
}

/**
 * Image-beacon submitter: a cross-origin GET that needs no CORS preflight
 * and survives page teardown better than late XHR. Falls back to fetch
 * where Image is unavailable.
 */
export function makeBeaconSubmitter(
  collectorBase: string,
  measurementId: string,
  doc?: Document,
): Submitter {
  const base = collectorBase.replace(/\/$/, '');
  return (state, elapsedMs) => {
    const url = base + buildSubmitPath(measurementId, state, elapsedMs);
    try {
      if (typeof Image !== 'undefined') {
        const beacon = doc ? (doc.createElement('img') as HTMLImageElement) : new Image();
        beacon.src = url;
        return;
      }
    } catch {
      // fall through to fetch
    }
    try {
      fetch(url, { mode: 'no-cors', keepalive: true }).catch(() => {});
    } catch {
      /* submission is best-effort */
    }
  };
}

export function nowMs(): number {
  if (typeof performance !== 'undefined' && typeof performance.now === 'function') {
    return performance.now();
  }
  return Date.now();
}
