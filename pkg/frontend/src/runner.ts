// In-page measurement runner: executes one task with real DOM mechanisms
// and reports through the injected submitter. Every element this code
// creates is hidden, tagged data-cmh, and detached once the measurement
// settles, so the hosting page is never visibly altered.

import type { RunnerOptions, StyleProbe, Submitter, TaskDescriptor } from './types';
import { nowMs } from './wire';

const DEFAULT_TIMEOUT_MS = 15_000;

export type Outcome = 'success' | 'failure' | 'skipped';

export function isChromeFamily(userAgent: string): boolean {
  // Script-load semantics (onload for any HTTP 200) hold for the Chrome
  // lineage; derivatives that keep "Chrome/" in the UA behave the same.
  return /(Chrome|Chromium|CriOS)\//.test(userAgent);
}

export function readTaskDescriptor(doc: Document): TaskDescriptor | null {
  const el = doc.getElementById('measurement-task');
  if (!el || !el.textContent) return null;
  try {
    return JSON.parse(el.textContent) as TaskDescriptor;
  } catch {
    return null;
  }
}

function hide(el: HTMLElement): void {
  el.style.display = 'none';
  el.setAttribute('data-cmh', '1');
  el.setAttribute('aria-hidden', 'true');
}

function settleOnce(
  cleanup: () => void,
  resolve: (outcome: Outcome) => void,
): (outcome: Outcome) => void {
  let settled = false;
  return (outcome) => {
    if (settled) return;
    settled = true;
    try {
      cleanup();
    } catch {
      /* detached already */
    }
    resolve(outcome);
  };
}

/** Hidden <img>: load fires only if the browser fetched AND decoded it. */
export function runImageTask(
  task: TaskDescriptor,
  submit: Submitter,
  opts: RunnerOptions = {},
): Promise<Outcome> {
  const doc = opts.doc ?? document;
  return new Promise((resolve) => {
    const img = doc.createElement('img');
    hide(img);
    const settle = settleOnce(() => img.remove(), (outcome) => {
      if (outcome !== 'skipped') submit(outcome);
      resolve(outcome);
    });
    const timer = setTimeout(() => settle('failure'), opts.timeoutMs ?? DEFAULT_TIMEOUT_MS);
    img.addEventListener('load', () => {
      clearTimeout(timer);
      settle('success');
    });
    img.addEventListener('error', () => {
      clearTimeout(timer);
      settle('failure');
    });
    img.src = task.resourceUrl ?? '';
    doc.body.appendChild(img);
  });
}

const NAMED_COLORS: Record<string, string> = {
  black: 'rgb(0,0,0)',
  white: 'rgb(255,255,255)',
  red: 'rgb(255,0,0)',
  green: 'rgb(0,128,0)',
  blue: 'rgb(0,0,255)',
  yellow: 'rgb(255,255,0)',
  orange: 'rgb(255,165,0)',
  purple: 'rgb(128,0,128)',
  gray: 'rgb(128,128,128)',
  grey: 'rgb(128,128,128)',
};

/** Normalize a CSS literal/computed value pair into a comparable form. */
export function normalizeCssValue(property: string, value: string): string {
  let v = value.trim().toLowerCase();
  if (property === 'color') {
    if (v in NAMED_COLORS) v = NAMED_COLORS[v];
    const hex = /^#([0-9a-f]{3}|[0-9a-f]{6})$/.exec(v);
    if (hex) {
      let h = hex[1];
      if (h.length === 3) h = h.split('').map((c) => c + c).join('');
      const n = parseInt(h, 16);
      v = `rgb(${(n >> 16) & 255},${(n >> 8) & 255},${n & 255})`;
    }
  }
  return v.replace(/\s+/g, '');
}

/** Build an element matching the tail of the probe selector (tag, classes, id). */
export function elementForSelector(doc: Document, selector: string): HTMLElement {
  const parts = selector.trim().split(/[\s>+~]+/);
  const simple = parts[parts.length - 1] || 'div';
  const tagMatch = /^[a-z][a-z0-9-]*/i.exec(simple);
  const el = doc.createElement(tagMatch ? tagMatch[0] : 'div');
  for (const cls of simple.match(/\.[\w-]+/g) ?? []) el.classList.add(cls.slice(1));
  const id = /#([\w-]+)/.exec(simple);
  if (id) el.id = id[1];
  return el;
}

export function probeMatches(win: Window, el: Element, probe: StyleProbe): boolean {
  const computed = win.getComputedStyle(el).getPropertyValue(probe.property);
  return (
    normalizeCssValue(probe.property, computed) ===
    normalizeCssValue(probe.property, probe.expectedValue)
  );
}

/**
 * Load the sheet inside an isolated child frame (so its rules cannot leak
 * into the hosting page), create an element the probed rule applies to,
 * and read the style back through computed style.
 */
export function runStyleSheetTask(
  task: TaskDescriptor,
  submit: Submitter,
  opts: RunnerOptions = {},
): Promise<Outcome> {
  const doc = opts.doc ?? document;
  return new Promise((resolve) => {
    const frame = doc.createElement('iframe');
    hide(frame);
    const settle = settleOnce(() => frame.remove(), (outcome) => {
      if (outcome !== 'skipped') submit(outcome);
      resolve(outcome);
    });
    const timer = setTimeout(() => settle('failure'), opts.timeoutMs ?? DEFAULT_TIMEOUT_MS);
    doc.body.appendChild(frame);
    const frameDoc = frame.contentDocument;
    const frameWin = frame.contentWindow;
    if (!frameDoc || !frameWin || !task.styleProbe) {
      clearTimeout(timer);
      settle('failure');
      return;
    }
    const probe = task.styleProbe;
    const target = elementForSelector(frameDoc, probe.selector);
    frameDoc.body.appendChild(target);
    const link = frameDoc.createElement('link');
    link.rel = 'stylesheet';
    link.addEventListener('load', () => {
      clearTimeout(timer);
      settle(probeMatches(frameWin, target, probe) ? 'success' : 'failure');
    });
    link.addEventListener('error', () => {
      clearTimeout(timer);
      settle('failure');
    });
    link.href = task.resourceUrl ?? '';
    frameDoc.head.appendChild(link);
  });
}

/**
 * Load the page in a hidden iframe, then time a fresh image fetch for the
 * embedded resource. A fast load means the frame populated the cache, i.e.
 * the page itself was reachable; the collector receives the raw timing.
 */
export function runInlineFrameTask(
  task: TaskDescriptor,
  submit: Submitter,
  opts: RunnerOptions = {},
): Promise<Outcome> {
  const doc = opts.doc ?? document;
  return new Promise((resolve) => {
    const frame = doc.createElement('iframe');
    hide(frame);
    let img: HTMLImageElement | null = null;
    const settleRaw = settleOnce(
      () => {
        frame.remove();
        img?.remove();
      },
      resolve,
    );
    const timer = setTimeout(() => {
      submit('failure');
      settleRaw('failure');
    }, opts.timeoutMs ?? DEFAULT_TIMEOUT_MS);

    frame.addEventListener('load', () => {
      img = doc.createElement('img');
      hide(img);
      const started = nowMs();
      const finish = (outcome: 'success' | 'failure') => {
        clearTimeout(timer);
        submit(outcome, nowMs() - started);
        settleRaw(outcome);
      };
      img.addEventListener('load', () => finish('success'));
      img.addEventListener('error', () => finish('failure'));
      img.src = task.resourceUrl ?? '';
      doc.body.appendChild(img);
    });
    frame.src = task.pageUrl ?? '';
    doc.body.appendChild(frame);
  });
}

/**
 * <script> embedding: Chrome fires load for any 200 response regardless of
 * body, so this measures reachability of arbitrary resources, but only on
 * Chrome-family browsers and only for targets vetted as script-safe.
 */
export function runScriptTask(
  task: TaskDescriptor,
  submit: Submitter,
  opts: RunnerOptions & { userAgent?: string } = {},
): Promise<Outcome> {
  const doc = opts.doc ?? document;
  const ua = opts.userAgent ?? (typeof navigator !== 'undefined' ? navigator.userAgent : '');
  if (!isChromeFamily(ua) || !task.scriptSafe) {
    return Promise.resolve('skipped');
  }
  return new Promise((resolve) => {
    const script = doc.createElement('script');
    script.setAttribute('data-cmh', '1');
    const settle = settleOnce(() => script.remove(), (outcome) => {
      if (outcome !== 'skipped') submit(outcome);
      resolve(outcome);
    });
    const timer = setTimeout(() => settle('failure'), opts.timeoutMs ?? DEFAULT_TIMEOUT_MS);
    script.addEventListener('load', () => {
      clearTimeout(timer);
      settle('success');
    });
    script.addEventListener('error', () => {
      clearTimeout(timer);
      settle('failure');
    });
    script.async = true;
    script.src = task.resourceUrl ?? '';
    doc.body.appendChild(script);
  });
}

export function runTask(
  task: TaskDescriptor,
  submit: Submitter,
  opts: RunnerOptions & { userAgent?: string } = {},
): Promise<Outcome> {
  switch (task.taskType) {
    case 'image':
      return runImageTask(task, submit, opts);
    case 'stylesheet':
      return runStyleSheetTask(task, submit, opts);
    case 'inlineframe':
      return runInlineFrameTask(task, submit, opts);
    case 'script':
      return runScriptTask(task, submit, opts);
    default:
      return Promise.resolve('skipped');
  }
}
