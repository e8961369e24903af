// Integration against the real Python services: the runner's submissions
// must parse, store, and export losslessly, and the coordinator's task page
// must carry a descriptor this runner understands.

import { spawn, spawnSync, type ChildProcess } from 'node:child_process';
import { mkdtempSync, writeFileSync, existsSync } from 'node:fs';
import { tmpdir } from 'node:os';
import { join } from 'node:path';
import { JSDOM } from 'jsdom';
import { afterAll, beforeAll, describe, expect, it } from 'vitest';
import { readTaskDescriptor } from '../src/runner';
import { buildSubmitPath, makeBeaconSubmitter } from '../src/wire';

const MEASUREMENT_ID = '123e4567-e89b-42d3-a456-426614174000';

function waitForUrl(proc: ChildProcess, marker: string): Promise<string> {
  return new Promise((resolve, reject) => {
    let buffer = '';
    const timer = setTimeout(() => reject(new Error(`no ${marker} URL: ${buffer}`)), 15_000);
    proc.stdout!.on('data', (chunk: Buffer) => {
      buffer += chunk.toString();
      const match = buffer.match(new RegExp(`${marker}[^h]*(http://[0-9.:]+)`));
      if (match) {
        clearTimeout(timer);
        resolve(match[1]);
      }
    });
    proc.on('exit', (code) => reject(new Error(`${marker} exited ${code}: ${buffer}`)));
  });
}

describe('collector wire integration', () => {
  let collector: ChildProcess;
  let collectorUrl: string;
  let storePath: string;

  beforeAll(async () => {
    const dir = mkdtempSync(join(tmpdir(), 'runner-it-'));
    storePath = join(dir, 'results.jsonl');
    collector = spawn(
      'python3',
      ['-m', 'crossprobe.collector', 'serve', '--listen', '127.0.0.1:0', '--store', storePath, '--test-mode'],
      { env: { ...process.env, COLLECTOR_EXPORT_TOKEN: 'it-token' }, stdio: ['ignore', 'pipe', 'pipe'] },
    );
    collectorUrl = await waitForUrl(collector, 'collector listening on');
  }, 20_000);

  afterAll(() => {
    collector?.kill();
  });

  it('accepts the beacon submissions and round-trips them in order', async () => {
    const submit = makeBeaconSubmitter(collectorUrl, MEASUREMENT_ID);
    submit('init');
    await new Promise((r) => setTimeout(r, 150));
    submit('success', 7.2);
    await new Promise((r) => setTimeout(r, 300));

    const res = await fetch(`${collectorUrl}/export?token=it-token`);
    expect(res.status).toBe(200);
    const rows = (await res.text())
      .trim()
      .split('\n')
      .map((line) => JSON.parse(line));
    expect(rows.map((r) => [r.id, r.state])).toEqual([
      [MEASUREMENT_ID, 'init'],
      [MEASUREMENT_ID, 'success'],
    ]);
    expect(rows[1].elapsedMs).toBe(7);
  });

  it('gets a 204 for every grammar-conformant path and 400 otherwise', async () => {
    const ok = await fetch(collectorUrl + buildSubmitPath(MEASUREMENT_ID, 'failure', 3));
    expect(ok.status).toBe(204);
    const bad = await fetch(`${collectorUrl}/submit?cmh-id=${MEASUREMENT_ID}&cmh-result=banana`);
    expect(bad.status).toBe(400);
  });
});

describe('coordinator task page integration', () => {
  let coordinator: ChildProcess;
  let coordinatorUrl: string;

  beforeAll(async () => {
    const dir = mkdtempSync(join(tmpdir(), 'runner-it-'));
    const tasks = join(dir, 'tasks.jsonl');
    writeFileSync(
      tasks,
      JSON.stringify({
        taskType: 'image',
        measurementId: MEASUREMENT_ID,
        resourceUrl: 'http://target.test/favicon.ico',
        maxBytes: 1024,
      }) + '\n',
    );
    coordinator = spawn(
      'python3',
      [
        '-m', 'crossprobe.coordinator',
        '--listen', '127.0.0.1:0',
        '--tasks', tasks,
        '--collector-url', 'http://127.0.0.1:1/collector',
        '--test-mode',
      ],
      { stdio: ['ignore', 'pipe', 'pipe'] },
    );
    coordinatorUrl = await waitForUrl(coordinator, 'coordinator listening on');
  }, 20_000);

  afterAll(() => {
    coordinator?.kill();
  });

  it('serves an HTML page whose inline descriptor this runner parses', async () => {
    const res = await fetch(`${coordinatorUrl}/task`, {
      headers: { 'User-Agent': 'Mozilla/5.0 (X11) Chrome/120.0.0.0 Safari/537.36' },
    });
    expect(res.status).toBe(200);
    const html = await res.text();
    expect(html).toContain('src="/runner.js"');
    const dom = new JSDOM(html);
    const task = readTaskDescriptor(dom.window.document);
    expect(task).not.toBeNull();
    expect(task!.taskType).toBe('image');
    expect(task!.resourceUrl).toBe('http://target.test/favicon.ico');
    expect(task!.collector).toBe('http://127.0.0.1:1/collector');
    expect(task!.measurementId).not.toBe(MEASUREMENT_ID); // freshly minted
  });
});

// Real-browser end to end: an origin page embeds the coordinator's /task
// iframe, a headless browser runs the delivered bundle against the local
// testbed, and the collector receives correctly formatted submissions.
// Requires a Chrome binary; skipped where none is installed.
function findChrome(): string | null {
  const candidates = [
    process.env.CHROME_BIN ?? '',
    'google-chrome',
    'chromium',
    'chromium-browser',
    'headless-chromium',
  ].filter(Boolean);
  for (const bin of candidates) {
    const probe = spawnSync(bin, ['--version'], { timeout: 5000 });
    if (probe.status === 0) return bin;
  }
  return null;
}

const chromeBin = findChrome();

describe.skipIf(!chromeBin || !existsSync(join(import.meta.dirname, '..', 'dist', 'runner.js')))(
  'real browser end to end',
  () => {
    it('completes an image task: success unfiltered, failure via block-page host', async () => {
      const driver = join(import.meta.dirname, 'e2e_driver.py');
      const phases: Array<{ censored: boolean; expected: string }> = [
        { censored: false, expected: 'success' },
        { censored: true, expected: 'failure' },
      ];
      for (const phase of phases) {
        const proc = spawn('python3', [driver, phase.censored ? '--censored' : '--clean'], {
          stdio: ['ignore', 'pipe', 'pipe'],
        });
        const setup = await new Promise<any>((resolve, reject) => {
          let buf = '';
          proc.stdout!.on('data', (c: Buffer) => {
            buf += c.toString();
            const line = buf.split('\n').find((l) => l.startsWith('{'));
            if (line) resolve(JSON.parse(line));
          });
          setTimeout(() => reject(new Error('driver timeout')), 20_000);
        });
        const browse = spawnSync(
          chromeBin!,
          [
            '--headless=new',
            '--no-sandbox',
            '--disable-gpu',
            `--host-resolver-rules=MAP target.test 127.0.0.1`,
            '--virtual-time-budget=8000',
            '--dump-dom',
            setup.origin_page,
          ],
          { timeout: 30_000 },
        );
        expect(browse.status).toBe(0);
        const res = await fetch(`${setup.collector}/export?token=e2e`);
        const rows = (await res.text())
          .trim()
          .split('\n')
          .filter(Boolean)
          .map((l: string) => JSON.parse(l));
        const states = rows.map((r: any) => r.state);
        expect(states[0]).toBe('init');
        expect(states).toContain(phase.expected);
        proc.kill();
      }
    }, 120_000);
  },
);
