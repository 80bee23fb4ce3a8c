/**
 * Spawns the real study service for integration tests. Everything goes
 * through the service's public surface: the command line for plan
 * generation and serving, HTTP for study creation and the session flow.
 */

import { type ChildProcess, execFileSync, spawn } from 'node:child_process';
import { mkdtempSync, readFileSync, rmSync, writeFileSync } from 'node:fs';
import { tmpdir } from 'node:os';
import { join } from 'node:path';

import { pngBase64 } from './fixtures.js';

export interface PlanReader {
  reader_id: string;
  tier: string;
  condition_order: string[];
  case_orders: string[][];
}

export interface Plan {
  conditions: string[];
  washout_days: number;
  seed: number;
  cases: string[];
  readers: PlanReader[];
}

export interface LiveService {
  baseUrl: string;
  studyId: string;
  plan: Plan;
  /** The exact base64 assets the study was created with. */
  assets: Record<string, { grayscale: string; tdce: string }>;
  stop(): void;
}

const READERS = [
  { reader_id: 'rd0', tier: 'junior' },
  { reader_id: 'rd1', tier: 'intermediate' },
  { reader_id: 'rd2', tier: 'senior' },
];
const CASES = ['c0', 'c1', 'c2'];

/** Distinct pixels per case so a delivered image identifies its case. */
function caseAssets(): LiveService['assets'] {
  const out: LiveService['assets'] = {};
  CASES.forEach((caseId, i) => {
    const base = 1000 * (i + 1);
    out[caseId] = {
      grayscale: pngBase64({
        width: 4,
        height: 4,
        channels: 1,
        samples: Array.from({ length: 16 }, (_, p) => base + p),
      }),
      tdce: pngBase64({
        width: 4,
        height: 4,
        channels: 3,
        samples: Array.from({ length: 48 }, (_, p) => base + 500 + p),
      }),
    };
  });
  return out;
}

function sleep(ms: number): Promise<void> {
  return new Promise((resolve) => setTimeout(resolve, ms));
}

async function waitUntilUp(baseUrl: string, child: ChildProcess, log: () => string) {
  const deadline = Date.now() + 30_000;
  while (Date.now() < deadline) {
    if (child.exitCode !== null) {
      throw new Error(`service exited with ${child.exitCode}:\n${log()}`);
    }
    try {
      const res = await fetch(`${baseUrl}/studies/does-not-exist`);
      if (res.status === 404) return;
    } catch {
      // Not listening yet.
    }
    await sleep(100);
  }
  throw new Error(`service never came up:\n${log()}`);
}

export async function startService(): Promise<LiveService> {
  const workDir = mkdtempSync(join(tmpdir(), 'study-ui-'));
  const readersPath = join(workDir, 'readers.json');
  const casesPath = join(workDir, 'cases.json');
  writeFileSync(readersPath, JSON.stringify(READERS));
  writeFileSync(casesPath, JSON.stringify(CASES));

  execFileSync('python3', [
    '-m', 'mammochrome.cli', 'study', 'plan',
    '--readers', readersPath,
    '--cases', casesPath,
    '--output-dir', workDir,
    '--washout-days', '28',
    '--seed', '5',
  ], { stdio: 'pipe' });
  const plan: Plan = JSON.parse(readFileSync(join(workDir, 'plan.json'), 'utf8'));

  let lastError: unknown = null;
  for (let attempt = 0; attempt < 3; attempt++) {
    const port = 20000 + Math.floor(Math.random() * 30000);
    const baseUrl = `http://127.0.0.1:${port}`;
    const storeDir = join(workDir, `store-${attempt}`);
    const child = spawn('python3', [
      '-m', 'mammochrome.cli', 'serve',
      '--store', storeDir,
      '--host', '127.0.0.1',
      '--port', String(port),
    ]);
    const chunks: string[] = [];
    child.stdout?.on('data', (d) => chunks.push(String(d)));
    child.stderr?.on('data', (d) => chunks.push(String(d)));

    try {
      await waitUntilUp(baseUrl, child, () => chunks.join(''));
      const assets = caseAssets();
      const created = await fetch(`${baseUrl}/studies`, {
        method: 'POST',
        headers: { 'content-type': 'application/json' },
        body: JSON.stringify({ plan, assets, study_id: 'ui-study' }),
      });
      if (created.status !== 201) {
        throw new Error(`study creation failed: ${created.status} ${await created.text()}`);
      }
      const { study_id: studyId } = await created.json() as { study_id: string };
      return {
        baseUrl,
        studyId,
        plan,
        assets,
        stop() {
          child.kill('SIGTERM');
          rmSync(workDir, { recursive: true, force: true });
        },
      };
    } catch (err) {
      lastError = err;
      child.kill('SIGKILL');
      await sleep(200);
    }
  }
  rmSync(workDir, { recursive: true, force: true });
  throw lastError;
}

/** The reader whose first session runs under the given condition. */
export function readerFor(plan: Plan, condition: string): PlanReader {
  const reader = plan.readers.find((r) => r.condition_order[0] === condition);
  if (!reader) throw new Error(`no reader opens under ${condition}`);
  return reader;
}
