// End-to-end triage against a real gateway process.
//
// Spawns `enclave-gate serve` on a throwaway directory, seeds one dirty
// report through the ingress, then walks the full review flow with the
// same client and view-model code the page uses: queue, open, blocked
// approve, redact, approve, queue drained. Finally checks the released
// object on disk no longer carries the finding text.

import { afterAll, beforeAll, describe, expect, it } from 'vitest';
import { spawn, ChildProcess } from 'node:child_process';
import * as crypto from 'node:crypto';
import * as fs from 'node:fs';
import * as os from 'node:os';
import * as path from 'node:path';

import { ApiError, GatewayClient } from '../src/api.js';
import {
  dispositionFor,
  emptyViewModel,
  reviewableQueue,
  withTicket,
} from '../src/model.js';
import { segmentText } from '../src/highlight.js';

const PORT = 8600 + (process.pid % 200);
const BASE = `http://127.0.0.1:${PORT}`;
const PASSWORD = 'pw-reviewer';
const TOTP_SECRET = Buffer.from('12345678901234567890', 'utf8');
const TOTP_SECRET_B32 = 'GEZDGNBVGY3TQOJQGEZDGNBVGY3TQOJQ';
const PHONE = '0199-555-0100';

function passwordHash(password: string): string {
  const iterations = 1000;
  const salt = crypto.randomBytes(16);
  const digest = crypto.pbkdf2Sync(Buffer.from(password, 'utf8'), salt, iterations, 32, 'sha256');
  return `pbkdf2$${iterations}$${salt.toString('hex')}$${digest.toString('hex')}`;
}

function totpCode(secret: Buffer, timeSeconds: number): string {
  const counter = Buffer.alloc(8);
  counter.writeBigUInt64BE(BigInt(Math.floor(timeSeconds / 30)));
  const mac = crypto.createHmac('sha1', secret).update(counter).digest();
  const offset = mac[mac.length - 1]! & 0x0f;
  const bin =
    ((mac[offset]! & 0x7f) << 24) |
    (mac[offset + 1]! << 16) |
    (mac[offset + 2]! << 8) |
    mac[offset + 3]!;
  return String(bin % 1_000_000).padStart(6, '0');
}

let workDir: string;
let server: ChildProcess | null = null;
let serverLog = '';

async function waitForHealthy(): Promise<void> {
  const deadline = Date.now() + 20_000;
  for (;;) {
    try {
      const response = await fetch(`${BASE}/healthz`);
      if (response.ok) return;
    } catch {
      // not up yet
    }
    if (Date.now() > deadline) {
      throw new Error(`gateway never became healthy\n${serverLog}`);
    }
    await new Promise((resolve) => setTimeout(resolve, 250));
  }
}

beforeAll(async () => {
  workDir = fs.mkdtempSync(path.join(os.tmpdir(), 'review-ui-'));
  fs.writeFileSync(path.join(workDir, 'vault.key'), '0'.repeat(64) + '\n');
  fs.writeFileSync(
    path.join(workDir, 'accounts.json'),
    JSON.stringify({
      accounts: [
        {
          principal: 'reviewer',
          password_hash: passwordHash(PASSWORD),
          totp_secret_base32: TOTP_SECRET_B32,
          privileges: ['ingest', 'review'],
        },
      ],
    }),
  );
  fs.writeFileSync(
    path.join(workDir, 'config.json'),
    JSON.stringify({
      listen: `127.0.0.1:${PORT}`,
      enclave_root: 'enclave',
      quarantine_root: 'quarantine',
      vault_path: 'vault.db',
      vault_key_path: 'vault.key',
      audit_path: 'audit.log',
      accounts_path: 'accounts.json',
    }),
  );

  server = spawn('enclave-gate', ['serve', '--config', path.join(workDir, 'config.json')], {
    stdio: ['ignore', 'pipe', 'pipe'],
  });
  server.stdout?.on('data', (chunk) => (serverLog += chunk));
  server.stderr?.on('data', (chunk) => (serverLog += chunk));
  server.on('error', (err) => {
    serverLog += `spawn failed: ${err}\n`;
  });
  await waitForHealthy();
}, 30_000);

afterAll(() => {
  if (server && server.exitCode === null) server.kill('SIGTERM');
  if (workDir) fs.rmSync(workDir, { recursive: true, force: true });
});

async function rawLogin(): Promise<string> {
  const response = await fetch(`${BASE}/auth/login`, {
    method: 'POST',
    headers: { 'Content-Type': 'application/json' },
    body: JSON.stringify({
      principal: 'reviewer',
      password: PASSWORD,
      totp_code: totpCode(TOTP_SECRET, Date.now() / 1000),
    }),
  });
  expect(response.status).toBe(200);
  const body = (await response.json()) as { token: string };
  return body.token;
}

// Seeding goes through the ingress directly; the review UI itself never
// touches /ingress.
async function seedDirtyReport(): Promise<string> {
  const token = await rawLogin();
  const response = await fetch(`${BASE}/ingress/fhir`, {
    method: 'POST',
    headers: { 'Content-Type': 'application/json', Authorization: `Bearer ${token}` },
    body: JSON.stringify({
      resourceType: 'DiagnosticReport',
      id: 'r1',
      status: 'final',
      code: { coding: [{ system: 'http://loinc.org', code: '58410-2' }] },
      conclusion: `Discussed with patient, call ${PHONE} for follow-up.`,
    }),
  });
  expect(response.status).toBe(202);
  const body = (await response.json()) as { cleared: string[]; quarantined: string[] };
  expect(body.cleared).toEqual([]);
  expect(body.quarantined).toHaveLength(1);
  return body.quarantined[0]!;
}

describe('review flow against a live gateway', () => {
  it('walks a dirty report from quarantine to release', async () => {
    const ticketId = await seedDirtyReport();
    expect(ticketId).toMatch(/^QT-/);

    const client = new GatewayClient(BASE);

    // login failures land back on the login screen
    const badLogin = await client.login('reviewer', 'wrong', '000000').catch((e) => e);
    expect(badLogin).toBeInstanceOf(ApiError);
    expect(dispositionFor(badLogin.status).kind).toBe('login');

    await client.login('reviewer', PASSWORD, totpCode(TOTP_SECRET, Date.now() / 1000));

    // queue shows exactly the seeded ticket
    const queue = reviewableQueue(await client.fetchQueue());
    expect(queue.map((t) => t.id)).toEqual([ticketId]);
    expect(queue[0]!.findings).toBe(1);

    // open it; approve must be disabled while the finding stands
    let vm = withTicket(emptyViewModel(), await client.openTicket(ticketId));
    expect(vm.remaining).toBe(1);
    expect(vm.approveEnabled).toBe(false);
    expect(vm.ticket!.state).toBe('Quarantined');

    // the server's span, rendered through the highlighter, marks the phone
    const conclusion = vm.ticket!.elements.find((e) => e.path === 'conclusion');
    expect(conclusion).toBeDefined();
    const findings = vm.findingsByPath.get('conclusion') ?? [];
    expect(findings).toHaveLength(1);
    expect(findings[0]!.category).toBe('Phone');
    const marked = segmentText(conclusion!.text, findings)
      .filter((s) => s.category !== null)
      .map((s) => s.text);
    expect(marked).toEqual([PHONE]);

    // premature approve: server answers 412, UI keeps it inline
    const premature = await client.submitApprove(ticketId).catch((e) => e);
    expect(premature).toBeInstanceOf(ApiError);
    expect(premature.status).toBe(412);
    expect(dispositionFor(premature.status, premature.message)).toEqual({
      kind: 'inline',
      message: 'findings remain',
    });

    // redact the finding; the refreshed detail unlocks approve
    vm = withTicket(vm, await client.submitEdit(ticketId, 'conclusion', 'Redact'));
    expect(vm.remaining).toBe(0);
    expect(vm.approveEnabled).toBe(true);
    expect(vm.ticket!.state).toBe('InReview');
    expect(vm.ticket!.edits).toHaveLength(1);
    expect(vm.ticket!.edits[0]!.action).toBe('Redact');

    // approve releases the working copy
    const released = await client.submitApprove(ticketId);
    expect(released.state).toBe('Approved');
    expect(released.cleared_id).toMatch(/^PSN-/);
    expect(released.object).toContain(released.cleared_id);

    // a second approve is a conflict; the UI's answer is a queue refresh
    const again = await client.submitApprove(ticketId).catch((e) => e);
    expect(again).toBeInstanceOf(ApiError);
    expect(again.status).toBe(409);
    expect(dispositionFor(again.status).kind).toBe('refresh-queue');

    // approved tickets leave the review queue
    expect(reviewableQueue(await client.fetchQueue())).toEqual([]);

    // the released file exists in the enclave tree and is clean
    const slash = released.object.indexOf('/');
    const bucket = released.object.slice(0, slash);
    const key = released.object.slice(slash + 1);
    const diskPath = path.join(workDir, 'enclave', bucket, 'data', key);
    const stored = fs.readFileSync(diskPath, 'utf8');
    expect(stored).not.toContain(PHONE);
    expect(JSON.parse(stored).id).toBe(released.cleared_id);
  }, 60_000);

  it('rejects expired bearer tokens with a trip back to login', async () => {
    const client = new GatewayClient(BASE);
    const failure = await client.fetchQueue().catch((e) => e);
    expect(failure).toBeInstanceOf(ApiError);
    expect(failure.status).toBe(401);
    expect(dispositionFor(failure.status).kind).toBe('login');
  }, 15_000);
});
