import { describe, expect, it } from 'vitest';
import { ApiError, GatewayClient, FetchLike } from '../src/api.js';

interface Recorded {
  url: string;
  method: string;
  headers: Record<string, string>;
  body: unknown;
}

// Scripted fetch stand-in: pops one response per call, records the request.
function stubFetch(responses: { status: number; body: unknown }[]): {
  fetcher: FetchLike;
  calls: Recorded[];
} {
  const calls: Recorded[] = [];
  const queue = [...responses];
  const fetcher: FetchLike = async (input, init) => {
    const next = queue.shift();
    if (!next) throw new Error('stub exhausted');
    calls.push({
      url: input,
      method: init?.method ?? 'GET',
      headers: (init?.headers as Record<string, string>) ?? {},
      body: typeof init?.body === 'string' ? JSON.parse(init.body) : undefined,
    });
    return new Response(JSON.stringify(next.body), {
      status: next.status,
      headers: { 'Content-Type': 'application/json' },
    });
  };
  return { fetcher, calls };
}

const LOGIN_OK = {
  status: 200,
  body: {
    token: 'tok-123',
    principal: 'reviewer',
    privileges: ['review'],
    expires_at: '2026-01-15T22:00:00+00:00',
  },
};

describe('GatewayClient.login', () => {
  it('posts the credential triple and keeps the token', async () => {
    const { fetcher, calls } = stubFetch([LOGIN_OK]);
    const client = new GatewayClient('http://gw', fetcher);
    expect(client.authenticated).toBe(false);

    const result = await client.login('reviewer', 'pw-reviewer', '123456');
    expect(result.token).toBe('tok-123');
    expect(client.authenticated).toBe(true);

    expect(calls).toHaveLength(1);
    const call = calls[0]!;
    expect(call.url).toBe('http://gw/auth/login');
    expect(call.method).toBe('POST');
    expect(call.headers['Content-Type']).toBe('application/json');
    expect(call.body).toEqual({
      principal: 'reviewer',
      password: 'pw-reviewer',
      totp_code: '123456',
    });
    // no token yet when logging in
    expect(call.headers['Authorization']).toBeUndefined();
  });

  it('surfaces the server error on bad credentials', async () => {
    const { fetcher } = stubFetch([{ status: 401, body: { error: 'invalid credentials' } }]);
    const client = new GatewayClient('http://gw', fetcher);
    const failure = await client.login('reviewer', 'wrong', '000000').catch((e) => e);
    expect(failure).toBeInstanceOf(ApiError);
    expect(failure.status).toBe(401);
    expect(failure.message).toBe('invalid credentials');
    expect(client.authenticated).toBe(false);
  });
});

describe('GatewayClient quarantine calls', () => {
  async function loggedIn(responses: { status: number; body: unknown }[]) {
    const stub = stubFetch([LOGIN_OK, ...responses]);
    const client = new GatewayClient('http://gw', stub.fetcher);
    await client.login('reviewer', 'pw', '123456');
    return { client, calls: stub.calls };
  }

  it('sends the bearer token on every call after login', async () => {
    const { client, calls } = await loggedIn([
      { status: 200, body: { tickets: [] } },
    ]);
    await client.fetchQueue();
    expect(calls[1]!.headers['Authorization']).toBe('Bearer tok-123');
  });

  it('hits the exact queue and detail paths', async () => {
    const detail = {
      id: 'QT-0001',
      kind: 'Patient',
      state: 'Quarantined',
      created_at: 'x',
      reject_reason: null,
      findings: [],
      edits: [],
      elements: [],
      remaining: 0,
    };
    const { client, calls } = await loggedIn([
      { status: 200, body: { tickets: [{ id: 'QT-0001' }] } },
      { status: 200, body: detail },
    ]);
    const queue = await client.fetchQueue();
    expect(queue).toEqual([{ id: 'QT-0001' }]);
    const opened = await client.openTicket('QT-0001');
    expect(opened.id).toBe('QT-0001');

    expect(calls[1]!.url).toBe('http://gw/quarantine');
    expect(calls[1]!.method).toBe('GET');
    expect(calls[2]!.url).toBe('http://gw/quarantine/QT-0001');
  });

  it('posts edits with path and action', async () => {
    const { client, calls } = await loggedIn([
      { status: 200, body: { id: 'QT-0001', remaining: 0, findings: [] } },
    ]);
    await client.submitEdit('QT-0001', 'conclusion', 'Redact');
    expect(calls[1]!.url).toBe('http://gw/quarantine/QT-0001/edits');
    expect(calls[1]!.method).toBe('POST');
    expect(calls[1]!.body).toEqual({ path: 'conclusion', action: 'Redact' });
  });

  it('approve and reject go to their own endpoints', async () => {
    const { client, calls } = await loggedIn([
      { status: 200, body: { id: 'QT-1', state: 'Approved', cleared_id: 'PSN-x', object: 'fhir/y' } },
      { status: 200, body: { id: 'QT-2', state: 'Rejected' } },
    ]);
    const approved = await client.submitApprove('QT-1');
    expect(approved.state).toBe('Approved');
    const rejected = await client.submitReject('QT-2', 'unsalvageable');
    expect(rejected.state).toBe('Rejected');

    expect(calls[1]!.url).toBe('http://gw/quarantine/QT-1/approve');
    expect(calls[1]!.body).toBeUndefined();
    expect(calls[2]!.url).toBe('http://gw/quarantine/QT-2/reject');
    expect(calls[2]!.body).toEqual({ reason: 'unsalvageable' });
  });

  it('maps premature approval to an ApiError carrying the 412', async () => {
    const { client } = await loggedIn([
      { status: 412, body: { error: 'findings remain: 2 outstanding' } },
    ]);
    const failure = await client.submitApprove('QT-1').catch((e) => e);
    expect(failure).toBeInstanceOf(ApiError);
    expect(failure.status).toBe(412);
    expect(failure.message).toContain('findings remain');
  });

  it('clearSession drops the token', async () => {
    const { client } = await loggedIn([]);
    client.clearSession();
    expect(client.authenticated).toBe(false);
  });

  it('tolerates a non-JSON error body', async () => {
    const fetcher: FetchLike = async () => new Response('gateway melted', { status: 502 });
    const client = new GatewayClient('http://gw', fetcher);
    const failure = await client.fetchQueue().catch((e) => e);
    expect(failure).toBeInstanceOf(ApiError);
    expect(failure.status).toBe(502);
    expect(failure.message).toContain('502');
  });
});
