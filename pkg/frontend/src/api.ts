// HTTP client for the gateway's review surface.
//
// Talks to exactly two endpoint families: /auth for sessions and
// /quarantine for ticket triage. Everything else the gateway exposes is
// out of scope for this UI.

import type { TicketDetail, TicketSummary, EditAction } from './model.js';

export class ApiError extends Error {
  constructor(
    public readonly status: number,
    message: string,
  ) {
    super(message);
    this.name = 'ApiError';
  }
}

export type FetchLike = (input: string, init?: RequestInit) => Promise<Response>;

export interface LoginResult {
  token: string;
  principal: string;
  privileges: string[];
  expires_at: string;
}

export interface ApproveResult {
  id: string;
  state: string;
  cleared_id: string;
  object: string;
}

export interface RejectResult {
  id: string;
  state: string;
}

export class GatewayClient {
  private token: string | null = null;

  constructor(
    private readonly base: string,
    private readonly fetcher: FetchLike = (input, init) => globalThis.fetch(input, init),
  ) {}

  get authenticated(): boolean {
    return this.token !== null;
  }

  clearSession(): void {
    this.token = null;
  }

  private async request<T>(method: string, path: string, body?: unknown): Promise<T> {
    const headers: Record<string, string> = {};
    if (this.token !== null) headers['Authorization'] = `Bearer ${this.token}`;
    const init: RequestInit = { method, headers };
    if (body !== undefined) {
      headers['Content-Type'] = 'application/json';
      init.body = JSON.stringify(body);
    }
    const response = await this.fetcher(this.base + path, init);
    let payload: unknown = null;
    try {
      payload = await response.json();
    } catch {
      // non-JSON body; the status code is all we have
    }
    if (!response.ok) {
      const message =
        payload !== null && typeof payload === 'object' && 'error' in payload
          ? String((payload as { error: unknown }).error)
          : `request failed with status ${response.status}`;
      throw new ApiError(response.status, message);
    }
    return payload as T;
  }

  async login(principal: string, password: string, totpCode: string): Promise<LoginResult> {
    const result = await this.request<LoginResult>('POST', '/auth/login', {
      principal,
      password,
      totp_code: totpCode,
    });
    this.token = result.token;
    return result;
  }

  async fetchQueue(): Promise<TicketSummary[]> {
    const result = await this.request<{ tickets: TicketSummary[] }>('GET', '/quarantine');
    return result.tickets;
  }

  async openTicket(id: string): Promise<TicketDetail> {
    return this.request<TicketDetail>('GET', `/quarantine/${id}`);
  }

  async submitEdit(id: string, path: string, action: EditAction): Promise<TicketDetail> {
    return this.request<TicketDetail>('POST', `/quarantine/${id}/edits`, { path, action });
  }

  async submitApprove(id: string): Promise<ApproveResult> {
    return this.request<ApproveResult>('POST', `/quarantine/${id}/approve`);
  }

  async submitReject(id: string, reason: string): Promise<RejectResult> {
    return this.request<RejectResult>('POST', `/quarantine/${id}/reject`, { reason });
  }
}
