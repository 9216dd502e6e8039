// Server payload shapes and the pure view-model layer.
//
// The server is the single source of truth: every count, finding span and
// state string shown on screen comes from the last response, never from
// client-side re-detection.

export interface TicketSummary {
  id: string;
  kind: string;
  state: string;
  findings: number;
  created_at: string;
}

export interface Finding {
  path: string;
  category: string;
  span: [number, number];
  detector: string;
}

export interface EditRecord {
  path: string;
  action: string;
  actor: string;
  timestamp: string;
}

export interface ElementRow {
  path: string;
  kind: string;
  text: string;
}

export interface TicketDetail {
  id: string;
  kind: string;
  state: string;
  created_at: string;
  reject_reason: string | null;
  findings: Finding[];
  edits: EditRecord[];
  elements: ElementRow[];
  remaining: number;
}

export type EditAction = 'Redact' | 'ReplacePseudonym' | 'ShiftDate';

export const EDIT_ACTIONS: EditAction[] = ['Redact', 'ReplacePseudonym', 'ShiftDate'];

// States a reviewer can still act on; approved/rejected tickets drop out
// of the work queue.
const OPEN_STATES = new Set(['Quarantined', 'InReview']);

export interface ReviewViewModel {
  queue: TicketSummary[];
  ticket: TicketDetail | null;
  findingsByPath: Map<string, Finding[]>;
  remaining: number;
  // mirrors the server's 412 rule: disabled exactly while findings remain
  approveEnabled: boolean;
  notice: string | null;
}

export function emptyViewModel(): ReviewViewModel {
  return {
    queue: [],
    ticket: null,
    findingsByPath: new Map(),
    remaining: 0,
    approveEnabled: false,
    notice: null,
  };
}

export function reviewableQueue(summaries: TicketSummary[]): TicketSummary[] {
  return summaries.filter((s) => OPEN_STATES.has(s.state));
}

export function withQueue(vm: ReviewViewModel, summaries: TicketSummary[]): ReviewViewModel {
  return { ...vm, queue: reviewableQueue(summaries) };
}

export function groupFindings(findings: Finding[]): Map<string, Finding[]> {
  const byPath = new Map<string, Finding[]>();
  for (const f of findings) {
    const bucket = byPath.get(f.path);
    if (bucket) {
      bucket.push(f);
    } else {
      byPath.set(f.path, [f]);
    }
  }
  return byPath;
}

export function withTicket(vm: ReviewViewModel, detail: TicketDetail): ReviewViewModel {
  return {
    ...vm,
    ticket: detail,
    findingsByPath: groupFindings(detail.findings),
    remaining: detail.remaining,
    approveEnabled: detail.remaining === 0,
    notice: null,
  };
}

export function withoutTicket(vm: ReviewViewModel): ReviewViewModel {
  return {
    ...vm,
    ticket: null,
    findingsByPath: new Map(),
    remaining: 0,
    approveEnabled: false,
    notice: null,
  };
}

export function withNotice(vm: ReviewViewModel, notice: string): ReviewViewModel {
  return { ...vm, notice };
}

// What the app should do with a failed request.
export type ErrorDisposition =
  | { kind: 'login' }
  | { kind: 'inline'; message: string }
  | { kind: 'refresh-queue' }
  | { kind: 'show'; message: string };

export function dispositionFor(status: number, serverMessage?: string): ErrorDisposition {
  if (status === 401) return { kind: 'login' };
  if (status === 412) return { kind: 'inline', message: 'findings remain' };
  if (status === 409) return { kind: 'refresh-queue' };
  return { kind: 'show', message: serverMessage ?? `request failed (${status})` };
}
