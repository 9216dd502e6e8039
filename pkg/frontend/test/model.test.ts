import { describe, expect, it } from 'vitest';
import {
  Finding,
  TicketDetail,
  TicketSummary,
  dispositionFor,
  emptyViewModel,
  groupFindings,
  reviewableQueue,
  withNotice,
  withQueue,
  withTicket,
  withoutTicket,
} from '../src/model.js';

function summary(id: string, state: string): TicketSummary {
  return { id, kind: 'Patient', state, findings: 2, created_at: '2026-01-15T10:00:00+00:00' };
}

function finding(path: string, lo: number, hi: number): Finding {
  return { path, category: 'Phone', span: [lo, hi], detector: 'det-phone' };
}

function detail(remaining: number, findings: Finding[]): TicketDetail {
  return {
    id: 'QT-0001',
    kind: 'DiagnosticReport',
    state: 'InReview',
    created_at: '2026-01-15T10:00:00+00:00',
    reject_reason: null,
    findings,
    edits: [],
    elements: [{ path: 'conclusion', kind: 'string', text: 'call 0199-555-0100' }],
    remaining,
  };
}

describe('reviewableQueue', () => {
  it('keeps only tickets still open for review', () => {
    const queue = reviewableQueue([
      summary('QT-1', 'Quarantined'),
      summary('QT-2', 'Approved'),
      summary('QT-3', 'InReview'),
      summary('QT-4', 'Rejected'),
    ]);
    expect(queue.map((t) => t.id)).toEqual(['QT-1', 'QT-3']);
  });

  it('passes an empty list through', () => {
    expect(reviewableQueue([])).toEqual([]);
  });
});

describe('withTicket', () => {
  it('enables approve exactly when no findings remain', () => {
    // mirrors the server: approve answers 412 while remaining > 0
    for (const remaining of [0, 1, 2, 5, 17]) {
      const vm = withTicket(emptyViewModel(), detail(remaining, []));
      expect(vm.approveEnabled).toBe(remaining === 0);
      expect(vm.remaining).toBe(remaining);
    }
  });

  it('clears any stale notice when a ticket opens', () => {
    const noisy = withNotice(emptyViewModel(), 'previous failure');
    const vm = withTicket(noisy, detail(1, [finding('conclusion', 5, 18)]));
    expect(vm.notice).toBeNull();
    expect(vm.ticket?.id).toBe('QT-0001');
  });

  it('groups findings by element path', () => {
    const f1 = finding('conclusion', 5, 18);
    const f2 = finding('conclusion', 20, 24);
    const f3 = finding('name.0.family', 0, 6);
    const vm = withTicket(emptyViewModel(), detail(3, [f1, f2, f3]));
    expect(vm.findingsByPath.get('conclusion')).toEqual([f1, f2]);
    expect(vm.findingsByPath.get('name.0.family')).toEqual([f3]);
    expect(vm.findingsByPath.has('other')).toBe(false);
  });
});

describe('withoutTicket', () => {
  it('drops the open ticket and disables approve', () => {
    const vm = withoutTicket(withTicket(emptyViewModel(), detail(0, [])));
    expect(vm.ticket).toBeNull();
    expect(vm.approveEnabled).toBe(false);
    expect(vm.remaining).toBe(0);
    expect(vm.findingsByPath.size).toBe(0);
  });
});

describe('withQueue and withNotice', () => {
  it('replaces the queue without touching the open ticket', () => {
    const opened = withTicket(emptyViewModel(), detail(1, [finding('conclusion', 0, 4)]));
    const vm = withQueue(opened, [summary('QT-9', 'Quarantined')]);
    expect(vm.queue.length).toBe(1);
    expect(vm.ticket?.id).toBe('QT-0001');
  });

  it('notice is sticky until replaced', () => {
    const vm = withNotice(emptyViewModel(), 'findings remain');
    expect(vm.notice).toBe('findings remain');
    expect(withNotice(vm, 'other').notice).toBe('other');
  });
});

describe('groupFindings', () => {
  it('preserves server order within a path', () => {
    const f1 = finding('a', 9, 12);
    const f2 = finding('a', 0, 3);
    const grouped = groupFindings([f1, f2]);
    expect(grouped.get('a')).toEqual([f1, f2]);
  });
});

describe('dispositionFor', () => {
  it('sends 401 back to login', () => {
    expect(dispositionFor(401)).toEqual({ kind: 'login' });
  });

  it('keeps 412 inline on the ticket', () => {
    const d = dispositionFor(412, 'findings remain');
    expect(d.kind).toBe('inline');
    if (d.kind === 'inline') expect(d.message).toBe('findings remain');
  });

  it('412 has a fallback message', () => {
    const d = dispositionFor(412);
    if (d.kind === 'inline') expect(d.message.length).toBeGreaterThan(0);
  });

  it('reloads the queue on 409 conflicts', () => {
    expect(dispositionFor(409, 'ticket QT-1 is Approved')).toEqual({ kind: 'refresh-queue' });
  });

  it('shows anything else with the server message', () => {
    for (const status of [400, 403, 404, 422, 500, 503]) {
      const d = dispositionFor(status, 'storage failure');
      expect(d.kind).toBe('show');
      if (d.kind === 'show') expect(d.message).toContain('storage failure');
    }
  });
});
