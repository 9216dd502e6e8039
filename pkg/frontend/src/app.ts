// Review console wiring: DOM rendering plus keyboard triage.
//
// The server is authoritative for everything that matters. This layer
// never decides whether a ticket is releasable; it renders what
// /quarantine returns and disables the approve control exactly when the
// server would answer 412. All nodes are built with createElement and
// textContent, never innerHTML, because ticket text is untrusted.

import { ApiError, GatewayClient } from './api.js';
import {
  EDIT_ACTIONS,
  ReviewViewModel,
  TicketDetail,
  dispositionFor,
  emptyViewModel,
  reviewableQueue,
  withNotice,
  withQueue,
  withTicket,
  withoutTicket,
} from './model.js';
import { categoryClass, segmentText } from './highlight.js';

type Screen = 'login' | 'queue' | 'ticket';

interface AppState {
  screen: Screen;
  vm: ReviewViewModel;
  principal: string | null;
  selectedFinding: number; // index into the open ticket's findings
  busy: boolean;
}

function gatewayBase(): string {
  const meta = document.querySelector('meta[name="gateway-base"]');
  const content = meta?.getAttribute('content');
  return content ? content.replace(/\/$/, '') : '';
}

export class ReviewApp {
  private state: AppState = {
    screen: 'login',
    vm: emptyViewModel(),
    principal: null,
    selectedFinding: 0,
    busy: false,
  };

  constructor(
    private readonly root: HTMLElement,
    private readonly client: GatewayClient = new GatewayClient(gatewayBase()),
  ) {}

  start(): void {
    document.addEventListener('keydown', (ev) => this.onKey(ev));
    this.render();
  }

  // --- Server interactions -------------------------------------------

  private async refreshQueue(): Promise<void> {
    const tickets = await this.client.fetchQueue();
    this.state.vm = withQueue(this.state.vm, reviewableQueue(tickets));
    this.state.screen = 'queue';
  }

  private async openTicket(id: string): Promise<void> {
    const detail = await this.client.openTicket(id);
    this.state.vm = withTicket(this.state.vm, detail);
    this.state.selectedFinding = 0;
    this.state.screen = 'ticket';
  }

  private async applyEdit(path: string, action: (typeof EDIT_ACTIONS)[number]): Promise<void> {
    const ticket = this.state.vm.ticket;
    if (ticket === null) return;
    const detail = await this.client.submitEdit(ticket.id, path, action);
    this.state.vm = withTicket(this.state.vm, detail);
    if (this.state.selectedFinding >= detail.findings.length) {
      this.state.selectedFinding = Math.max(0, detail.findings.length - 1);
    }
  }

  private async approve(): Promise<void> {
    const ticket = this.state.vm.ticket;
    if (ticket === null || !this.state.vm.approveEnabled) return;
    const result = await this.client.submitApprove(ticket.id);
    this.state.vm = withNotice(
      withoutTicket(this.state.vm),
      `ticket ${result.id} approved, released as ${result.cleared_id}`,
    );
    await this.refreshQueue();
  }

  private async reject(reason: string): Promise<void> {
    const ticket = this.state.vm.ticket;
    if (ticket === null) return;
    const result = await this.client.submitReject(ticket.id, reason);
    this.state.vm = withNotice(withoutTicket(this.state.vm), `ticket ${result.id} rejected`);
    await this.refreshQueue();
  }

  // Route an operation's failure through the shared disposition table.
  private async run(op: () => Promise<void>): Promise<void> {
    if (this.state.busy) return;
    this.state.busy = true;
    this.render();
    try {
      await op();
    } catch (err) {
      if (err instanceof ApiError) {
        const disposition = dispositionFor(err.status, err.message);
        switch (disposition.kind) {
          case 'login':
            this.client.clearSession();
            this.state = { ...this.state, screen: 'login', vm: emptyViewModel(), principal: null };
            break;
          case 'inline':
            this.state.vm = withNotice(this.state.vm, disposition.message);
            break;
          case 'refresh-queue':
            this.state.vm = withNotice(withoutTicket(this.state.vm), 'ticket changed elsewhere, queue reloaded');
            try {
              await this.refreshQueue();
            } catch {
              // fall through to render; a second failure just leaves the notice
            }
            break;
          case 'show':
            this.state.vm = withNotice(this.state.vm, disposition.message);
            break;
        }
      } else {
        this.state.vm = withNotice(this.state.vm, `gateway unreachable: ${String(err)}`);
      }
    } finally {
      this.state.busy = false;
      this.render();
    }
  }

  // --- Keyboard triage ------------------------------------------------

  private onKey(ev: KeyboardEvent): void {
    if (this.state.screen !== 'ticket' || this.state.busy) return;
    const target = ev.target as HTMLElement | null;
    if (target && (target.tagName === 'INPUT' || target.tagName === 'TEXTAREA')) return;
    const ticket = this.state.vm.ticket;
    if (ticket === null) return;

    if (ev.key === 'n' && ticket.findings.length > 0) {
      this.state.selectedFinding = (this.state.selectedFinding + 1) % ticket.findings.length;
      this.render();
    } else if (ev.key === 'r') {
      const finding = ticket.findings[this.state.selectedFinding];
      if (finding !== undefined) {
        void this.run(() => this.applyEdit(finding.path, 'Redact'));
      }
    } else if (ev.key === 'a' && this.state.vm.approveEnabled) {
      void this.run(() => this.approve());
    }
  }

  // --- Rendering ------------------------------------------------------

  private render(): void {
    this.root.textContent = '';
    switch (this.state.screen) {
      case 'login':
        this.root.appendChild(this.renderLogin());
        break;
      case 'queue':
        this.root.appendChild(this.renderQueue());
        break;
      case 'ticket':
        this.root.appendChild(this.renderTicket());
        break;
    }
  }

  private notice(): HTMLElement | null {
    if (this.state.vm.notice === null) return null;
    const el = document.createElement('p');
    el.className = 'notice';
    el.textContent = this.state.vm.notice;
    return el;
  }

  private renderLogin(): HTMLElement {
    const form = document.createElement('form');
    form.className = 'login';

    const heading = document.createElement('h1');
    heading.textContent = 'Quarantine review';
    form.appendChild(heading);

    const fields: { label: string; type: string; name: string }[] = [
      { label: 'Principal', type: 'text', name: 'principal' },
      { label: 'Password', type: 'password', name: 'password' },
      { label: 'One-time code', type: 'text', name: 'totp' },
    ];
    const inputs = new Map<string, HTMLInputElement>();
    for (const field of fields) {
      const label = document.createElement('label');
      label.textContent = field.label;
      const input = document.createElement('input');
      input.type = field.type;
      input.name = field.name;
      input.autocomplete = 'off';
      label.appendChild(input);
      form.appendChild(label);
      inputs.set(field.name, input);
    }

    const submit = document.createElement('button');
    submit.type = 'submit';
    submit.textContent = 'Sign in';
    form.appendChild(submit);

    const banner = this.notice();
    if (banner) form.appendChild(banner);

    form.addEventListener('submit', (ev) => {
      ev.preventDefault();
      const principal = inputs.get('principal')?.value ?? '';
      const password = inputs.get('password')?.value ?? '';
      const totp = inputs.get('totp')?.value ?? '';
      void this.run(async () => {
        const session = await this.client.login(principal, password, totp);
        this.state.principal = session.principal;
        this.state.vm = emptyViewModel();
        await this.refreshQueue();
      });
    });
    return form;
  }

  private renderQueue(): HTMLElement {
    const container = document.createElement('section');
    container.className = 'queue';

    const heading = document.createElement('h1');
    heading.textContent = 'Quarantine queue';
    container.appendChild(heading);

    const banner = this.notice();
    if (banner) container.appendChild(banner);

    const refresh = document.createElement('button');
    refresh.textContent = 'Refresh';
    refresh.addEventListener('click', () => void this.run(() => this.refreshQueue()));
    container.appendChild(refresh);

    if (this.state.vm.queue.length === 0) {
      const empty = document.createElement('p');
      empty.className = 'empty';
      empty.textContent = 'Nothing waiting for review.';
      container.appendChild(empty);
      return container;
    }

    const table = document.createElement('table');
    const head = document.createElement('tr');
    for (const column of ['Ticket', 'Kind', 'State', 'Findings', 'Created']) {
      const th = document.createElement('th');
      th.textContent = column;
      head.appendChild(th);
    }
    table.appendChild(head);

    for (const summary of this.state.vm.queue) {
      const row = document.createElement('tr');
      row.className = 'ticket-row';
      const cells = [
        summary.id,
        summary.kind,
        summary.state,
        String(summary.findings),
        summary.created_at,
      ];
      for (const text of cells) {
        const td = document.createElement('td');
        td.textContent = text;
        row.appendChild(td);
      }
      row.addEventListener('click', () => void this.run(() => this.openTicket(summary.id)));
      table.appendChild(row);
    }
    container.appendChild(table);
    return container;
  }

  private renderTicket(): HTMLElement {
    const ticket = this.state.vm.ticket;
    const container = document.createElement('section');
    container.className = 'ticket';
    if (ticket === null) {
      container.textContent = 'No ticket open.';
      return container;
    }

    const heading = document.createElement('h1');
    heading.textContent = `${ticket.id} (${ticket.kind}, ${ticket.state})`;
    container.appendChild(heading);

    const back = document.createElement('button');
    back.textContent = 'Back to queue';
    back.addEventListener('click', () =>
      void this.run(async () => {
        this.state.vm = withoutTicket(this.state.vm);
        await this.refreshQueue();
      }),
    );
    container.appendChild(back);

    const counter = document.createElement('p');
    counter.className = 'remaining';
    counter.textContent =
      this.state.vm.remaining === 0
        ? 'No findings remain.'
        : `${this.state.vm.remaining} finding(s) remain.`;
    container.appendChild(counter);

    const banner = this.notice();
    if (banner) container.appendChild(banner);

    container.appendChild(this.renderElements(ticket));
    container.appendChild(this.renderFindings(ticket));

    if (ticket.edits.length > 0) {
      const editsHeading = document.createElement('h2');
      editsHeading.textContent = 'Edits applied';
      container.appendChild(editsHeading);
      const list = document.createElement('ul');
      for (const edit of ticket.edits) {
        const item = document.createElement('li');
        item.textContent = `${edit.action} ${edit.path} by ${edit.actor} at ${edit.timestamp}`;
        list.appendChild(item);
      }
      container.appendChild(list);
    }

    // --- Decision controls ---
    const controls = document.createElement('div');
    controls.className = 'decision';

    const approve = document.createElement('button');
    approve.textContent = 'Approve and release';
    approve.disabled = !this.state.vm.approveEnabled || this.state.busy;
    approve.addEventListener('click', () => void this.run(() => this.approve()));
    controls.appendChild(approve);

    const reasonInput = document.createElement('input');
    reasonInput.type = 'text';
    reasonInput.placeholder = 'Rejection reason';
    controls.appendChild(reasonInput);

    const reject = document.createElement('button');
    reject.textContent = 'Reject';
    reject.disabled = this.state.busy;
    reject.addEventListener('click', () => void this.run(() => this.reject(reasonInput.value)));
    controls.appendChild(reject);

    container.appendChild(controls);

    const hint = document.createElement('p');
    hint.className = 'hint';
    hint.textContent = 'Keys: n next finding, r redact selected, a approve';
    container.appendChild(hint);

    return container;
  }

  private renderElements(ticket: TicketDetail): HTMLElement {
    const wrap = document.createElement('div');
    wrap.className = 'elements';
    const heading = document.createElement('h2');
    heading.textContent = 'Content';
    wrap.appendChild(heading);

    const list = document.createElement('dl');
    for (const element of ticket.elements) {
      const term = document.createElement('dt');
      term.textContent = `${element.path} (${element.kind})`;
      list.appendChild(term);

      const value = document.createElement('dd');
      const findings = this.state.vm.findingsByPath.get(element.path) ?? [];
      for (const segment of segmentText(element.text, findings)) {
        if (segment.category === null) {
          value.appendChild(document.createTextNode(segment.text));
        } else {
          const mark = document.createElement('mark');
          mark.className = categoryClass(segment.category);
          mark.textContent = segment.text;
          value.appendChild(mark);
        }
      }
      if (element.text.length === 0) {
        value.appendChild(document.createTextNode('(empty)'));
      }
      list.appendChild(value);
    }
    wrap.appendChild(list);
    return wrap;
  }

  private renderFindings(ticket: TicketDetail): HTMLElement {
    const wrap = document.createElement('div');
    wrap.className = 'findings';
    const heading = document.createElement('h2');
    heading.textContent = 'Findings';
    wrap.appendChild(heading);

    if (ticket.findings.length === 0) {
      const done = document.createElement('p');
      done.textContent = 'All findings resolved.';
      wrap.appendChild(done);
      return wrap;
    }

    const list = document.createElement('ol');
    ticket.findings.forEach((finding, index) => {
      const item = document.createElement('li');
      if (index === this.state.selectedFinding) item.className = 'selected';

      const label = document.createElement('span');
      label.textContent = `${finding.category} at ${finding.path} [${finding.span[0]}, ${finding.span[1]}) via ${finding.detector}`;
      item.appendChild(label);

      for (const action of EDIT_ACTIONS) {
        const button = document.createElement('button');
        button.textContent = action;
        button.disabled = this.state.busy;
        button.addEventListener('click', () =>
          void this.run(() => this.applyEdit(finding.path, action)),
        );
        item.appendChild(button);
      }
      list.appendChild(item);
    });
    wrap.appendChild(list);
    return wrap;
  }
}

// Entry point for the page; tests construct ReviewApp directly instead.
export function mount(): void {
  const root = document.getElementById('app');
  if (root !== null) new ReviewApp(root).start();
}
