// Screen controller: queue polling, claim/submit flows, keyboard shortcuts.

import { ApiError, Client, LABELS, Task } from "./api.js";
import {
  renderFeedbackView,
  renderLabelView,
  renderQueue,
  setStatus,
  showVerdict,
} from "./views.js";

const POLL_MS = 2000;

export class App {
  private current: Task | null = null;
  private pollTimer: ReturnType<typeof setInterval> | null = null;
  private busy = false;

  constructor(
    private root: HTMLElement,
    private client: Client,
    private poll: boolean = true,
  ) {}

  async start(): Promise<void> {
    this.bindKeyboard();
    await this.showQueue();
    if (this.poll) {
      this.pollTimer = setInterval(() => {
        if (this.current === null && !this.busy) void this.showQueue();
      }, POLL_MS);
    }
  }

  stop(): void {
    if (this.pollTimer !== null) clearInterval(this.pollTimer);
  }

  async showQueue(): Promise<void> {
    this.current = null;
    try {
      const runs = await this.client.listRuns();
      const tasks: Task[] = [];
      for (const run of runs) {
        tasks.push(...(await this.client.queue(run.run_id)));
      }
      renderQueue(this.root, runs, tasks, {
        onClaim: (task) => void this.claim(task),
        onRefresh: () => void this.showQueue(),
      });
    } catch (error) {
      this.root.replaceChildren();
      const message = document.createElement("p");
      message.className = "error";
      message.textContent = `Cannot reach the service: ${String(error)}`;
      this.root.appendChild(message);
    }
  }

  private async claim(task: Task): Promise<void> {
    try {
      const claimed = await this.client.claim(task.task_id);
      this.openTask(claimed);
    } catch (error) {
      if (error instanceof ApiError && error.status === 409) {
        this.toast("Task already claimed by someone else; refreshing.");
        await this.showQueue();
        return;
      }
      throw error;
    }
  }

  openTask(task: Task): void {
    this.current = task;
    if (task.mode === "Label") {
      renderLabelView(this.root, task, {
        onSubmit: (label) => void this.submitLabel(task, label),
        onBack: () => void this.showQueue(),
      });
    } else {
      renderFeedbackView(this.root, task, {
        onSubmit: (text) => void this.submitFeedback(task, text),
        onSkip: () => void this.skip(task),
        onBack: () => void this.showQueue(),
      });
    }
  }

  private async submitLabel(task: Task, label: string): Promise<void> {
    this.busy = true;
    try {
      await this.client.submitLabel(task.task_id, label);
      this.toast(`Labelled ${task.sample_id} as ${label}.`);
      await this.showQueue();
    } catch (error) {
      // keep the operator's selection; surface a retry banner
      setStatus(this.root, `Submit failed (${String(error)}); selection kept, retry.`, "error");
    } finally {
      this.busy = false;
    }
  }

  private async submitFeedback(task: Task, text: string): Promise<void> {
    this.busy = true;
    setStatus(this.root, "Running stability check on seen samples...", "info");
    try {
      const verdict = await this.client.submitFeedback(task.task_id, text);
      showVerdict(this.root, verdict);
      setStatus(this.root, "", "info");
    } catch (error) {
      if (error instanceof ApiError && error.status === 422) {
        setStatus(this.root, `${error.detail}`, "warn");
      } else {
        setStatus(this.root, `Submit failed (${String(error)}); retry.`, "error");
      }
    } finally {
      this.busy = false;
    }
  }

  private async skip(task: Task): Promise<void> {
    await this.client.skip(task.task_id);
    this.toast(`Skipped ${task.sample_id}.`);
    await this.showQueue();
  }

  private toast(message: string): void {
    const note = document.createElement("div");
    note.className = "toast";
    note.textContent = message;
    document.body.appendChild(note);
    setTimeout(() => note.remove(), 4000);
  }

  private bindKeyboard(): void {
    document.addEventListener("keydown", (event) => {
      if (this.current === null) return;
      const target = event.target as HTMLElement | null;
      if (target && target.tagName === "TEXTAREA") return;
      if (this.current.mode === "Label") {
        const index = Number.parseInt(event.key, 10);
        if (index >= 1 && index <= LABELS.length) {
          const button = this.root.querySelectorAll<HTMLButtonElement>(".label-choice")[index - 1];
          button?.click();
          event.preventDefault();
        } else if (event.key === "Enter") {
          this.root.querySelector<HTMLButtonElement>(".submit")?.click();
          event.preventDefault();
        }
      }
    });
  }
}
