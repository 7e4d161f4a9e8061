// DOM builders for the three screens. Pure render functions: given data and
// handlers, they replace the root's content. All text comes from the server.

import { FEEDBACK_MIN_CHARS, LABELS, Prediction, RunSummary, Task } from "./api.js";

function el<K extends keyof HTMLElementTagNameMap>(
  tag: K,
  className?: string,
  text?: string,
): HTMLElementTagNameMap[K] {
  const node = document.createElement(tag);
  if (className) node.className = className;
  if (text !== undefined) node.textContent = text;
  return node;
}

function predictionBlock(prediction: Prediction): HTMLElement {
  const box = el("div", "prediction");
  box.appendChild(el("h3", undefined, "Model prediction"));
  box.appendChild(el("p", "pred-label", prediction.label ?? "(no parseable prediction)"));
  if (prediction.confidence !== null && prediction.confidence !== undefined) {
    box.appendChild(el("p", "pred-confidence", `confidence ${prediction.confidence.toFixed(2)}`));
  }
  if (prediction.explanation) {
    box.appendChild(el("p", "pred-explanation", prediction.explanation));
  }
  return box;
}

function ruleBlock(task: Task): HTMLElement {
  const box = el("div", "rules");
  const pre = el("pre", "rule-rendering", task.rule_rendering);
  box.appendChild(pre);
  if (task.assumptions.length) {
    box.appendChild(el("h3", undefined, "Annotation assumptions"));
    const list = el("ul", "assumptions");
    for (const assumption of task.assumptions) {
      list.appendChild(el("li", undefined, assumption));
    }
    box.appendChild(list);
  }
  return box;
}

export interface QueueHandlers {
  onClaim: (task: Task) => void;
  onRefresh: () => void;
}

export function renderQueue(
  root: HTMLElement,
  runs: RunSummary[],
  tasks: Task[],
  handlers: QueueHandlers,
): void {
  root.replaceChildren();
  const header = el("div", "queue-header");
  header.appendChild(el("h2", undefined, `Pending tasks (${tasks.length})`));
  const refresh = el("button", "refresh", "Refresh");
  refresh.addEventListener("click", handlers.onRefresh);
  header.appendChild(refresh);
  root.appendChild(header);

  const active = runs.find((run) => run.phase !== null);
  if (active) {
    root.appendChild(el("p", "phase-note", `run ${active.run_id}: ${active.phase} round active`));
  }

  if (!tasks.length) {
    root.appendChild(el("p", "empty-queue", "No pending tasks."));
    return;
  }
  for (const mode of ["Label", "Feedback"] as const) {
    const group = tasks.filter((task) => task.mode === mode);
    if (!group.length) continue;
    root.appendChild(el("h3", "mode-heading", `${mode} (${group.length})`));
    const grid = el("div", "task-grid");
    for (const task of group) {
      const card = el("div", "task-card");
      card.dataset.taskId = task.task_id;
      const thumb = el("img", "thumb") as HTMLImageElement;
      thumb.src = task.image_url;
      thumb.alt = task.sample_id;
      card.appendChild(thumb);
      card.appendChild(el("p", "card-title", task.rule_category_id));
      card.appendChild(el("p", "card-sub", task.sample_id));
      const claim = el("button", "claim", "Claim");
      claim.addEventListener("click", () => handlers.onClaim(task));
      card.appendChild(claim);
      grid.appendChild(card);
    }
    root.appendChild(grid);
  }
}

export interface LabelHandlers {
  onSubmit: (label: string) => void;
  onBack: () => void;
}

export function renderLabelView(root: HTMLElement, task: Task, handlers: LabelHandlers): void {
  root.replaceChildren();
  const view = el("div", "task-view label-view");
  view.appendChild(el("h2", undefined, `Label: ${task.rule_category_id}`));

  const image = el("img", "task-image") as HTMLImageElement;
  image.src = task.image_url;
  image.alt = task.sample_id;
  view.appendChild(image);

  view.appendChild(ruleBlock(task));
  view.appendChild(predictionBlock(task.prediction));

  const buttons = el("div", "label-buttons");
  let selected: string | null = null;
  const labelButtons: HTMLButtonElement[] = [];
  LABELS.forEach((label, index) => {
    const button = el("button", "label-choice", `${index + 1}. ${label}`);
    button.dataset.label = label;
    button.addEventListener("click", () => {
      selected = label;
      labelButtons.forEach((b) => b.classList.toggle("selected", b === button));
    });
    labelButtons.push(button);
    buttons.appendChild(button);
  });
  view.appendChild(buttons);

  const submit = el("button", "submit", "Submit (Enter)");
  submit.addEventListener("click", () => {
    if (selected) handlers.onSubmit(selected);
  });
  view.appendChild(submit);

  const back = el("button", "back", "Back to queue");
  back.addEventListener("click", handlers.onBack);
  view.appendChild(back);

  view.appendChild(el("p", "status", ""));
  root.appendChild(view);
}

export interface FeedbackHandlers {
  onSubmit: (text: string) => void;
  onSkip: () => void;
  onBack: () => void;
}

export function renderFeedbackView(root: HTMLElement, task: Task, handlers: FeedbackHandlers): void {
  root.replaceChildren();
  const view = el("div", "task-view feedback-view");
  view.appendChild(el("h2", undefined, `Feedback: ${task.rule_category_id}`));

  const image = el("img", "task-image") as HTMLImageElement;
  image.src = task.image_url;
  image.alt = task.sample_id;
  view.appendChild(image);

  view.appendChild(ruleBlock(task));
  view.appendChild(predictionBlock(task.prediction));

  const box = el("textarea", "feedback-text") as HTMLTextAreaElement;
  box.placeholder = `Explain what the model missed (at least ${FEEDBACK_MIN_CHARS} characters)`;
  view.appendChild(box);
  view.appendChild(
    el("p", "floor-hint", `Minimum ${FEEDBACK_MIN_CHARS} characters of guidance.`),
  );

  const submit = el("button", "submit", "Submit feedback");
  submit.addEventListener("click", () => {
    const text = box.value.trim();
    if (text.length < FEEDBACK_MIN_CHARS) {
      setStatus(root, "Feedback too short; please try again with more detail.", "warn");
      return;
    }
    handlers.onSubmit(text);
  });
  view.appendChild(submit);

  const skip = el("button", "skip", "Skip");
  skip.addEventListener("click", handlers.onSkip);
  view.appendChild(skip);

  const back = el("button", "back", "Back to queue");
  back.addEventListener("click", handlers.onBack);
  view.appendChild(back);

  view.appendChild(el("div", "verdict", ""));
  view.appendChild(el("p", "status", ""));
  root.appendChild(view);
}

export function setStatus(root: HTMLElement, message: string, kind: "info" | "warn" | "error" = "info"): void {
  const status = root.querySelector<HTMLElement>(".status");
  if (status) {
    status.textContent = message;
    status.dataset.kind = kind;
  }
}

export function showVerdict(
  root: HTMLElement,
  verdict: {
    accepted: boolean;
    context_version?: number;
    flipped_samples?: string[];
    revised?: { label: string | null; confidence: number | null } | null;
  },
): void {
  const box = root.querySelector<HTMLElement>(".verdict");
  if (!box) return;
  box.replaceChildren();
  if (verdict.revised) {
    const revised = el("p", "revised");
    revised.textContent = `Revised prediction: ${verdict.revised.label ?? "(none)"}` +
      (verdict.revised.confidence != null ? ` @ ${verdict.revised.confidence.toFixed(2)}` : "");
    box.appendChild(revised);
  }
  if (verdict.accepted) {
    box.appendChild(
      el("p", "banner accepted", `Guidance saved, context v${verdict.context_version ?? "?"}`),
    );
  } else {
    box.appendChild(el("p", "banner rejected", "Guidance reverted: it breaks previously-correct samples."));
    if (verdict.flipped_samples?.length) {
      const list = el("ul", "flipped");
      for (const sampleId of verdict.flipped_samples) {
        list.appendChild(el("li", undefined, sampleId));
      }
      box.appendChild(list);
    }
  }
}
