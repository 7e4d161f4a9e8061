// Typed client for the annotation service REST API. The console performs no
// classification logic of its own; every state transition goes through here.

export interface Prediction {
  label: string | null;
  confidence: number | null;
  explanation: string | null;
}

export interface Task {
  task_id: string;
  run_id: string;
  sample_id: string;
  image_url: string;
  domain: string;
  rule_category_id: string;
  rule_rendering: string;
  assumptions: string[];
  mode: "Label" | "Feedback";
  state: "Pending" | "Claimed" | "Done" | "Skipped";
  prediction: Prediction;
}

export interface RunSummary {
  run_id: string;
  round: number;
  budget_remaining: number;
  n_human: number;
  n_pseudo: number;
  pool_remaining: number;
  context_version: number;
  active: boolean;
  phase: string | null;
  error: string | null;
}

export interface FeedbackVerdict {
  task_id: string;
  state: string;
  accepted: boolean;
  outcome?: string;
  flipped_samples?: string[];
  revised?: { label: string | null; confidence: number | null; explanation: string | null } | null;
  context_version?: number;
}

export interface RunMetrics {
  summary: RunSummary;
  savings: {
    n_human: number;
    n_pseudo: number;
    n_total: number;
    saved_fraction: number;
    saved_percent: string;
  } | null;
  eval: { macro_f1: number; accuracy: number; coverage: number } | null;
}

export class ApiError extends Error {
  constructor(public status: number, public detail: string) {
    super(`HTTP ${status}: ${detail}`);
  }
}

async function parseError(response: Response): Promise<ApiError> {
  let detail = response.statusText;
  try {
    const body = await response.json();
    if (body && typeof body.detail === "string") detail = body.detail;
  } catch {
    // non-JSON error body: keep the status text
  }
  return new ApiError(response.status, detail);
}

export class Client {
  constructor(private base: string = "") {}

  private async request<T>(path: string, init?: RequestInit): Promise<T> {
    const response = await fetch(this.base + path, {
      headers: { "content-type": "application/json" },
      ...init,
    });
    if (!response.ok) throw await parseError(response);
    return (await response.json()) as T;
  }

  listRuns(): Promise<RunSummary[]> {
    return this.request("/api/runs");
  }

  createRun(config: object): Promise<{ run_id: string }> {
    return this.request("/api/runs", { method: "POST", body: JSON.stringify(config) });
  }

  startRound(runId: string, phase: "label" | "feedback"): Promise<{ run_id: string; phase: string; round: number }> {
    return this.request(`/api/runs/${runId}/rounds`, {
      method: "POST",
      body: JSON.stringify({ phase }),
    });
  }

  queue(runId: string, mode?: "Label" | "Feedback"): Promise<Task[]> {
    const suffix = mode ? `?mode=${mode}` : "";
    return this.request(`/api/runs/${runId}/queue${suffix}`);
  }

  claim(taskId: string): Promise<Task> {
    return this.request(`/api/tasks/${taskId}/claim`, { method: "POST" });
  }

  submitLabel(taskId: string, label: string): Promise<{ task_id: string; state: string; label: string }> {
    return this.request(`/api/tasks/${taskId}/label`, {
      method: "POST",
      body: JSON.stringify({ label }),
    });
  }

  submitFeedback(taskId: string, text: string): Promise<FeedbackVerdict> {
    return this.request(`/api/tasks/${taskId}/feedback`, {
      method: "POST",
      body: JSON.stringify({ text }),
    });
  }

  skip(taskId: string): Promise<{ task_id: string; state: string }> {
    return this.request(`/api/tasks/${taskId}/skip`, { method: "POST" });
  }

  metrics(runId: string): Promise<RunMetrics> {
    return this.request(`/api/runs/${runId}/metrics`);
  }
}

export const LABELS = ["Complied", "Violated", "Not Applicable"] as const;
export const FEEDBACK_MIN_CHARS = 12;
