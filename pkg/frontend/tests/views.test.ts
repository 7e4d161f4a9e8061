// @vitest-environment jsdom
import { beforeEach, describe, expect, it, vi } from "vitest";

import { App } from "../src/app.js";
import { Client, Task } from "../src/api.js";
import { renderFeedbackView, renderLabelView, renderQueue } from "../src/views.js";

function makeTask(overrides: Partial<Task> = {}): Task {
  return {
    task_id: "t1",
    run_id: "r1",
    sample_id: "s1",
    image_url: "/api/images/abc",
    domain: "warehouse",
    rule_category_id: "warehouse-ladder-use",
    rule_rendering: "Ladder Use\n- face the ladder [x]",
    assumptions: ["Step ladders are considered ladders."],
    mode: "Label",
    state: "Pending",
    prediction: { label: "Violated", confidence: 0.7, explanation: "one hand off" },
    ...overrides,
  };
}

let root: HTMLElement;

beforeEach(() => {
  document.body.innerHTML = '<main id="app"></main>';
  root = document.getElementById("app")!;
});

describe("queue screen", () => {
  it("shows the empty state", () => {
    renderQueue(root, [], [], { onClaim: () => {}, onRefresh: () => {} });
    expect(root.querySelector(".empty-queue")?.textContent).toContain("No pending tasks");
  });

  it("renders one card per task with thumbnails", () => {
    const tasks = [makeTask(), makeTask({ task_id: "t2", sample_id: "s2" }), makeTask({ task_id: "t3", sample_id: "s3" })];
    renderQueue(root, [], tasks, { onClaim: () => {}, onRefresh: () => {} });
    const cards = root.querySelectorAll(".task-card");
    expect(cards).toHaveLength(3);
    expect(root.querySelectorAll("img.thumb")).toHaveLength(3);
  });

  it("groups by mode", () => {
    const tasks = [makeTask(), makeTask({ task_id: "t2", mode: "Feedback" })];
    renderQueue(root, [], tasks, { onClaim: () => {}, onRefresh: () => {} });
    const headings = [...root.querySelectorAll(".mode-heading")].map((h) => h.textContent);
    expect(headings).toEqual(["Label (1)", "Feedback (1)"]);
  });
});

describe("label screen", () => {
  it("always renders exactly three label buttons", () => {
    renderLabelView(root, makeTask(), { onSubmit: () => {}, onBack: () => {} });
    const buttons = root.querySelectorAll(".label-choice");
    expect(buttons).toHaveLength(3);
    const labels = [...buttons].map((b) => (b as HTMLElement).dataset.label);
    expect(labels).toEqual(["Complied", "Violated", "Not Applicable"]);
  });

  it("shows rules, assumptions and the model prediction", () => {
    renderLabelView(root, makeTask(), { onSubmit: () => {}, onBack: () => {} });
    expect(root.querySelector(".rule-rendering")?.textContent).toContain("Ladder Use");
    expect(root.querySelector(".assumptions")?.textContent).toContain("Step ladders");
    expect(root.querySelector(".pred-label")?.textContent).toBe("Violated");
    expect(root.querySelector(".pred-confidence")?.textContent).toContain("0.70");
  });

  it("submits only after a selection", () => {
    const submitted: string[] = [];
    renderLabelView(root, makeTask(), { onSubmit: (l) => submitted.push(l), onBack: () => {} });
    (root.querySelector(".submit") as HTMLButtonElement).click();
    expect(submitted).toHaveLength(0);
    (root.querySelectorAll(".label-choice")[1] as HTMLButtonElement).click();
    (root.querySelector(".submit") as HTMLButtonElement).click();
    expect(submitted).toEqual(["Violated"]);
  });

  it("keeps the selection when the transport fails", async () => {
    const failing = {
      submitLabel: vi.fn().mockRejectedValue(new Error("network down")),
    } as unknown as Client;
    const app = new App(root, failing, false);
    app.openTask(makeTask());
    (root.querySelectorAll(".label-choice")[0] as HTMLButtonElement).click();
    (root.querySelector(".submit") as HTMLButtonElement).click();
    await vi.waitFor(() => {
      expect(root.querySelector(".status")?.textContent).toContain("Submit failed");
    });
    expect(root.querySelector(".label-choice.selected")).not.toBeNull();
  });
});

describe("feedback screen", () => {
  it("bounces sub-floor text inline without a server call", () => {
    const submitted: string[] = [];
    renderFeedbackView(root, makeTask({ mode: "Feedback" }), {
      onSubmit: (t) => submitted.push(t),
      onSkip: () => {},
      onBack: () => {},
    });
    const box = root.querySelector(".feedback-text") as HTMLTextAreaElement;
    box.value = "looks bad"; // nine characters: below the floor
    (root.querySelector(".submit") as HTMLButtonElement).click();
    expect(submitted).toHaveLength(0);
    const status = root.querySelector(".status") as HTMLElement;
    expect(status.textContent).toContain("try again");
    expect(status.dataset.kind).toBe("warn");
  });

  it("passes valid text through", () => {
    const submitted: string[] = [];
    renderFeedbackView(root, makeTask({ mode: "Feedback" }), {
      onSubmit: (t) => submitted.push(t),
      onSkip: () => {},
      onBack: () => {},
    });
    const box = root.querySelector(".feedback-text") as HTMLTextAreaElement;
    box.value = "the ladder is leaning on loose gravel";
    (root.querySelector(".submit") as HTMLButtonElement).click();
    expect(submitted).toEqual(["the ladder is leaning on loose gravel"]);
  });

  it("has a skip control", () => {
    let skipped = 0;
    renderFeedbackView(root, makeTask({ mode: "Feedback" }), {
      onSubmit: () => {},
      onSkip: () => { skipped += 1; },
      onBack: () => {},
    });
    (root.querySelector(".skip") as HTMLButtonElement).click();
    expect(skipped).toBe(1);
  });
});

describe("keyboard shortcuts", () => {
  it("1/2/3 select labels and Enter submits", async () => {
    const submitted: string[] = [];
    const client = {
      submitLabel: vi.fn().mockImplementation(async (_t: string, label: string) => {
        submitted.push(label);
        return { task_id: "t1", state: "Done", label };
      }),
      listRuns: vi.fn().mockResolvedValue([]),
      queue: vi.fn().mockResolvedValue([]),
    } as unknown as Client;
    const app = new App(root, client, false);
    await app.start();
    app.openTask(makeTask());
    document.dispatchEvent(new KeyboardEvent("keydown", { key: "3" }));
    expect(root.querySelector(".label-choice.selected")?.textContent).toContain("Not Applicable");
    document.dispatchEvent(new KeyboardEvent("keydown", { key: "Enter" }));
    await vi.waitFor(() => expect(submitted).toEqual(["Not Applicable"]));
    app.stop();
  });
});
