import { afterEach, describe, expect, it, vi } from "vitest";

import { ApiError, Client } from "../src/api.js";

function jsonResponse(body: unknown, status = 200): Response {
  return new Response(JSON.stringify(body), {
    status,
    headers: { "content-type": "application/json" },
  });
}

afterEach(() => {
  vi.unstubAllGlobals();
});

describe("Client", () => {
  it("lists runs", async () => {
    const fetchMock = vi.fn().mockResolvedValue(jsonResponse([{ run_id: "r1" }]));
    vi.stubGlobal("fetch", fetchMock);
    const runs = await new Client().listRuns();
    expect(runs[0].run_id).toBe("r1");
    expect(fetchMock).toHaveBeenCalledWith("/api/runs", expect.anything());
  });

  it("posts labels with a JSON body", async () => {
    const fetchMock = vi
      .fn()
      .mockResolvedValue(jsonResponse({ task_id: "t1", state: "Done", label: "Violated" }));
    vi.stubGlobal("fetch", fetchMock);
    const result = await new Client().submitLabel("t1", "Violated");
    expect(result.state).toBe("Done");
    const [url, init] = fetchMock.mock.calls[0];
    expect(url).toBe("/api/tasks/t1/label");
    expect(init.method).toBe("POST");
    expect(JSON.parse(init.body)).toEqual({ label: "Violated" });
  });

  it("surfaces 409 claim conflicts as ApiError", async () => {
    const fetchMock = vi
      .fn()
      .mockResolvedValue(jsonResponse({ detail: "task is Claimed" }, 409));
    vi.stubGlobal("fetch", fetchMock);
    const error = await new Client().claim("t9").catch((e) => e);
    expect(error).toBeInstanceOf(ApiError);
    expect(error.status).toBe(409);
    expect(error.detail).toContain("Claimed");
  });

  it("surfaces 422 floor rejections with the server detail", async () => {
    const fetchMock = vi
      .fn()
      .mockResolvedValue(jsonResponse({ detail: "feedback too short" }, 422));
    vi.stubGlobal("fetch", fetchMock);
    const error = await new Client().submitFeedback("t1", "short").catch((e) => e);
    expect(error).toBeInstanceOf(ApiError);
    expect(error.status).toBe(422);
  });

  it("filters the queue by mode", async () => {
    const fetchMock = vi.fn().mockResolvedValue(jsonResponse([]));
    vi.stubGlobal("fetch", fetchMock);
    await new Client().queue("r1", "Feedback");
    expect(fetchMock.mock.calls[0][0]).toBe("/api/runs/r1/queue?mode=Feedback");
  });

  it("keeps status text when the error body is not JSON", async () => {
    const fetchMock = vi.fn().mockResolvedValue(
      new Response("<html>bad gateway</html>", { status: 502, statusText: "Bad Gateway" }),
    );
    vi.stubGlobal("fetch", fetchMock);
    const error = await new Client().listRuns().catch((e) => e);
    expect(error).toBeInstanceOf(ApiError);
    expect(error.status).toBe(502);
  });
});
