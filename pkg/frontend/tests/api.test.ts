import { describe, expect, it } from "vitest";

import { EditServiceClient, JobStatus } from "../src/api.js";

function jsonResponse(body: unknown, status = 200): Response {
  return new Response(JSON.stringify(body), {
    status,
    headers: { "content-type": "application/json" },
  });
}

describe("edit service client", () => {
  it("submits multipart and returns the job id", async () => {
    const seen: { url: string; method?: string }[] = [];
    const fetchFn = (async (url: RequestInfo | URL, init?: RequestInit) => {
      seen.push({ url: String(url), method: init?.method });
      const form = init?.body as FormData;
      expect(form.get("target")).toBe("12,34");
      expect(form.get("category")).toBe("donut");
      expect(form.get("image")).toBeInstanceOf(Blob);
      expect(form.get("mask")).toBeInstanceOf(Blob);
      return jsonResponse({ id: "abc", state: "queued" }, 202);
    }) as typeof fetch;

    const client = new EditServiceClient("http://svc", fetchFn);
    const id = await client.submitEdit({
      imagePng: new Uint8Array([1]),
      maskPng: new Uint8Array([2]),
      target: { x: 12, y: 34 },
      category: "donut",
    });
    expect(id).toBe("abc");
    expect(seen[0].url).toBe("http://svc/v1/edits");
  });

  it("polls with non-decreasing progress until done", async () => {
    const states: JobStatus[] = [
      { id: "j", state: "queued", progress: { done: 0, total: 10 } },
      { id: "j", state: "running", progress: { done: 3, total: 10 } },
      { id: "j", state: "running", progress: { done: 7, total: 10 } },
      { id: "j", state: "done", progress: { done: 10, total: 10 } },
    ];
    let call = 0;
    const fetchFn = (async () => jsonResponse(states[Math.min(call++, 3)])) as typeof fetch;
    const client = new EditServiceClient("http://svc", fetchFn);
    const progress: number[] = [];
    const final = await client.pollUntilDone("j", (p) => progress.push(p.done), 1);
    expect(final.state).toBe("done");
    expect(progress).toEqual([0, 3, 7, 10]);
    expect([...progress].sort((a, b) => a - b)).toEqual(progress);
  });

  it("rejects when the server reports backward progress", async () => {
    const states: JobStatus[] = [
      { id: "j", state: "running", progress: { done: 5, total: 10 } },
      { id: "j", state: "running", progress: { done: 2, total: 10 } },
    ];
    let call = 0;
    const fetchFn = (async () => jsonResponse(states[Math.min(call++, 1)])) as typeof fetch;
    const client = new EditServiceClient("http://svc", fetchFn);
    await expect(client.pollUntilDone("j", undefined, 1)).rejects.toThrow(/backwards/);
  });

  it("surfaces failed jobs with their stage", async () => {
    const failed: JobStatus = {
      id: "j",
      state: "failed",
      progress: { done: 4, total: 10 },
      error: { stage: "invert_full", message: "boom" },
    };
    const fetchFn = (async () => jsonResponse(failed)) as typeof fetch;
    const client = new EditServiceClient("http://svc", fetchFn);
    const status = await client.pollUntilDone("j", undefined, 1);
    expect(status.state).toBe("failed");
    expect(status.error?.stage).toBe("invert_full");
  });

  it("returns null from segment on 503", async () => {
    const fetchFn = (async () => new Response("unavailable", { status: 503 })) as typeof fetch;
    const client = new EditServiceClient("http://svc", fetchFn);
    const out = await client.segment(new Uint8Array([1]), { x: 1, y: 2 });
    expect(out).toBeNull();
  });
});
