/**
 * Live round trip: drive a full edit against the real toy-backbone service
 * through the studio's client code, then verify the rendered result is
 * byte-identical to the artifact the pipeline persisted and that the
 * exported mask survives the trip unchanged.
 */
import { spawn, ChildProcess } from "node:child_process";
import { deflateSync, inflateSync } from "node:zlib";
import { afterAll, beforeAll, describe, expect, it } from "vitest";

import { EditServiceClient } from "../src/api.js";
import { MaskLayer } from "../src/maskLayer.js";
import { decodePNG, encodeGrayPNG, encodeRGBPNG, grayChannel } from "../src/png.js";
import { CanvasSession, SessionImage } from "../src/session.js";
import { IDENTITY_VIEW } from "../src/transform.js";

const deflate = (d: Uint8Array) => new Uint8Array(deflateSync(d));
const inflate = (d: Uint8Array) => new Uint8Array(inflateSync(d));

const PORT = 8300 + (process.pid % 500);
const BASE = `http://127.0.0.1:${PORT}`;

let server: ChildProcess | null = null;

async function waitForHealth(timeoutMs = 60_000): Promise<void> {
  const start = Date.now();
  for (;;) {
    try {
      const r = await fetch(`${BASE}/v1/health`);
      if (r.ok) return;
    } catch {
      // not up yet
    }
    if (Date.now() - start > timeoutMs) throw new Error("service did not come up");
    await new Promise((r) => setTimeout(r, 300));
  }
}

function syntheticSource(side = 512): SessionImage {
  // flat background with a colored disk: gives the flood-fill segmenter and
  // the pipeline something object-like to work on
  const pixels = new Uint8Array(side * side * 3);
  for (let i = 0; i < side * side; i++) {
    pixels[i * 3] = 230;
    pixels[i * 3 + 1] = 226;
    pixels[i * 3 + 2] = 218;
  }
  const cx = 180, cy = 220, r = 60;
  for (let y = cy - r; y <= cy + r; y++) {
    for (let x = cx - r; x <= cx + r; x++) {
      if ((x - cx) ** 2 + (y - cy) ** 2 <= r * r) {
        const i = y * side + x;
        pixels[i * 3] = 40;
        pixels[i * 3 + 1] = 90;
        pixels[i * 3 + 2] = 200;
      }
    }
  }
  const png = encodeRGBPNG(pixels, side, side, deflate);
  return { width: side, height: side, pixels, png };
}

beforeAll(async () => {
  server = spawn("python3", [
    "-m", "occlumove.cli", "serve",
    "--host", "127.0.0.1", "--port", String(PORT),
    "--steps", "4", "--lora-steps", "2", "--lora-lr", "1.0", "--seed", "7",
    "--artifact-root", `/tmp/studio-roundtrip-${process.pid}`,
  ], { stdio: ["ignore", "pipe", "pipe"], cwd: ".." });
  server.stderr?.on("data", () => undefined);
  await waitForHealth();
}, 90_000);

afterAll(() => {
  server?.kill("SIGTERM");
});

describe("studio round trip against the toy service", () => {
  it("completes an edit and renders the byte-identical persisted result", async () => {
    const client = new EditServiceClient(BASE);
    const session = new CanvasSession(syntheticSource(), client);

    // paint the visible mask over the disk and pick the target point
    session.mask.beginStroke();
    session.mask.stroke(180, 220, 180, 220, 55);
    expect(session.mask.isEmpty()).toBe(false);
    const g = session.pickTarget(IDENTITY_VIEW, 360, 300);
    expect(g).toEqual({ x: 360, y: 300 });

    const status = await session.runAndMonitor(
      "donut",
      (px, w, h) => encodeGrayPNG(px, w, h, deflate),
      { steps: 4, lora_steps: 2 },
      undefined,
      150,
    );
    expect(status.state).toBe("done");
    expect(session.resultPng).not.toBeNull();

    // the rendered result is exactly the artifact the pipeline persisted
    const persisted = await client.fetchArtifact(session.activeJobId!, "edited.png");
    expect(Buffer.from(session.resultPng!).equals(Buffer.from(persisted))).toBe(true);

    // the exported mask round-trips through the service unchanged
    const maskBack = await client.fetchArtifact(session.activeJobId!, "mask.png");
    const grid = grayChannel(decodePNG(maskBack, inflate));
    const ours = session.mask.exportPixels();
    expect(Buffer.from(grid).equals(Buffer.from(ours))).toBe(true);

    // submitted target echoes back verbatim in the job status
    const echoed = await client.getStatus(session.activeJobId!);
    expect((echoed as unknown as { target_xy: number[] }).target_xy).toEqual([360, 300]);

    // refined-map overlays are fetchable and cache after the first hit
    expect(session.overlayNames.length).toBeGreaterThan(0);
    const frame = await session.overlay(session.overlayNames[0]);
    expect(frame.bytes.length).toBeGreaterThan(0);
    expect(session.overlayCached(session.overlayNames[0])).toBe(true);
  }, 180_000);

  it("click-to-segment returns a disk-shaped editable mask", async () => {
    const client = new EditServiceClient(BASE);
    const session = new CanvasSession(syntheticSource(), client);
    const ok = await session.segmentClick({ x: 180, y: 220 }, (png) => {
      const decoded = decodePNG(png, inflate);
      return { grid: grayChannel(decoded), width: decoded.width, height: decoded.height };
    });
    expect(ok).toBe(true);
    const diskArea = Math.PI * 60 * 60;
    expect(Math.abs(session.mask.area() - diskArea)).toBeLessThan(0.02 * diskArea);
    // still editable afterwards
    session.mask.beginStroke();
    session.mask.stroke(10, 10, 10, 10, 3);
    expect(session.mask.get(10, 10)).toBe(1);
  }, 60_000);
});
