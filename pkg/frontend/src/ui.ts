/**
 * Browser wiring: canvas rendering, pointer events, job launch and the
 * source/result comparison slider. All state lives in CanvasSession; this
 * module only translates DOM events and paints.
 */

import { EditServiceClient } from "./api.js";
import { CanvasSession, SessionImage } from "./session.js";
import { IDENTITY_VIEW, Viewport, imageToViewport, pan, zoomAt } from "./transform.js";

type Tool = "brush" | "erase" | "segment" | "target";

export class StudioUI {
  private view: Viewport = { ...IDENTITY_VIEW };
  session: CanvasSession | null = null;
  private tool: Tool = "brush";
  private dragging = false;
  private lastPointer: { x: number; y: number } | null = null;
  private compare = 1.0; // slider position: 0 = source, 1 = result
  private sourceBitmap: ImageBitmap | null = null;
  private resultBitmap: ImageBitmap | null = null;
  private overlayBitmap: ImageBitmap | null = null;

  constructor(
    private readonly canvas: HTMLCanvasElement,
    private readonly client: EditServiceClient,
    private readonly statusEl: HTMLElement,
  ) {
    canvas.addEventListener("pointerdown", (e) => this.onDown(e));
    canvas.addEventListener("pointermove", (e) => this.onMove(e));
    canvas.addEventListener("pointerup", () => (this.dragging = false));
    canvas.addEventListener("wheel", (e) => this.onWheel(e), { passive: false });
  }

  setTool(tool: Tool): void {
    this.tool = tool;
  }

  setBrushSize(px: number): void {
    if (this.session) this.session.brushSize = px;
  }

  setCompare(t: number): void {
    this.compare = t;
    this.render();
  }

  async loadFile(file: File): Promise<void> {
    const png = new Uint8Array(await file.arrayBuffer());
    const image = await decodeToSessionImage(png);
    this.session = new CanvasSession(image, this.client);
    this.sourceBitmap = await createImageBitmap(new Blob([file]));
    this.resultBitmap = null;
    this.overlayBitmap = null;
    this.view = { ...IDENTITY_VIEW };
    this.render();
  }

  undo(): void {
    this.session?.mask.undo();
    this.render();
  }

  private onWheel(e: WheelEvent): void {
    e.preventDefault();
    const rect = this.canvas.getBoundingClientRect();
    const factor = e.deltaY < 0 ? 1.25 : 0.8;
    this.view = zoomAt(this.view, factor, e.clientX - rect.left, e.clientY - rect.top);
    this.render();
  }

  private pointerPos(e: PointerEvent): { x: number; y: number } {
    const rect = this.canvas.getBoundingClientRect();
    return { x: e.clientX - rect.left, y: e.clientY - rect.top };
  }

  private onDown(e: PointerEvent): void {
    if (!this.session) return;
    const p = this.pointerPos(e);
    if (e.shiftKey) {
      this.dragging = true;
      this.lastPointer = p;
      return;
    }
    if (this.tool === "target") {
      const g = this.session.pickTarget(this.view, p.x, p.y);
      this.note(g ? `target (${g.x}, ${g.y})` : "click inside the image to set the target");
    } else if (this.tool === "segment") {
      const g = this.session.pickTarget(this.view, p.x, p.y);
      if (g) void this.segmentAt(g.x, g.y);
    } else {
      this.dragging = true;
      this.lastPointer = p;
      this.session.brushStroke(this.view, p, p, this.tool === "erase");
    }
    this.render();
  }

  private onMove(e: PointerEvent): void {
    if (!this.session || !this.dragging || !this.lastPointer) return;
    const p = this.pointerPos(e);
    if (e.shiftKey) {
      this.view = pan(this.view, p.x - this.lastPointer.x, p.y - this.lastPointer.y);
    } else if (this.tool === "brush" || this.tool === "erase") {
      this.session.brushStroke(this.view, this.lastPointer, p, this.tool === "erase");
    }
    this.lastPointer = p;
    this.render();
  }

  private async segmentAt(x: number, y: number): Promise<void> {
    const applied = await this.segmentClickBrowser(x, y);
    if (!applied) this.note("segmenter unavailable; paint the mask with the brush");
    this.render();
  }

  /** Canvas-based decode of the /segment response. */
  private async segmentClickBrowser(x: number, y: number): Promise<boolean> {
    if (!this.session) return false;
    const png = await this.client.segment(this.session.image.png, { x, y });
    if (png === null) return false;
    const bitmap = await createImageBitmap(
      new Blob([png.buffer.slice(png.byteOffset) as ArrayBuffer], { type: "image/png" }));
    const off = new OffscreenCanvas(bitmap.width, bitmap.height);
    const ctx = off.getContext("2d")!;
    ctx.drawImage(bitmap, 0, 0);
    const data = ctx.getImageData(0, 0, bitmap.width, bitmap.height).data;
    const grid = new Uint8Array(bitmap.width * bitmap.height);
    for (let i = 0; i < grid.length; i++) grid[i] = data[i * 4] >= 128 ? 1 : 0;
    this.session.mask.beginStroke();
    this.session.mask.replaceWith(grid, bitmap.width, bitmap.height);
    return true;
  }

  async run(category: string): Promise<void> {
    if (!this.session?.canSubmit()) {
      this.note("needs a non-empty mask and a target point");
      return;
    }
    this.note("running...");
    const status = await this.session.runAndMonitor(
      category,
      (pixels, w, h) => encodeMaskViaCanvas(pixels, w, h),
      undefined,
      (p) => this.note(`step ${p.done}/${p.total}`),
    ).catch((err) => {
      this.note(String(err));
      return null;
    });
    if (!status) return;
    if (status.state === "failed" && this.session.lastError) {
      this.note(`failed at ${this.session.lastError.stage}: ${this.session.lastError.message}`);
      return;
    }
    if (this.session.resultPng) {
      this.resultBitmap = await createImageBitmap(new Blob(
        [this.session.resultPng.buffer.slice(this.session.resultPng.byteOffset) as ArrayBuffer],
        { type: "image/png" }));
      this.note("done; drag the slider to compare, pick an overlay to inspect steps");
    }
    this.render();
  }

  async showOverlay(name: string | null): Promise<void> {
    if (!this.session || !name) {
      this.overlayBitmap = null;
      this.render();
      return;
    }
    const frame = await this.session.overlay(name);
    this.overlayBitmap = await createImageBitmap(new Blob(
      [frame.bytes.buffer.slice(frame.bytes.byteOffset) as ArrayBuffer],
      { type: "image/png" }));
    this.render();
  }

  async iterate(): Promise<void> {
    if (!this.session?.resultPng) return;
    const image = await decodeToSessionImage(this.session.resultPng);
    this.session.iterate(image);
    this.sourceBitmap = await createImageBitmap(new Blob(
      [image.png.buffer.slice(image.png.byteOffset) as ArrayBuffer], { type: "image/png" }));
    this.resultBitmap = null;
    this.overlayBitmap = null;
    this.render();
  }

  private note(text: string): void {
    this.statusEl.textContent = text;
  }

  render(): void {
    const ctx = this.canvas.getContext("2d");
    if (!ctx || !this.session || !this.sourceBitmap) return;
    const { width, height } = this.session.image;
    ctx.clearRect(0, 0, this.canvas.width, this.canvas.height);
    ctx.save();
    ctx.translate(this.view.panX, this.view.panY);
    ctx.scale(this.view.zoom, this.view.zoom);
    ctx.imageSmoothingEnabled = false;
    ctx.drawImage(this.sourceBitmap, 0, 0);

    if (this.resultBitmap) {
      const split = Math.round(width * this.compare);
      if (split > 0) {
        ctx.drawImage(this.resultBitmap, 0, 0, split, height, 0, 0, split, height);
      }
      ctx.strokeStyle = "#fff";
      ctx.beginPath();
      ctx.moveTo(split, 0);
      ctx.lineTo(split, height);
      ctx.stroke();
    }

    // mask tint
    const mask = this.session.mask;
    ctx.globalAlpha = 0.35;
    ctx.fillStyle = "#ff3366";
    for (let y = 0; y < height; y++) {
      let runStart = -1;
      for (let x = 0; x <= width; x++) {
        const on = x < width && mask.get(x, y) === 1;
        if (on && runStart < 0) runStart = x;
        if (!on && runStart >= 0) {
          ctx.fillRect(runStart, y, x - runStart, 1);
          runStart = -1;
        }
      }
    }
    ctx.globalAlpha = 1.0;

    if (this.overlayBitmap) {
      ctx.globalAlpha = 0.5;
      ctx.drawImage(this.overlayBitmap, 0, 0, width, height);
      ctx.globalAlpha = 1.0;
    }

    if (this.session.target) {
      const { x, y } = this.session.target;
      ctx.strokeStyle = "#00e5ff";
      ctx.lineWidth = 2 / this.view.zoom;
      ctx.beginPath();
      ctx.arc(x, y, 6 / this.view.zoom, 0, Math.PI * 2);
      ctx.moveTo(x - 10 / this.view.zoom, y);
      ctx.lineTo(x + 10 / this.view.zoom, y);
      ctx.moveTo(x, y - 10 / this.view.zoom);
      ctx.lineTo(x, y + 10 / this.view.zoom);
      ctx.stroke();
    }
    ctx.restore();
  }
}

async function decodeToSessionImage(png: Uint8Array): Promise<SessionImage> {
  const bitmap = await createImageBitmap(new Blob(
    [png.buffer.slice(png.byteOffset) as ArrayBuffer], { type: "image/png" }));
  const off = new OffscreenCanvas(bitmap.width, bitmap.height);
  const ctx = off.getContext("2d")!;
  ctx.drawImage(bitmap, 0, 0);
  const rgba = ctx.getImageData(0, 0, bitmap.width, bitmap.height).data;
  const pixels = new Uint8Array(bitmap.width * bitmap.height * 3);
  for (let i = 0; i < bitmap.width * bitmap.height; i++) {
    pixels[i * 3] = rgba[i * 4];
    pixels[i * 3 + 1] = rgba[i * 4 + 1];
    pixels[i * 3 + 2] = rgba[i * 4 + 2];
  }
  return { width: bitmap.width, height: bitmap.height, pixels, png };
}

function encodeMaskViaCanvas(pixels: Uint8Array, width: number, height: number): Uint8Array {
  const off = new OffscreenCanvas(width, height);
  const ctx = off.getContext("2d")!;
  const img = ctx.createImageData(width, height);
  for (let i = 0; i < pixels.length; i++) {
    img.data[i * 4] = pixels[i];
    img.data[i * 4 + 1] = pixels[i];
    img.data[i * 4 + 2] = pixels[i];
    img.data[i * 4 + 3] = 255;
  }
  ctx.putImageData(img, 0, 0);
  // OffscreenCanvas.convertToBlob is async; callers of runAndMonitor pass a
  // sync encoder, so the browser shim rasterizes through a data URL instead
  const c = document.createElement("canvas");
  c.width = width;
  c.height = height;
  c.getContext("2d")!.putImageData(img, 0, 0);
  const url = c.toDataURL("image/png");
  const b64 = url.slice(url.indexOf(",") + 1);
  const bin = atob(b64);
  const out = new Uint8Array(bin.length);
  for (let i = 0; i < bin.length; i++) out[i] = bin.charCodeAt(i);
  return out;
}
