/**
 * Canvas session state machine: one image, its editable mask layer, the
 * target point (always in source-image pixel coordinates), the active job
 * and the overlay cache. At most one job runs per session; submissions are
 * disabled until the active job reaches a terminal state.
 */

import { EditServiceClient, JobProgress, JobStatus } from "./api.js";
import { MaskLayer } from "./maskLayer.js";
import { pickPixel, Point, Viewport } from "./transform.js";

export interface SessionImage {
  width: number;
  height: number;
  /** RGB, 3 bytes per pixel; kept so "iterate" can re-seed the session. */
  pixels: Uint8Array;
  png: Uint8Array;
}

export type SessionPhase = "editing" | "running" | "done" | "failed";

export interface OverlayFrame {
  name: string;
  bytes: Uint8Array;
}

export class CanvasSession {
  image: SessionImage;
  mask: MaskLayer;
  target: Point | null = null;
  brushSize = 8;
  phase: SessionPhase = "editing";
  activeJobId: string | null = null;
  lastProgress: JobProgress = { done: 0, total: 0 };
  lastError: { stage: string; message: string } | null = null;
  resultPng: Uint8Array | null = null;
  overlayNames: string[] = [];
  overlaySelection: string | null = null;
  private overlayCache = new Map<string, Uint8Array>();

  constructor(image: SessionImage, private readonly client: EditServiceClient) {
    this.image = image;
    this.mask = new MaskLayer(image.width, image.height);
  }

  /** Invariant: the mask layer always matches the image dimensions. */
  loadImage(image: SessionImage): void {
    this.image = image;
    this.mask = new MaskLayer(image.width, image.height);
    this.target = null;
    this.phase = "editing";
    this.activeJobId = null;
    this.resultPng = null;
    this.overlayNames = [];
    this.overlayCache.clear();
    this.lastError = null;
  }

  /** Click at viewport coords; stores g in image pixels. Outside -> ignored. */
  pickTarget(view: Viewport, vx: number, vy: number): Point | null {
    const p = pickPixel(view, vx, vy, this.image.width, this.image.height);
    if (p !== null) this.target = p;
    return p;
  }

  brushStroke(view: Viewport, fromV: Point, toV: Point, erase = false): void {
    const a = pickPixel(view, fromV.x, fromV.y, this.image.width, this.image.height);
    const b = pickPixel(view, toV.x, toV.y, this.image.width, this.image.height);
    if (!a || !b) return;
    this.mask.beginStroke();
    this.mask.stroke(a.x, a.y, b.x, b.y, this.brushSize, erase ? 0 : 1);
  }

  /** Click-to-segment; falls back to brush-only when the endpoint is 503. */
  async segmentClick(imagePixel: Point,
                     decodeMask: (png: Uint8Array) => { grid: Uint8Array; width: number; height: number },
                     ): Promise<boolean> {
    const png = await this.client.segment(this.image.png, imagePixel);
    if (png === null) return false;
    const decoded = decodeMask(png);
    this.mask.beginStroke();
    this.mask.replaceWith(decoded.grid, decoded.width, decoded.height);
    return true;
  }

  canSubmit(): boolean {
    return this.phase !== "running" && this.target !== null && !this.mask.isEmpty();
  }

  /**
   * Submit the edit and poll to a terminal state. The exported mask and the
   * stored target point go to the server verbatim.
   */
  async runAndMonitor(category: string,
                      encodeMaskPng: (pixels: Uint8Array, w: number, h: number) => Uint8Array,
                      config?: Record<string, unknown>,
                      onProgress?: (p: JobProgress) => void,
                      intervalMs = 1000): Promise<JobStatus> {
    if (!this.canSubmit() || this.target === null) {
      throw new Error("session not ready: needs a target point and a non-empty mask");
    }
    const maskPng = encodeMaskPng(this.mask.exportPixels(), this.image.width, this.image.height);
    this.phase = "running";
    this.lastError = null;
    try {
      const id = await this.client.submitEdit({
        imagePng: this.image.png,
        maskPng,
        target: this.target,
        category,
        config,
      });
      this.activeJobId = id;
      const status = await this.client.pollUntilDone(id, (p) => {
        this.lastProgress = p;
        onProgress?.(p);
      }, intervalMs);
      if (status.state === "failed") {
        this.phase = "failed";
        this.lastError = status.error ?? { stage: "unknown", message: "job failed" };
        return status;
      }
      this.resultPng = await this.client.fetchResult(id);
      this.overlayNames = status.refined_maps ?? [];
      this.overlayCache.clear();
      this.phase = "done";
      return status;
    } catch (err) {
      this.phase = "failed";
      this.lastError = { stage: "client", message: String(err) };
      throw err;
    }
  }

  /** Overlay frames are fetched once and then swapped from the cache. */
  async overlay(name: string): Promise<OverlayFrame> {
    if (!this.activeJobId) throw new Error("no job");
    let bytes = this.overlayCache.get(name);
    if (!bytes) {
      bytes = await this.client.fetchArtifact(this.activeJobId, name);
      this.overlayCache.set(name, bytes);
    }
    this.overlaySelection = name;
    return { name, bytes };
  }

  overlayCached(name: string): boolean {
    return this.overlayCache.has(name);
  }

  /**
   * Iterate: seed a fresh editing round with the result image. Needs the
   * host to decode the PNG into pixels (canvas in the browser).
   */
  iterate(decoded: SessionImage): void {
    if (this.phase !== "done" || !this.resultPng) {
      throw new Error("no finished result to iterate on");
    }
    this.loadImage(decoded);
  }
}
