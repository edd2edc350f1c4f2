/**
 * Editable binary mask raster with undo.
 *
 * The mask is a plain Uint8Array of 0/1 matching the image dimensions
 * exactly (the service contract), independent of any canvas so the same
 * code runs in tests. Export is {0, 255} single-channel pixels.
 */

export class MaskLayer {
  readonly width: number;
  readonly height: number;
  private data: Uint8Array;
  private undoStack: Uint8Array[] = [];
  private readonly undoLimit = 32;

  constructor(width: number, height: number, data?: Uint8Array) {
    if (data && data.length !== width * height) {
      throw new Error(`mask data length ${data.length} != ${width}x${height}`);
    }
    this.width = width;
    this.height = height;
    this.data = data ? data.slice() : new Uint8Array(width * height);
  }

  get(x: number, y: number): number {
    return this.data[y * this.width + x];
  }

  snapshot(): Uint8Array {
    return this.data.slice();
  }

  isEmpty(): boolean {
    return !this.data.some((v) => v !== 0);
  }

  area(): number {
    let n = 0;
    for (const v of this.data) n += v;
    return n;
  }

  /** Push the current raster for undo; call before each edit gesture. */
  beginStroke(): void {
    this.undoStack.push(this.data.slice());
    if (this.undoStack.length > this.undoLimit) this.undoStack.shift();
  }

  undo(): boolean {
    const prev = this.undoStack.pop();
    if (!prev) return false;
    this.data = prev;
    return true;
  }

  private stampDisk(cx: number, cy: number, radius: number, value: 0 | 1): void {
    const r2 = radius * radius;
    const x0 = Math.max(0, Math.floor(cx - radius));
    const x1 = Math.min(this.width - 1, Math.ceil(cx + radius));
    const y0 = Math.max(0, Math.floor(cy - radius));
    const y1 = Math.min(this.height - 1, Math.ceil(cy + radius));
    for (let y = y0; y <= y1; y++) {
      for (let x = x0; x <= x1; x++) {
        const dx = x - cx;
        const dy = y - cy;
        if (dx * dx + dy * dy <= r2) this.data[y * this.width + x] = value;
      }
    }
  }

  /** Brush along a segment; erase with value 0. */
  stroke(x0: number, y0: number, x1: number, y1: number, radius: number,
         value: 0 | 1 = 1): void {
    const steps = Math.max(1, Math.ceil(Math.hypot(x1 - x0, y1 - y0)));
    for (let i = 0; i <= steps; i++) {
      const t = i / steps;
      this.stampDisk(x0 + (x1 - x0) * t, y0 + (y1 - y0) * t, radius, value);
    }
  }

  fillRect(x0: number, y0: number, x1: number, y1: number, value: 0 | 1 = 1): void {
    const xa = Math.max(0, Math.min(x0, x1));
    const xb = Math.min(this.width - 1, Math.max(x0, x1));
    const ya = Math.max(0, Math.min(y0, y1));
    const yb = Math.min(this.height - 1, Math.max(y0, y1));
    for (let y = ya; y <= yb; y++) {
      for (let x = xa; x <= xb; x++) this.data[y * this.width + x] = value;
    }
  }

  /** Replace the raster (e.g. with a /segment response); dims must match. */
  replaceWith(grid: Uint8Array, width: number, height: number): void {
    if (width !== this.width || height !== this.height) {
      throw new Error("segment mask dims do not match the image");
    }
    this.data = Uint8Array.from(grid, (v) => (v ? 1 : 0));
  }

  /** {0, 255} single-channel pixels, the service's mask contract. */
  exportPixels(): Uint8Array {
    return Uint8Array.from(this.data, (v) => (v ? 255 : 0));
  }

  static fromPixels(pixels: Uint8Array, width: number, height: number): MaskLayer {
    const grid = Uint8Array.from(pixels, (v) => (v >= 128 ? 1 : 0));
    return new MaskLayer(width, height, grid);
  }
}
