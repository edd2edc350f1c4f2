import { deflateSync, inflateSync } from "node:zlib";
import { describe, expect, it } from "vitest";

import { MaskLayer } from "../src/maskLayer.js";
import { decodePNG, encodeGrayPNG, grayChannel } from "../src/png.js";

const deflate = (d: Uint8Array) => new Uint8Array(deflateSync(d));
const inflate = (d: Uint8Array) => new Uint8Array(inflateSync(d));

describe("mask layer", () => {
  it("a filled rectangle exports exactly that pixel set", () => {
    const m = new MaskLayer(32, 24);
    m.fillRect(4, 5, 10, 9);
    const px = m.exportPixels();
    for (let y = 0; y < 24; y++) {
      for (let x = 0; x < 32; x++) {
        const inside = x >= 4 && x <= 10 && y >= 5 && y <= 9;
        expect(px[y * 32 + x]).toBe(inside ? 255 : 0);
      }
    }
    expect(m.area()).toBe(7 * 5);
  });

  it("undo restores the previous layer bit-exactly", () => {
    const m = new MaskLayer(16, 16);
    m.beginStroke();
    m.fillRect(2, 2, 6, 6);
    const afterFirst = m.snapshot();
    m.beginStroke();
    m.stroke(0, 0, 15, 15, 2);
    expect(m.snapshot()).not.toEqual(afterFirst);
    expect(m.undo()).toBe(true);
    expect(m.snapshot()).toEqual(afterFirst);
    expect(m.undo()).toBe(true);
    expect(m.area()).toBe(0);
    expect(m.undo()).toBe(false);
  });

  it("a segment result stays editable with the brush afterwards", () => {
    const m = new MaskLayer(8, 8);
    const grid = new Uint8Array(64);
    grid[9] = 1;
    grid[10] = 1;
    m.beginStroke();
    m.replaceWith(grid, 8, 8);
    expect(m.area()).toBe(2);
    m.beginStroke();
    m.stroke(5, 5, 5, 5, 1);
    expect(m.get(5, 5)).toBe(1);
    expect(m.get(1, 1)).toBe(1); // segment pixels survive
    expect(() => m.replaceWith(grid, 4, 4)).toThrow();
  });

  it("brush strokes stay within bounds and binary", () => {
    const m = new MaskLayer(12, 12);
    m.beginStroke();
    m.stroke(-5, -5, 20, 20, 3);
    for (const v of m.snapshot()) expect(v === 0 || v === 1).toBe(true);
    expect(m.isEmpty()).toBe(false);
  });
});

describe("png codec", () => {
  it("gray PNG round-trips through encode/decode", () => {
    const w = 21, h = 13;
    const pixels = new Uint8Array(w * h);
    for (let i = 0; i < pixels.length; i++) pixels[i] = (i * 37) % 256;
    const png = encodeGrayPNG(pixels, w, h, deflate);
    const decoded = decodePNG(png, inflate);
    expect(decoded.width).toBe(w);
    expect(decoded.height).toBe(h);
    expect(decoded.channels).toBe(1);
    expect(grayChannel(decoded)).toEqual(pixels);
  });

  it("mask layer pixels survive the png round trip", () => {
    const m = new MaskLayer(16, 16);
    m.fillRect(3, 3, 12, 8);
    const png = encodeGrayPNG(m.exportPixels(), 16, 16, deflate);
    const back = MaskLayer.fromPixels(grayChannel(decodePNG(png, inflate)), 16, 16);
    expect(back.snapshot()).toEqual(m.snapshot());
  });

  it("rejects non-png bytes", () => {
    expect(() => decodePNG(new Uint8Array([1, 2, 3, 4, 5, 6, 7, 8]), inflate)).toThrow();
  });
});
