/**
 * Minimal PNG encode/decode for 8-bit grayscale and RGB images.
 *
 * The browser build uses canvas APIs instead; this module exists so the
 * node test-suite (and any headless client) can speak the service's PNG
 * contracts without a DOM. Compression is injected (node:zlib in tests).
 */

export type Deflate = (data: Uint8Array) => Uint8Array;
export type Inflate = (data: Uint8Array) => Uint8Array;

const SIGNATURE = Uint8Array.from([137, 80, 78, 71, 13, 10, 26, 10]);

const CRC_TABLE = (() => {
  const table = new Uint32Array(256);
  for (let n = 0; n < 256; n++) {
    let c = n;
    for (let k = 0; k < 8; k++) c = c & 1 ? 0xedb88320 ^ (c >>> 1) : c >>> 1;
    table[n] = c >>> 0;
  }
  return table;
})();

function crc32(...parts: Uint8Array[]): number {
  let c = 0xffffffff;
  for (const part of parts) {
    for (let i = 0; i < part.length; i++) {
      c = CRC_TABLE[(c ^ part[i]) & 0xff] ^ (c >>> 8);
    }
  }
  return (c ^ 0xffffffff) >>> 0;
}

function u32(value: number): Uint8Array {
  return Uint8Array.from([(value >>> 24) & 255, (value >>> 16) & 255,
                          (value >>> 8) & 255, value & 255]);
}

function chunk(type: string, body: Uint8Array): Uint8Array {
  const tag = Uint8Array.from(type, (c) => c.charCodeAt(0));
  const out = new Uint8Array(12 + body.length);
  out.set(u32(body.length), 0);
  out.set(tag, 4);
  out.set(body, 8);
  out.set(u32(crc32(tag, body)), 8 + body.length);
  return out;
}

function encode(pixels: Uint8Array, width: number, height: number,
                channels: 1 | 3, deflate: Deflate): Uint8Array {
  if (pixels.length !== width * height * channels) {
    throw new Error("pixel buffer does not match dimensions");
  }
  const ihdr = new Uint8Array(13);
  ihdr.set(u32(width), 0);
  ihdr.set(u32(height), 4);
  ihdr[8] = 8; // bit depth
  ihdr[9] = channels === 1 ? 0 : 2; // gray | truecolor
  const stride = width * channels;
  const raw = new Uint8Array((stride + 1) * height);
  for (let y = 0; y < height; y++) {
    raw[y * (stride + 1)] = 0; // filter: none
    raw.set(pixels.subarray(y * stride, (y + 1) * stride), y * (stride + 1) + 1);
  }
  const idat = deflate(raw);
  const parts = [SIGNATURE, chunk("IHDR", ihdr), chunk("IDAT", idat),
                 chunk("IEND", new Uint8Array(0))];
  const total = parts.reduce((n, p) => n + p.length, 0);
  const out = new Uint8Array(total);
  let off = 0;
  for (const p of parts) {
    out.set(p, off);
    off += p.length;
  }
  return out;
}

export function encodeGrayPNG(pixels: Uint8Array, width: number, height: number,
                              deflate: Deflate): Uint8Array {
  return encode(pixels, width, height, 1, deflate);
}

export function encodeRGBPNG(pixels: Uint8Array, width: number, height: number,
                             deflate: Deflate): Uint8Array {
  return encode(pixels, width, height, 3, deflate);
}

export interface DecodedPNG {
  width: number;
  height: number;
  channels: number;
  pixels: Uint8Array;
}

/** 8-bit gray / gray+alpha / RGB / RGBA, non-interlaced. */
export function decodePNG(bytes: Uint8Array, inflate: Inflate): DecodedPNG {
  for (let i = 0; i < 8; i++) {
    if (bytes[i] !== SIGNATURE[i]) throw new Error("not a PNG");
  }
  const view = new DataView(bytes.buffer, bytes.byteOffset, bytes.byteLength);
  let off = 8;
  let width = 0;
  let height = 0;
  let channels = 0;
  const idat: Uint8Array[] = [];
  while (off < bytes.length) {
    const len = view.getUint32(off);
    const type = String.fromCharCode(...bytes.subarray(off + 4, off + 8));
    const body = bytes.subarray(off + 8, off + 8 + len);
    if (type === "IHDR") {
      const dv = new DataView(body.buffer, body.byteOffset, body.byteLength);
      width = dv.getUint32(0);
      height = dv.getUint32(4);
      const bitDepth = body[8];
      const colorType = body[9];
      if (bitDepth !== 8) throw new Error(`unsupported bit depth ${bitDepth}`);
      if (body[12] !== 0) throw new Error("interlaced PNGs unsupported");
      channels = { 0: 1, 2: 3, 4: 2, 6: 4 }[colorType as 0 | 2 | 4 | 6] ?? 0;
      if (!channels) throw new Error(`unsupported color type ${colorType}`);
    } else if (type === "IDAT") {
      idat.push(body);
    } else if (type === "IEND") {
      break;
    }
    off += 12 + len;
  }
  const packed = new Uint8Array(idat.reduce((n, p) => n + p.length, 0));
  let p = 0;
  for (const part of idat) {
    packed.set(part, p);
    p += part.length;
  }
  const raw = inflate(packed);
  const stride = width * channels;
  const pixels = new Uint8Array(stride * height);
  const bpp = channels;
  for (let y = 0; y < height; y++) {
    const filter = raw[y * (stride + 1)];
    const row = raw.subarray(y * (stride + 1) + 1, (y + 1) * (stride + 1));
    const out = pixels.subarray(y * stride, (y + 1) * stride);
    const prev = y > 0 ? pixels.subarray((y - 1) * stride, y * stride) : null;
    for (let x = 0; x < stride; x++) {
      const a = x >= bpp ? out[x - bpp] : 0;
      const b = prev ? prev[x] : 0;
      const c = prev && x >= bpp ? prev[x - bpp] : 0;
      let v = row[x];
      switch (filter) {
        case 0: break;
        case 1: v = (v + a) & 255; break;
        case 2: v = (v + b) & 255; break;
        case 3: v = (v + ((a + b) >> 1)) & 255; break;
        case 4: {
          const pp = a + b - c;
          const pa = Math.abs(pp - a);
          const pb = Math.abs(pp - b);
          const pc = Math.abs(pp - c);
          const paeth = pa <= pb && pa <= pc ? a : pb <= pc ? b : c;
          v = (v + paeth) & 255;
          break;
        }
        default:
          throw new Error(`unknown filter ${filter}`);
      }
      out[x] = v;
    }
  }
  return { width, height, channels, pixels };
}

/** Grayscale view of a decoded PNG (first channel). */
export function grayChannel(png: DecodedPNG): Uint8Array {
  if (png.channels === 1) return png.pixels;
  const out = new Uint8Array(png.width * png.height);
  for (let i = 0; i < out.length; i++) out[i] = png.pixels[i * png.channels];
  return out;
}
