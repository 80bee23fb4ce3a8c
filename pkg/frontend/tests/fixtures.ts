/**
 * Test-side 16-bit PNG encoder, written forward (filter subtraction)
 * so it stays independent of the decoder's unfiltering path. Also a
 * tiny deterministic RNG for sample data.
 */

import { deflateSync } from 'node:zlib';

export type FilterType = 0 | 1 | 2 | 3 | 4;

export interface Png16Spec {
  width: number;
  height: number;
  channels: 1 | 3;
  /** Row-major, channel-interleaved, values in [0, 65535]. */
  samples: number[] | Uint16Array;
  /** One filter for all rows, or one per row. */
  filter?: FilterType | FilterType[];
}

export function makePng16(spec: Png16Spec): Uint8Array {
  const { width, height, channels } = spec;
  const samples = Array.from(spec.samples);
  if (samples.length !== width * height * channels) {
    throw new Error('sample count does not match dimensions');
  }
  const bpp = channels * 2;
  const stride = width * bpp;
  const rowFilters: FilterType[] = Array.isArray(spec.filter)
    ? spec.filter
    : new Array(height).fill(spec.filter ?? 0);

  const rows = new Uint8Array(height * stride);
  for (let i = 0; i < samples.length; i++) {
    rows[2 * i] = (samples[i] >> 8) & 0xff;
    rows[2 * i + 1] = samples[i] & 0xff;
  }

  const filtered = new Uint8Array(height * (stride + 1));
  for (let row = 0; row < height; row++) {
    const filter = rowFilters[row];
    filtered[row * (stride + 1)] = filter;
    for (let i = 0; i < stride; i++) {
      const raw = rows[row * stride + i];
      const left = i >= bpp ? rows[row * stride + i - bpp] : 0;
      const up = row > 0 ? rows[(row - 1) * stride + i] : 0;
      const upLeft = row > 0 && i >= bpp ? rows[(row - 1) * stride + i - bpp] : 0;
      let value: number;
      switch (filter) {
        case 0: value = raw; break;
        case 1: value = raw - left; break;
        case 2: value = raw - up; break;
        case 3: value = raw - ((left + up) >> 1); break;
        case 4: value = raw - paethPredictor(left, up, upLeft); break;
      }
      filtered[row * (stride + 1) + 1 + i] = value & 0xff;
    }
  }

  const ihdr = new Uint8Array(13);
  const ihdrView = new DataView(ihdr.buffer);
  ihdrView.setUint32(0, width);
  ihdrView.setUint32(4, height);
  ihdr[8] = 16;
  ihdr[9] = channels === 1 ? 0 : 2;

  const idat = new Uint8Array(deflateSync(filtered));
  const parts = [
    new Uint8Array([137, 80, 78, 71, 13, 10, 26, 10]),
    chunk('IHDR', ihdr),
    chunk('IDAT', idat),
    chunk('IEND', new Uint8Array(0)),
  ];
  const total = parts.reduce((n, p) => n + p.length, 0);
  const out = new Uint8Array(total);
  let offset = 0;
  for (const part of parts) {
    out.set(part, offset);
    offset += part.length;
  }
  return out;
}

export function pngBase64(spec: Png16Spec): string {
  return Buffer.from(makePng16(spec)).toString('base64');
}

function chunk(type: string, data: Uint8Array): Uint8Array {
  const out = new Uint8Array(12 + data.length);
  const view = new DataView(out.buffer);
  view.setUint32(0, data.length);
  for (let i = 0; i < 4; i++) out[4 + i] = type.charCodeAt(i);
  out.set(data, 8);
  view.setUint32(8 + data.length, crc32(out.subarray(4, 8 + data.length)));
  return out;
}

function paethPredictor(a: number, b: number, c: number): number {
  const p = a + b - c;
  const pa = Math.abs(p - a);
  const pb = Math.abs(p - b);
  const pc = Math.abs(p - c);
  if (pa <= pb && pa <= pc) return a;
  if (pb <= pc) return b;
  return c;
}

const TABLE = (() => {
  const table = new Uint32Array(256);
  for (let n = 0; n < 256; n++) {
    let c = n;
    for (let k = 0; k < 8; k++) c = c & 1 ? 0xedb88320 ^ (c >>> 1) : c >>> 1;
    table[n] = c;
  }
  return table;
})();

function crc32(data: Uint8Array): number {
  let crc = 0xffffffff;
  for (let i = 0; i < data.length; i++) {
    crc = TABLE[(crc ^ data[i]) & 0xff] ^ (crc >>> 8);
  }
  return (crc ^ 0xffffffff) >>> 0;
}

/** Deterministic 32-bit LCG, enough for fixture pixels. */
export function lcg(seed: number): () => number {
  let state = seed >>> 0;
  return () => {
    state = (Math.imul(state, 1664525) + 1013904223) >>> 0;
    return state;
  };
}

export function randomSamples(n: number, seed: number): Uint16Array {
  const next = lcg(seed);
  const out = new Uint16Array(n);
  for (let i = 0; i < n; i++) out[i] = next() & 0xffff;
  return out;
}
