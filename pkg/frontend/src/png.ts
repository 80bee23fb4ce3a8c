/**
 * Decoder for the 16-bit PNGs the study service delivers: grayscale
 * (color type 0) and RGB (color type 2), bit depth 16, no interlacing.
 *
 * Browsers decode PNGs natively but narrow them to 8 bits on the way
 * into a canvas, which would bake in a fixed window before the viewer
 * gets a say. Decoding here keeps the full sample range so the display
 * window is applied client-side, identically across conditions.
 */

export interface DecodedImage {
  width: number;
  height: number;
  /** 1 for grayscale, 3 for RGB. */
  channels: 1 | 3;
  /** Row-major, channel-interleaved 16-bit samples. */
  samples: Uint16Array;
}

export class PngFormatError extends Error {
  constructor(message: string) {
    super(message);
    this.name = 'PngFormatError';
  }
}

const SIGNATURE = [137, 80, 78, 71, 13, 10, 26, 10];

export function base64ToBytes(b64: string): Uint8Array {
  if (typeof atob === 'function') {
    const binary = atob(b64);
    const out = new Uint8Array(binary.length);
    for (let i = 0; i < binary.length; i++) out[i] = binary.charCodeAt(i);
    return out;
  }
  return new Uint8Array(Buffer.from(b64, 'base64'));
}

export async function decodePng16(bytes: Uint8Array): Promise<DecodedImage> {
  for (let i = 0; i < SIGNATURE.length; i++) {
    if (bytes[i] !== SIGNATURE[i]) throw new PngFormatError('not a PNG file');
  }

  const view = new DataView(bytes.buffer, bytes.byteOffset, bytes.byteLength);
  let offset = 8;
  let header: { width: number; height: number; channels: 1 | 3 } | null = null;
  const idat: Uint8Array[] = [];

  while (offset + 8 <= bytes.length) {
    const length = view.getUint32(offset);
    const type = String.fromCharCode(
      bytes[offset + 4], bytes[offset + 5], bytes[offset + 6], bytes[offset + 7],
    );
    const dataStart = offset + 8;
    if (dataStart + length + 4 > bytes.length) {
      throw new PngFormatError(`truncated ${type} chunk`);
    }
    const data = bytes.subarray(dataStart, dataStart + length);
    const stored = view.getUint32(dataStart + length);
    const computed = crc32(bytes.subarray(offset + 4, dataStart + length));
    if (stored !== computed) {
      throw new PngFormatError(`bad CRC in ${type} chunk`);
    }

    if (type === 'IHDR') {
      header = parseIhdr(data);
    } else if (type === 'IDAT') {
      idat.push(data);
    } else if (type === 'IEND') {
      break;
    }
    offset = dataStart + length + 4;
  }

  if (!header) throw new PngFormatError('missing IHDR chunk');
  if (idat.length === 0) throw new PngFormatError('missing IDAT data');

  const raw = await inflateBytes(concat(idat));
  return unfilter(raw, header.width, header.height, header.channels);
}

function parseIhdr(data: Uint8Array): { width: number; height: number; channels: 1 | 3 } {
  if (data.length !== 13) throw new PngFormatError('malformed IHDR');
  const view = new DataView(data.buffer, data.byteOffset, data.byteLength);
  const width = view.getUint32(0);
  const height = view.getUint32(4);
  const bitDepth = data[8];
  const colorType = data[9];
  const interlace = data[12];
  if (width === 0 || height === 0) throw new PngFormatError('empty image');
  if (bitDepth !== 16) {
    throw new PngFormatError(`expected 16-bit samples, got ${bitDepth}-bit`);
  }
  if (colorType !== 0 && colorType !== 2) {
    throw new PngFormatError(`unsupported color type ${colorType}`);
  }
  if (interlace !== 0) throw new PngFormatError('interlaced PNGs not supported');
  return { width, height, channels: colorType === 0 ? 1 : 3 };
}

function unfilter(
  raw: Uint8Array,
  width: number,
  height: number,
  channels: 1 | 3,
): DecodedImage {
  const bpp = channels * 2;
  const stride = width * bpp;
  if (raw.length !== height * (stride + 1)) {
    throw new PngFormatError(
      `decompressed size ${raw.length} != expected ${height * (stride + 1)}`,
    );
  }

  const bytes = new Uint8Array(height * stride);
  for (let row = 0; row < height; row++) {
    const filter = raw[row * (stride + 1)];
    const src = row * (stride + 1) + 1;
    const dst = row * stride;
    switch (filter) {
      case 0:
        bytes.set(raw.subarray(src, src + stride), dst);
        break;
      case 1:
        for (let i = 0; i < stride; i++) {
          const left = i >= bpp ? bytes[dst + i - bpp] : 0;
          bytes[dst + i] = (raw[src + i] + left) & 0xff;
        }
        break;
      case 2:
        for (let i = 0; i < stride; i++) {
          const up = row > 0 ? bytes[dst + i - stride] : 0;
          bytes[dst + i] = (raw[src + i] + up) & 0xff;
        }
        break;
      case 3:
        for (let i = 0; i < stride; i++) {
          const left = i >= bpp ? bytes[dst + i - bpp] : 0;
          const up = row > 0 ? bytes[dst + i - stride] : 0;
          bytes[dst + i] = (raw[src + i] + ((left + up) >> 1)) & 0xff;
        }
        break;
      case 4:
        for (let i = 0; i < stride; i++) {
          const left = i >= bpp ? bytes[dst + i - bpp] : 0;
          const up = row > 0 ? bytes[dst + i - stride] : 0;
          const upLeft = row > 0 && i >= bpp ? bytes[dst + i - stride - bpp] : 0;
          bytes[dst + i] = (raw[src + i] + paeth(left, up, upLeft)) & 0xff;
        }
        break;
      default:
        throw new PngFormatError(`unknown filter type ${filter} in row ${row}`);
    }
  }

  const samples = new Uint16Array(width * height * channels);
  for (let i = 0; i < samples.length; i++) {
    samples[i] = (bytes[2 * i] << 8) | bytes[2 * i + 1];
  }
  return { width, height, channels, samples };
}

function paeth(a: number, b: number, c: number): number {
  const p = a + b - c;
  const pa = Math.abs(p - a);
  const pb = Math.abs(p - b);
  const pc = Math.abs(p - c);
  if (pa <= pb && pa <= pc) return a;
  if (pb <= pc) return b;
  return c;
}

function concat(parts: Uint8Array[]): Uint8Array {
  let total = 0;
  for (const part of parts) total += part.length;
  const out = new Uint8Array(total);
  let offset = 0;
  for (const part of parts) {
    out.set(part, offset);
    offset += part.length;
  }
  return out;
}

async function inflateBytes(data: Uint8Array): Promise<Uint8Array> {
  // Copy so consumers with ArrayBuffer-only signatures accept it
  // whatever the caller's backing store was.
  const bytes = new Uint8Array(data);
  if (typeof DecompressionStream === 'function') {
    // Drive the stream by hand: Blob/Response are not reliable across
    // embedders, the Streams API itself is.
    const inflater = new DecompressionStream('deflate');
    const writer = inflater.writable.getWriter();
    // Failures surface through the reader; this keeps the writer's copy
    // of the error from also firing as an unhandled rejection.
    const writing = writer.write(bytes).then(() => writer.close()).catch(() => {});
    const reader = inflater.readable.getReader();
    const parts: Uint8Array[] = [];
    for (;;) {
      const { done, value } = await reader.read();
      if (done) break;
      parts.push(value);
    }
    await writing;
    return concat(parts);
  }
  const zlib = await import('node:zlib');
  return new Uint8Array(zlib.inflateSync(bytes));
}

let crcTable: Uint32Array | null = null;

function crc32(data: Uint8Array): number {
  if (!crcTable) {
    crcTable = new Uint32Array(256);
    for (let n = 0; n < 256; n++) {
      let c = n;
      for (let k = 0; k < 8; k++) {
        c = c & 1 ? 0xedb88320 ^ (c >>> 1) : c >>> 1;
      }
      crcTable[n] = c;
    }
  }
  let crc = 0xffffffff;
  for (let i = 0; i < data.length; i++) {
    crc = crcTable[(crc ^ data[i]) & 0xff] ^ (crc >>> 8);
  }
  return (crc ^ 0xffffffff) >>> 0;
}
