/**
 * Minimal PNG support for tests, built on node's zlib. Encodes 8-bit
 * grayscale images and decodes 8-bit grayscale or indexed images (one byte
 * per pixel either way), which covers everything the server produces.
 */

import { deflateSync, inflateSync } from 'node:zlib';

export const SIGNATURE = Uint8Array.from([137, 80, 78, 71, 13, 10, 26, 10]);

const CRC_TABLE = (() => {
  const table = new Uint32Array(256);
  for (let n = 0; n < 256; n++) {
    let c = n;
    for (let k = 0; k < 8; k++) {
      c = c & 1 ? 0xedb88320 ^ (c >>> 1) : c >>> 1;
    }
    table[n] = c >>> 0;
  }
  return table;
})();

function crc32(bytes: Uint8Array): number {
  let c = 0xffffffff;
  for (const byte of bytes) {
    c = CRC_TABLE[(c ^ byte) & 0xff]! ^ (c >>> 8);
  }
  return (c ^ 0xffffffff) >>> 0;
}

export function chunk(type: string, body: Uint8Array): Uint8Array {
  const out = new Uint8Array(12 + body.length);
  const view = new DataView(out.buffer);
  view.setUint32(0, body.length);
  for (let i = 0; i < 4; i++) {
    out[4 + i] = type.charCodeAt(i);
  }
  out.set(body, 8);
  view.setUint32(8 + body.length, crc32(out.subarray(4, 8 + body.length)));
  return out;
}

/** Encode one byte per pixel as an 8-bit grayscale PNG. */
export function encodeGray(pixels: Uint8Array, width: number, height: number): Uint8Array {
  if (pixels.length !== width * height) {
    throw new Error('pixel count does not match dims');
  }
  const ihdr = new Uint8Array(13);
  const view = new DataView(ihdr.buffer);
  view.setUint32(0, width);
  view.setUint32(4, height);
  ihdr[8] = 8; // bit depth
  ihdr[9] = 0; // grayscale
  const raw = new Uint8Array(height * (width + 1));
  for (let row = 0; row < height; row++) {
    raw[row * (width + 1)] = 0; // filter none
    raw.set(pixels.subarray(row * width, (row + 1) * width), row * (width + 1) + 1);
  }
  const idat = new Uint8Array(deflateSync(raw));
  const parts = [SIGNATURE, chunk('IHDR', ihdr), chunk('IDAT', idat), chunk('IEND', new Uint8Array(0))];
  const total = parts.reduce((n, p) => n + p.length, 0);
  const out = new Uint8Array(total);
  let offset = 0;
  for (const part of parts) {
    out.set(part, offset);
    offset += part.length;
  }
  return out;
}

function paeth(a: number, b: number, c: number): number {
  const p = a + b - c;
  const pa = Math.abs(p - a);
  const pb = Math.abs(p - b);
  const pc = Math.abs(p - c);
  if (pa <= pb && pa <= pc) {
    return a;
  }
  return pb <= pc ? b : c;
}

export interface DecodedPng {
  width: number;
  height: number;
  /** One byte per pixel: the gray value or the palette index. */
  pixels: Uint8Array;
  colorType: number;
}

/** Decode an 8-bit grayscale or indexed PNG into one byte per pixel. */
export function decodePng(bytes: Uint8Array): DecodedPng {
  for (let i = 0; i < SIGNATURE.length; i++) {
    if (bytes[i] !== SIGNATURE[i]) {
      throw new Error('not a png');
    }
  }
  let offset = SIGNATURE.length;
  let width = 0;
  let height = 0;
  let bitDepth = 0;
  let colorType = 0;
  const idatParts: Uint8Array[] = [];
  while (offset < bytes.length) {
    const view = new DataView(bytes.buffer, bytes.byteOffset + offset);
    const length = view.getUint32(0);
    const type = String.fromCharCode(bytes[offset + 4]!, bytes[offset + 5]!, bytes[offset + 6]!, bytes[offset + 7]!);
    const body = bytes.subarray(offset + 8, offset + 8 + length);
    if (type === 'IHDR') {
      const header = new DataView(bytes.buffer, bytes.byteOffset + offset + 8);
      width = header.getUint32(0);
      height = header.getUint32(4);
      bitDepth = body[8]!;
      colorType = body[9]!;
      if (body[12] !== 0) {
        throw new Error('interlaced png not supported');
      }
    } else if (type === 'IDAT') {
      idatParts.push(body);
    } else if (type === 'IEND') {
      break;
    }
    offset += 12 + length;
  }
  if (bitDepth !== 8 || (colorType !== 0 && colorType !== 3)) {
    throw new Error(`unsupported png: depth ${bitDepth} color type ${colorType}`);
  }
  const compressed = new Uint8Array(idatParts.reduce((n, p) => n + p.length, 0));
  let at = 0;
  for (const part of idatParts) {
    compressed.set(part, at);
    at += part.length;
  }
  const raw = new Uint8Array(inflateSync(compressed));
  const stride = width + 1;
  if (raw.length !== stride * height) {
    throw new Error('decompressed size mismatch');
  }
  const pixels = new Uint8Array(width * height);
  for (let row = 0; row < height; row++) {
    const filter = raw[row * stride]!;
    for (let col = 0; col < width; col++) {
      const x = raw[row * stride + 1 + col]!;
      const a = col > 0 ? pixels[row * width + col - 1]! : 0;
      const b = row > 0 ? pixels[(row - 1) * width + col]! : 0;
      const c = row > 0 && col > 0 ? pixels[(row - 1) * width + col - 1]! : 0;
      let value: number;
      switch (filter) {
        case 0:
          value = x;
          break;
        case 1:
          value = x + a;
          break;
        case 2:
          value = x + b;
          break;
        case 3:
          value = x + Math.floor((a + b) / 2);
          break;
        case 4:
          value = x + paeth(a, b, c);
          break;
        default:
          throw new Error(`bad filter ${filter}`);
      }
      pixels[row * width + col] = value & 0xff;
    }
  }
  return { width, height, pixels, colorType };
}
