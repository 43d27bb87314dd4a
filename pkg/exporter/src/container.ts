/**
 * Writer for the MSAMEMB1 embedding container consumed by the primary
 * CLI (bit-exact, little-endian):
 *
 *   magic "MSAMEMB1" | u32 version=1 | u32 D | u32 V | u32 T
 *   V x { u64 id | u32 F | F*D f32 frames | D f32 pooled }
 *   T x { u64 id | u64 video_id | u32 L | L*D f32 tokens | D f32 pooled }
 *   u32 CRC-32 (IEEE 802.3) over all preceding bytes
 */

import { crc32 } from "./crc32.js";

export interface VideoEntry {
  id: bigint;
  /** [F, D] row-major. */
  frames: Float32Array;
  frameCount: number;
  pooled: Float32Array;
}

export interface TextEntry {
  id: bigint;
  videoId: bigint;
  /** [L, D] row-major. */
  tokens: Float32Array;
  tokenCount: number;
  pooled: Float32Array;
}

const MAGIC = "MSAMEMB1";
const VERSION = 1;

class Writer {
  private parts: Uint8Array[] = [];

  ascii(text: string): void {
    this.parts.push(new Uint8Array([...text].map((c) => c.charCodeAt(0))));
  }

  u32(value: number): void {
    const b = new Uint8Array(4);
    new DataView(b.buffer).setUint32(0, value >>> 0, true);
    this.parts.push(b);
  }

  u64(value: bigint): void {
    const b = new Uint8Array(8);
    new DataView(b.buffer).setBigUint64(0, value & 0xffffffffffffffffn, true);
    this.parts.push(b);
  }

  f32s(values: Float32Array): void {
    const b = new Uint8Array(values.length * 4);
    const view = new DataView(b.buffer);
    for (let i = 0; i < values.length; i++) view.setFloat32(i * 4, values[i], true);
    this.parts.push(b);
  }

  concat(): Uint8Array {
    const total = this.parts.reduce((n, p) => n + p.length, 0);
    const out = new Uint8Array(total);
    let off = 0;
    for (const p of this.parts) {
      out.set(p, off);
      off += p.length;
    }
    return out;
  }
}

export function writeContainer(
  dim: number, videos: VideoEntry[], texts: TextEntry[]
): Uint8Array {
  const w = new Writer();
  w.ascii(MAGIC);
  w.u32(VERSION);
  w.u32(dim);
  w.u32(videos.length);
  w.u32(texts.length);
  for (const v of videos) {
    if (v.frames.length !== v.frameCount * dim || v.pooled.length !== dim) {
      throw new Error(`video ${v.id}: embedding sizes do not match dim ${dim}`);
    }
    w.u64(v.id);
    w.u32(v.frameCount);
    w.f32s(v.frames);
    w.f32s(v.pooled);
  }
  for (const t of texts) {
    if (t.tokens.length !== t.tokenCount * dim || t.pooled.length !== dim) {
      throw new Error(`text ${t.id}: embedding sizes do not match dim ${dim}`);
    }
    w.u64(t.id);
    w.u64(t.videoId);
    w.u32(t.tokenCount);
    w.f32s(t.tokens);
    w.f32s(t.pooled);
  }
  const payload = w.concat();
  const sealed = new Writer();
  sealed.u32(crc32(payload));
  const tail = sealed.concat();
  const out = new Uint8Array(payload.length + tail.length);
  out.set(payload, 0);
  out.set(tail, payload.length);
  return out;
}
