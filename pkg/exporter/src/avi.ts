/**
 * Minimal uncompressed AVI support.
 *
 * Reads RIFF/AVI files whose single video stream is raw 24-bit DIB
 * (biCompression = 0), the format ffmpeg emits with
 * `-c:v rawvideo -pix_fmt bgr24`. This keeps the exporter able to
 * consume a real video container without shelling out; compressed
 * formats are handled by the ffmpeg frame source when an ffmpeg binary
 * is present. The writer exists so tests (and `synth-video`) can make
 * genuine video files from scratch.
 *
 * DIB frames are stored bottom-up in BGR order with 4-byte-aligned
 * rows; everything here converts to top-down tightly packed RGB.
 */

export interface RgbFrame {
  width: number;
  height: number;
  /** Tightly packed RGB, row-major, top-down: width*height*3 bytes. */
  pixels: Uint8Array;
}

export class AviError extends Error {}

function fourcc(buf: Uint8Array, off: number): string {
  return String.fromCharCode(buf[off], buf[off + 1], buf[off + 2], buf[off + 3]);
}

function u32(buf: Uint8Array, off: number): number {
  return (buf[off] | (buf[off + 1] << 8) | (buf[off + 2] << 16)) + buf[off + 3] * 0x1000000;
}

interface Chunk {
  id: string;
  listType?: string;
  start: number; // payload start
  size: number; // payload size
}

function* chunks(buf: Uint8Array, start: number, end: number): Generator<Chunk> {
  let off = start;
  while (off + 8 <= end) {
    const id = fourcc(buf, off);
    const size = u32(buf, off + 4);
    const payload = off + 8;
    if (payload + size > end) {
      throw new AviError(`chunk ${id} at ${off} overruns its parent`);
    }
    if (id === "LIST" || id === "RIFF") {
      yield { id, listType: fourcc(buf, payload), start: payload + 4, size: size - 4 };
    } else {
      yield { id, start: payload, size };
    }
    off = payload + size + (size & 1); // chunks are word-aligned
  }
}

function findList(buf: Uint8Array, start: number, end: number, type: string): Chunk {
  for (const c of chunks(buf, start, end)) {
    if (c.id === "LIST" && c.listType === type) return c;
  }
  throw new AviError(`no ${type} list found`);
}

export function readAvi(buf: Uint8Array): RgbFrame[] {
  if (buf.length < 12 || fourcc(buf, 0) !== "RIFF" || fourcc(buf, 8) !== "AVI ") {
    throw new AviError("not a RIFF/AVI file");
  }
  const top = 12;
  const topEnd = Math.min(buf.length, 8 + u32(buf, 4));

  const hdrl = findList(buf, top, topEnd, "hdrl");
  const strl = findList(buf, hdrl.start, hdrl.start + hdrl.size, "strl");
  let width = 0;
  let height = 0;
  for (const c of chunks(buf, strl.start, strl.start + strl.size)) {
    if (c.id !== "strf") continue;
    if (c.size < 40) throw new AviError("stream format header too short");
    width = u32(buf, c.start + 4);
    height = u32(buf, c.start + 8);
    const bitCount = buf[c.start + 14] | (buf[c.start + 15] << 8);
    const compression = u32(buf, c.start + 16);
    if (compression !== 0 || bitCount !== 24) {
      throw new AviError(
        `only uncompressed 24-bit video is supported natively ` +
        `(got compression ${compression}, ${bitCount} bpp); ` +
        `install ffmpeg for compressed formats`
      );
    }
    break;
  }
  if (width <= 0 || height <= 0) {
    throw new AviError("missing or invalid video stream format");
  }

  const movi = findList(buf, top, topEnd, "movi");
  const rowBytes = (width * 3 + 3) & ~3;
  const frames: RgbFrame[] = [];
  for (const c of chunks(buf, movi.start, movi.start + movi.size)) {
    if (!/^..d[bc]$/.test(c.id)) continue;
    if (c.size < rowBytes * height) {
      throw new AviError(`frame chunk ${frames.length} truncated`);
    }
    const pixels = new Uint8Array(width * height * 3);
    for (let y = 0; y < height; y++) {
      const src = c.start + (height - 1 - y) * rowBytes; // bottom-up
      for (let x = 0; x < width; x++) {
        const p = src + x * 3;
        const q = (y * width + x) * 3;
        pixels[q] = buf[p + 2]; // BGR -> RGB
        pixels[q + 1] = buf[p + 1];
        pixels[q + 2] = buf[p];
      }
    }
    frames.push({ width, height, pixels });
  }
  if (frames.length === 0) throw new AviError("video contains no frames");
  return frames;
}

// -- writer ----------------------------------------------------------------

class ByteSink {
  private parts: Uint8Array[] = [];

  bytes(data: Uint8Array): void {
    this.parts.push(data);
  }

  ascii(text: string): void {
    this.bytes(new Uint8Array([...text].map((c) => c.charCodeAt(0))));
  }

  u32(value: number): void {
    const b = new Uint8Array(4);
    new DataView(b.buffer).setUint32(0, value >>> 0, true);
    this.bytes(b);
  }

  u16(value: number): void {
    const b = new Uint8Array(2);
    new DataView(b.buffer).setUint16(0, value & 0xffff, true);
    this.bytes(b);
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

/** Serialize top-down RGB frames as an uncompressed 24-bit AVI. */
export function writeAvi(frames: RgbFrame[], fps = 10): Uint8Array {
  if (frames.length === 0) throw new AviError("cannot write an empty video");
  const { width, height } = frames[0];
  for (const f of frames) {
    if (f.width !== width || f.height !== height) {
      throw new AviError("all frames must share one size");
    }
  }
  const rowBytes = (width * 3 + 3) & ~3;
  const frameSize = rowBytes * height;

  const strf = new ByteSink();
  strf.u32(40); // BITMAPINFOHEADER size
  strf.u32(width);
  strf.u32(height);
  strf.u16(1); // planes
  strf.u16(24); // bit count
  strf.u32(0); // BI_RGB
  strf.u32(frameSize);
  strf.u32(0);
  strf.u32(0);
  strf.u32(0);
  strf.u32(0);

  const strh = new ByteSink();
  strh.ascii("vids");
  strh.ascii("DIB ");
  for (let i = 0; i < 3; i++) strh.u32(0); // flags, priority+language, initial frames
  strh.u32(1); // scale
  strh.u32(fps); // rate
  strh.u32(0); // start
  strh.u32(frames.length);
  strh.u32(frameSize); // suggested buffer
  strh.u32(0xffffffff); // quality
  strh.u32(0); // sample size
  strh.u16(0);
  strh.u16(0);
  strh.u16(width);
  strh.u16(height);

  const avih = new ByteSink();
  avih.u32(Math.round(1_000_000 / fps));
  avih.u32(frameSize * fps);
  avih.u32(0); // padding granularity
  avih.u32(0x10); // AVIF_HASINDEX
  avih.u32(frames.length);
  avih.u32(0); // initial frames
  avih.u32(1); // streams
  avih.u32(frameSize);
  avih.u32(width);
  avih.u32(height);
  for (let i = 0; i < 4; i++) avih.u32(0);

  const chunk = (id: string, payload: Uint8Array): Uint8Array => {
    const s = new ByteSink();
    s.ascii(id);
    s.u32(payload.length);
    s.bytes(payload);
    if (payload.length & 1) s.bytes(new Uint8Array(1));
    return s.concat();
  };
  const list = (type: string, payload: Uint8Array): Uint8Array => {
    const s = new ByteSink();
    s.ascii(type);
    s.bytes(payload);
    return chunk("LIST", s.concat());
  };

  const strl = list("strl", new Uint8Array([
    ...chunk("strh", strh.concat()),
    ...chunk("strf", strf.concat()),
  ]));
  const hdrl = list("hdrl", new Uint8Array([
    ...chunk("avih", avih.concat()),
    ...strl,
  ]));

  const frameChunks: Uint8Array[] = [];
  const idx = new ByteSink();
  let moviOffset = 4; // offsets count from the 'movi' type fourcc
  for (const f of frames) {
    const dib = new Uint8Array(frameSize);
    for (let y = 0; y < height; y++) {
      const dst = (height - 1 - y) * rowBytes;
      for (let x = 0; x < width; x++) {
        const q = (y * width + x) * 3;
        dib[dst + x * 3] = f.pixels[q + 2]; // RGB -> BGR
        dib[dst + x * 3 + 1] = f.pixels[q + 1];
        dib[dst + x * 3 + 2] = f.pixels[q];
      }
    }
    frameChunks.push(chunk("00db", dib));
    idx.ascii("00db");
    idx.u32(0x10); // AVIIF_KEYFRAME
    idx.u32(moviOffset);
    idx.u32(frameSize);
    moviOffset += 8 + frameSize + (frameSize & 1);
  }
  const movi = list("movi", new Uint8Array(frameChunks.flatMap((c) => [...c])));

  const body = new ByteSink();
  body.ascii("AVI ");
  body.bytes(hdrl);
  body.bytes(movi);
  body.bytes(chunk("idx1", idx.concat()));
  const payload = body.concat();

  const out = new ByteSink();
  out.ascii("RIFF");
  out.u32(payload.length);
  out.bytes(payload);
  return out.concat();
}

/** A deterministic moving-gradient clip for demos and tests. */
export function synthVideo(
  frames: number, width: number, height: number, seed: number
): RgbFrame[] {
  const out: RgbFrame[] = [];
  const phase = (seed % 251) / 251;
  for (let t = 0; t < frames; t++) {
    const pixels = new Uint8Array(width * height * 3);
    for (let y = 0; y < height; y++) {
      for (let x = 0; x < width; x++) {
        const q = (y * width + x) * 3;
        pixels[q] = (x * 255 / Math.max(1, width - 1) + t * 7 + phase * 255) % 256;
        pixels[q + 1] = (y * 255 / Math.max(1, height - 1) + t * 3) % 256;
        pixels[q + 2] = (x + y + t * 11 + seed) % 256;
      }
    }
    out.push({ width, height, pixels });
  }
  return out;
}
