/**
 * Frame acquisition: decode a video file, pick frames at uniform
 * intervals, and resize to the encoder's input size.
 *
 * Uncompressed AVI decodes natively (see avi.ts); any other container
 * goes through an ffmpeg subprocess when one is on PATH.
 */

import { execFileSync } from "node:child_process";
import { readFileSync } from "node:fs";

import { AviError, readAvi, type RgbFrame } from "./avi.js";

export const TARGET_SIZE = 224;

export class FrameSourceError extends Error {}

/** Uniform-interval sample indices: round(j * (n-1) / (f-1)),
 * including the first and last frame; a single requested frame takes
 * the first. */
export function uniformIndices(totalFrames: number, wanted: number): number[] {
  if (totalFrames < 1 || wanted < 1) {
    throw new FrameSourceError("frame counts must be positive");
  }
  if (wanted === 1) return [0];
  const out: number[] = [];
  for (let j = 0; j < wanted; j++) {
    out.push(Math.round((j * (totalFrames - 1)) / (wanted - 1)));
  }
  return out;
}

/** Bilinear resize to size x size, tightly packed RGB float32 in [0, 1]. */
export function resizeRgb(frame: RgbFrame, size: number = TARGET_SIZE): Float32Array {
  const { width, height, pixels } = frame;
  const out = new Float32Array(size * size * 3);
  const sx = width / size;
  const sy = height / size;
  for (let y = 0; y < size; y++) {
    const fy = Math.min((y + 0.5) * sy - 0.5, height - 1);
    const y0 = Math.max(0, Math.floor(fy));
    const y1 = Math.min(height - 1, y0 + 1);
    const wy = Math.max(0, fy - y0);
    for (let x = 0; x < size; x++) {
      const fx = Math.min((x + 0.5) * sx - 0.5, width - 1);
      const x0 = Math.max(0, Math.floor(fx));
      const x1 = Math.min(width - 1, x0 + 1);
      const wx = Math.max(0, fx - x0);
      for (let c = 0; c < 3; c++) {
        const p00 = pixels[(y0 * width + x0) * 3 + c];
        const p01 = pixels[(y0 * width + x1) * 3 + c];
        const p10 = pixels[(y1 * width + x0) * 3 + c];
        const p11 = pixels[(y1 * width + x1) * 3 + c];
        const top = p00 + (p01 - p00) * wx;
        const bot = p10 + (p11 - p10) * wx;
        out[(y * size + x) * 3 + c] = (top + (bot - top) * wy) / 255;
      }
    }
  }
  return out;
}

function ffmpegAvailable(): boolean {
  try {
    execFileSync("ffmpeg", ["-version"], { stdio: "ignore" });
    return true;
  } catch {
    return false;
  }
}

function decodeWithFfmpeg(path: string): RgbFrame[] {
  // Re-encode to the natively supported uncompressed AVI and reuse the
  // parser; keeps one decode path.
  const raw = execFileSync(
    "ffmpeg",
    ["-v", "error", "-i", path, "-c:v", "rawvideo", "-pix_fmt", "bgr24",
     "-f", "avi", "pipe:1"],
    { maxBuffer: 1 << 30 },
  );
  return readAvi(new Uint8Array(raw));
}

/** Decode every frame of a video file as RGB. */
export function readVideoFrames(path: string): RgbFrame[] {
  let buf: Uint8Array;
  try {
    buf = new Uint8Array(readFileSync(path));
  } catch (err) {
    throw new FrameSourceError(`cannot read ${path}: ${(err as Error).message}`);
  }
  try {
    return readAvi(buf);
  } catch (err) {
    if (!(err instanceof AviError)) throw err;
    if (ffmpegAvailable()) {
      try {
        return decodeWithFfmpeg(path);
      } catch (ffErr) {
        throw new FrameSourceError(
          `ffmpeg could not decode ${path}: ${(ffErr as Error).message}`
        );
      }
    }
    throw new FrameSourceError(`cannot decode ${path}: ${err.message}`);
  }
}

/** Sample `count` frames at uniform intervals, resized for encoding. */
export function sampleFrames(path: string, count: number, size = TARGET_SIZE): Float32Array[] {
  const frames = readVideoFrames(path);
  return uniformIndices(frames.length, count).map((i) => resizeRgb(frames[i], size));
}
