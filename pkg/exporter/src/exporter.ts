/**
 * The export pipeline: manifest in, validated embedding container out.
 *
 * Every entry's video is sampled at uniform intervals (default 12
 * frames), each frame is resized to 224x224 and encoded, the pooled
 * video feature is the mean of the per-frame embeddings, and each
 * caption contributes token embeddings plus a pooled vector. Nothing
 * is written unless every entry succeeds: failures surface as one
 * diagnostic per entry and the export is refused whole.
 */

import { readFileSync, writeFileSync } from "node:fs";

import { writeContainer, type TextEntry, type VideoEntry } from "./container.js";
import { EMBED_DIM, type Encoder } from "./encoder.js";
import { sampleFrames } from "./frames.js";

export const DEFAULT_FRAME_COUNT = 12;

export interface ManifestEntry {
  path: string;
  captions: string[];
  id: number;
}

export interface ExportManifest {
  entries: ManifestEntry[];
  frameCount: number;
}

export class ManifestError extends Error {}

export class ExportError extends Error {
  constructor(readonly diagnostics: string[]) {
    super(`export refused: ${diagnostics.length} entr` +
          `${diagnostics.length === 1 ? "y" : "ies"} failed\n` +
          diagnostics.map((d) => `  - ${d}`).join("\n"));
  }
}

/** Parse and validate the manifest JSON (a list of
 * {path, captions[], id} objects). */
export function loadManifest(path: string, frameCount = DEFAULT_FRAME_COUNT): ExportManifest {
  let raw: unknown;
  try {
    raw = JSON.parse(readFileSync(path, "utf8"));
  } catch (err) {
    throw new ManifestError(`cannot read manifest ${path}: ${(err as Error).message}`);
  }
  return validateManifest(raw, frameCount);
}

export function validateManifest(raw: unknown, frameCount = DEFAULT_FRAME_COUNT): ExportManifest {
  if (!Array.isArray(raw)) {
    throw new ManifestError("manifest must be a JSON list of {path, captions, id}");
  }
  if (raw.length === 0) {
    throw new ManifestError("manifest has no entries");
  }
  if (!Number.isInteger(frameCount) || frameCount < 1) {
    throw new ManifestError(`frame count must be a positive integer, got ${frameCount}`);
  }
  const seen = new Set<number>();
  const entries = raw.map((item, index) => {
    const at = `entry ${index}`;
    if (typeof item !== "object" || item === null) {
      throw new ManifestError(`${at}: not an object`);
    }
    const { path, captions, id } = item as Record<string, unknown>;
    if (typeof path !== "string" || !path) {
      throw new ManifestError(`${at}: missing video path`);
    }
    if (!Number.isInteger(id) || (id as number) < 0) {
      throw new ManifestError(`${at}: id must be a nonnegative integer`);
    }
    if (seen.has(id as number)) {
      throw new ManifestError(`${at}: duplicate id ${id}`);
    }
    seen.add(id as number);
    if (!Array.isArray(captions) || captions.length === 0 ||
        !captions.every((c) => typeof c === "string" && c.trim().length > 0)) {
      throw new ManifestError(`${at}: needs at least one non-empty caption`);
    }
    return { path, captions: captions as string[], id: id as number };
  });
  return { entries, frameCount };
}

export interface ExportResult {
  videos: number;
  texts: number;
  dim: number;
  bytes: number;
}

export async function exportManifest(
  manifest: ExportManifest, destination: string, encoder: Encoder
): Promise<ExportResult> {
  const videos: VideoEntry[] = [];
  const texts: TextEntry[] = [];
  const diagnostics: string[] = [];

  for (const entry of manifest.entries) {
    let rgbFrames: Float32Array[];
    try {
      rgbFrames = sampleFrames(entry.path, manifest.frameCount);
    } catch (err) {
      diagnostics.push(`${entry.path}: ${(err as Error).message}`);
      continue;
    }
    const frames = new Float32Array(manifest.frameCount * EMBED_DIM);
    const pooled = new Float32Array(EMBED_DIM);
    for (let i = 0; i < rgbFrames.length; i++) {
      const emb = await encoder.encodeFrame(rgbFrames[i]);
      frames.set(emb, i * EMBED_DIM);
      for (let d = 0; d < EMBED_DIM; d++) pooled[d] += emb[d];
    }
    for (let d = 0; d < EMBED_DIM; d++) pooled[d] /= manifest.frameCount;
    videos.push({
      id: BigInt(entry.id),
      frames,
      frameCount: manifest.frameCount,
      pooled,
    });
    for (let c = 0; c < entry.captions.length; c++) {
      const emb = await encoder.encodeText(entry.captions[c]);
      texts.push({
        id: BigInt(entry.id) * 1_000_000n + BigInt(c + 1),
        videoId: BigInt(entry.id),
        tokens: emb.tokens,
        tokenCount: emb.tokenCount,
        pooled: emb.pooled,
      });
    }
  }

  if (diagnostics.length > 0) {
    throw new ExportError(diagnostics); // partial exports are refused
  }

  // Pad captions to one shared token length so the container's texts
  // stack into a single batch downstream.
  const maxTokens = Math.max(...texts.map((t) => t.tokenCount));
  const pad = encoder.padVector();
  for (const t of texts) {
    if (t.tokenCount === maxTokens) continue;
    const padded = new Float32Array(maxTokens * EMBED_DIM);
    padded.set(t.tokens.subarray(0, t.tokenCount * EMBED_DIM));
    for (let i = t.tokenCount; i < maxTokens; i++) {
      padded.set(pad, i * EMBED_DIM);
    }
    t.tokens = padded;
    t.tokenCount = maxTokens;
  }

  const blob = writeContainer(EMBED_DIM, videos, texts);
  writeFileSync(destination, blob);
  return { videos: videos.length, texts: texts.length, dim: EMBED_DIM, bytes: blob.length };
}
