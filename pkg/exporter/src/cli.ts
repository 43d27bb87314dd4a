#!/usr/bin/env node
/**
 * msam-exporter: bridge real videos into msam embedding containers.
 *
 *   msam-exporter export --manifest m.json --out d.emb
 *                        [--frames 12] [--encoder clip|reference]
 *   msam-exporter synth-video --out clip.avi
 *                        [--frames 40] [--width 64] [--height 48] [--seed 1]
 *
 * The manifest is a JSON list of {path, captions[], id}. Exports are
 * deterministic per encoder: re-running a manifest reproduces the
 * container byte for byte. Exit codes: 0 success, 1 usage error,
 * 2 data/encoder error.
 */

import { writeFileSync } from "node:fs";

import { synthVideo, writeAvi } from "./avi.js";
import { EncoderLoadError, makeEncoder } from "./encoder.js";
import {
  DEFAULT_FRAME_COUNT,
  ExportError,
  ManifestError,
  exportManifest,
  loadManifest,
} from "./exporter.js";
import { FrameSourceError } from "./frames.js";

interface Flags {
  [key: string]: string;
}

function parseFlags(argv: string[], allowed: Set<string>): Flags {
  const flags: Flags = {};
  for (let i = 0; i < argv.length; i += 2) {
    const key = argv[i];
    if (!key.startsWith("--") || !allowed.has(key.slice(2))) {
      throw new UsageError(`unknown flag ${key}`);
    }
    if (i + 1 >= argv.length) {
      throw new UsageError(`flag ${key} needs a value`);
    }
    flags[key.slice(2)] = argv[i + 1];
  }
  return flags;
}

function intFlag(flags: Flags, name: string, fallback: number): number {
  if (!(name in flags)) return fallback;
  const v = Number(flags[name]);
  if (!Number.isInteger(v)) throw new UsageError(`--${name} must be an integer`);
  return v;
}

class UsageError extends Error {}

const USAGE = `usage:
  msam-exporter export --manifest m.json --out d.emb [--frames 12] [--encoder clip|reference]
  msam-exporter synth-video --out clip.avi [--frames 40] [--width 64] [--height 48] [--seed 1]`;

async function cmdExport(argv: string[]): Promise<number> {
  const flags = parseFlags(argv, new Set(["manifest", "out", "frames", "encoder"]));
  if (!flags.manifest || !flags.out) {
    throw new UsageError("export needs --manifest and --out");
  }
  const manifest = loadManifest(flags.manifest, intFlag(flags, "frames", DEFAULT_FRAME_COUNT));
  const encoder = await makeEncoder(flags.encoder ?? "clip");
  const result = await exportManifest(manifest, flags.out, encoder);
  console.log(
    `wrote ${flags.out}: ${result.videos} videos, ${result.texts} texts, ` +
    `dim ${result.dim}, ${result.bytes} bytes (${encoder.name} encoder)`
  );
  console.log("-- result --");
  console.log(`videos ${result.videos}`);
  console.log(`texts ${result.texts}`);
  console.log(`dim ${result.dim}`);
  console.log(`bytes ${result.bytes}`);
  console.log(`encoder ${encoder.name}`);
  return 0;
}

function cmdSynthVideo(argv: string[]): number {
  const flags = parseFlags(argv, new Set(["out", "frames", "width", "height", "seed"]));
  if (!flags.out) throw new UsageError("synth-video needs --out");
  const frames = synthVideo(
    intFlag(flags, "frames", 40),
    intFlag(flags, "width", 64),
    intFlag(flags, "height", 48),
    intFlag(flags, "seed", 1),
  );
  const blob = writeAvi(frames);
  writeFileSync(flags.out, blob);
  console.log(`wrote ${flags.out}: ${frames.length} frames, ` +
              `${frames[0].width}x${frames[0].height}, ${blob.length} bytes`);
  console.log("-- result --");
  console.log(`frames ${frames.length}`);
  console.log(`bytes ${blob.length}`);
  return 0;
}

export async function main(argv: string[]): Promise<number> {
  try {
    const [verb, ...rest] = argv;
    if (verb === "export") return await cmdExport(rest);
    if (verb === "synth-video") return cmdSynthVideo(rest);
    throw new UsageError(verb ? `unknown verb ${verb}` : "missing verb");
  } catch (err) {
    if (err instanceof UsageError) {
      console.error(`error: ${err.message}\n${USAGE}`);
      return 1;
    }
    if (
      err instanceof ManifestError || err instanceof ExportError ||
      err instanceof EncoderLoadError || err instanceof FrameSourceError
    ) {
      console.error(`error: ${err.message}`);
      return 2;
    }
    throw err;
  }
}

const invoked = process.argv[1] ?? "";
if (invoked.endsWith("cli.js") || invoked.endsWith("msam-exporter")) {
  main(process.argv.slice(2)).then((code) => {
    process.exitCode = code;
  });
}
