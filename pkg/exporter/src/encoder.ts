/**
 * Embedding backends.
 *
 * `clip` wraps the reference vision-language checkpoint (ViT-B/32,
 * embedding width 512) through transformers.js; loading it needs the
 * package installed and its weights reachable, and any load failure is
 * fatal by contract.
 *
 * `reference` is a self-contained deterministic featurizer at the same
 * width: frames map through a 16x16 RGB grid average and a fixed
 * seeded projection; caption tokens map through hash-seeded unit
 * vectors. It exists so the exporter's contracts (container layout,
 * sampling, determinism, validation by the primary CLI) are fully
 * exercisable on machines where the checkpoint cannot be fetched.
 */

import { Rng, fnv1a64 } from "./rng.js";
import { TARGET_SIZE } from "./frames.js";

export const EMBED_DIM = 512;
export const MAX_TOKENS = 32;

export interface TextEmbedding {
  /** [L, EMBED_DIM] token embeddings, row-major. */
  tokens: Float32Array;
  tokenCount: number;
  pooled: Float32Array;
}

export interface Encoder {
  readonly name: string;
  /** RGB float32 in [0,1], TARGET_SIZE^2 * 3 long -> [EMBED_DIM]. */
  encodeFrame(rgb: Float32Array): Promise<Float32Array>;
  encodeText(caption: string): Promise<TextEmbedding>;
  /** Token row used to pad captions to a uniform length, so one
   * container's texts stack into a single batch downstream. */
  padVector(): Float32Array;
}

export class EncoderLoadError extends Error {}

function l2normalize(v: Float32Array): Float32Array {
  let sq = 0;
  for (let i = 0; i < v.length; i++) sq += v[i] * v[i];
  const inv = sq > 0 ? 1 / Math.sqrt(sq) : 0;
  for (let i = 0; i < v.length; i++) v[i] *= inv;
  return v;
}

const GRID = 16;

export class ReferenceEncoder implements Encoder {
  readonly name = "reference";
  private projection: Float64Array | null = null; // [EMBED_DIM, GRID^2*3]

  private proj(): Float64Array {
    if (this.projection === null) {
      const rng = new Rng(0x5eedcafen);
      const cols = GRID * GRID * 3;
      this.projection = new Float64Array(EMBED_DIM * cols);
      const draws = rng.normal(EMBED_DIM * cols);
      const scale = 1 / Math.sqrt(cols);
      for (let i = 0; i < draws.length; i++) this.projection[i] = draws[i] * scale;
    }
    return this.projection;
  }

  async encodeFrame(rgb: Float32Array): Promise<Float32Array> {
    if (rgb.length !== TARGET_SIZE * TARGET_SIZE * 3) {
      throw new Error(`frame must be ${TARGET_SIZE}x${TARGET_SIZE} RGB`);
    }
    // Average the image over a GRID x GRID cell lattice.
    const cell = TARGET_SIZE / GRID;
    const grid = new Float64Array(GRID * GRID * 3);
    for (let y = 0; y < TARGET_SIZE; y++) {
      const gy = Math.min(GRID - 1, Math.floor(y / cell));
      for (let x = 0; x < TARGET_SIZE; x++) {
        const gx = Math.min(GRID - 1, Math.floor(x / cell));
        const src = (y * TARGET_SIZE + x) * 3;
        const dst = (gy * GRID + gx) * 3;
        grid[dst] += rgb[src];
        grid[dst + 1] += rgb[src + 1];
        grid[dst + 2] += rgb[src + 2];
      }
    }
    for (let i = 0; i < grid.length; i++) grid[i] /= cell * cell;
    const proj = this.proj();
    const out = new Float32Array(EMBED_DIM);
    const cols = grid.length;
    for (let d = 0; d < EMBED_DIM; d++) {
      let acc = 0;
      const row = d * cols;
      for (let c = 0; c < cols; c++) acc += proj[row + c] * grid[c];
      out[d] = acc;
    }
    return l2normalize(out);
  }

  async encodeText(caption: string): Promise<TextEmbedding> {
    const words = caption
      .toLowerCase()
      .split(/[^a-z0-9]+/)
      .filter(Boolean)
      .slice(0, MAX_TOKENS);
    if (words.length === 0) words.push("<empty>");
    const tokens = new Float32Array(words.length * EMBED_DIM);
    const pooled = new Float32Array(EMBED_DIM);
    words.forEach((word, i) => {
      const rng = new Rng(fnv1a64(word));
      const vec = rng.normal(EMBED_DIM);
      const row = new Float32Array(EMBED_DIM);
      for (let d = 0; d < EMBED_DIM; d++) row[d] = vec[d];
      l2normalize(row);
      tokens.set(row, i * EMBED_DIM);
      for (let d = 0; d < EMBED_DIM; d++) pooled[d] += row[d];
    });
    for (let d = 0; d < EMBED_DIM; d++) pooled[d] /= words.length;
    return { tokens, tokenCount: words.length, pooled: l2normalize(pooled) };
  }

  padVector(): Float32Array {
    const rng = new Rng(fnv1a64("<pad>"));
    const vec = rng.normal(EMBED_DIM);
    const row = new Float32Array(EMBED_DIM);
    for (let d = 0; d < EMBED_DIM; d++) row[d] = vec[d];
    return l2normalize(row);
  }
}

const CLIP_MODEL = "Xenova/clip-vit-base-patch32";

/**
 * Load the real checkpoint backend. A missing package or unreachable
 * weights raises EncoderLoadError, which aborts an export run.
 */
export async function loadClipEncoder(): Promise<Encoder> {
  let tf: any;
  try {
    tf = await import("@xenova/transformers" as string);
  } catch (err) {
    throw new EncoderLoadError(
      "checkpoint backend unavailable: @xenova/transformers is not " +
      `installed (${(err as Error).message})`
    );
  }
  let model: any;
  let processor: any;
  let tokenizer: any;
  try {
    [model, processor, tokenizer] = await Promise.all([
      tf.CLIPModel.from_pretrained(CLIP_MODEL),
      tf.AutoProcessor.from_pretrained(CLIP_MODEL),
      tf.AutoTokenizer.from_pretrained(CLIP_MODEL),
    ]);
  } catch (err) {
    throw new EncoderLoadError(
      `failed to load checkpoint ${CLIP_MODEL}: ${(err as Error).message}`
    );
  }
  return {
    name: "clip",
    async encodeFrame(rgb: Float32Array): Promise<Float32Array> {
      const image = new tf.RawImage(
        Uint8ClampedArray.from(rgb, (v) => Math.round(v * 255)),
        TARGET_SIZE, TARGET_SIZE, 3,
      );
      const inputs = await processor(image);
      const out = await model.get_image_features(inputs);
      return Float32Array.from(out.data);
    },
    async encodeText(caption: string): Promise<TextEmbedding> {
      const inputs = tokenizer([caption], { padding: true, truncation: true });
      const pooledOut = await model.get_text_features(inputs);
      const hidden = await model.text_model(inputs);
      return {
        tokens: Float32Array.from(hidden.last_hidden_state.data),
        tokenCount: hidden.last_hidden_state.dims[1],
        pooled: Float32Array.from(pooledOut.data),
      };
    },
    padVector(): Float32Array {
      return new Float32Array(EMBED_DIM); // zero rows beyond the sequence
    },
  };
}

export async function makeEncoder(name: string): Promise<Encoder> {
  if (name === "reference") return new ReferenceEncoder();
  if (name === "clip") return loadClipEncoder();
  throw new EncoderLoadError(`unknown encoder '${name}' (expected clip or reference)`);
}
