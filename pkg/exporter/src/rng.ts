/**
 * Deterministic splitmix64 stream (same algorithm and constants as the
 * primary package's generator): the n-th raw output is
 * mix64(seed + (n+1) * 0x9E3779B97F4A7C15) with the standard finalizer.
 * Normal deviates use Box-Muller on uniform pairs.
 */

const MASK = (1n << 64n) - 1n;
const GAMMA = 0x9e3779b97f4a7c15n;
const MIX1 = 0xbf58476d1ce4e5b9n;
const MIX2 = 0x94d049bb133111ebn;

function mix64(z: bigint): bigint {
  z = ((z ^ (z >> 30n)) * MIX1) & MASK;
  z = ((z ^ (z >> 27n)) * MIX2) & MASK;
  return z ^ (z >> 31n);
}

export class Rng {
  private seed: bigint;
  private count = 0n;

  constructor(seed: bigint | number) {
    this.seed = BigInt(seed) & MASK;
  }

  u64(): bigint {
    this.count += 1n;
    return mix64((this.seed + this.count * GAMMA) & MASK);
  }

  /** Uniform in [0, 1) from the top 53 bits. */
  uniform(): number {
    return Number(this.u64() >> 11n) * 2 ** -53;
  }

  /** Standard normal deviates, Box-Muller pairs. */
  normal(n: number): Float64Array {
    const out = new Float64Array(n);
    for (let i = 0; i < n; i += 2) {
      const u1 = (Number(this.u64() >> 11n) + 1) * 2 ** -53; // (0, 1]
      const u2 = Number(this.u64() >> 11n) * 2 ** -53;
      const r = Math.sqrt(-2 * Math.log(u1));
      out[i] = r * Math.cos(2 * Math.PI * u2);
      if (i + 1 < n) out[i + 1] = r * Math.sin(2 * Math.PI * u2);
    }
    return out;
  }
}

/** FNV-1a 64-bit hash, used to seed per-token streams. */
export function fnv1a64(text: string): bigint {
  let h = 0xcbf29ce484222325n;
  const bytes = Buffer.from(text, "utf8");
  for (const b of bytes) {
    h ^= BigInt(b);
    h = (h * 0x100000001b3n) & MASK;
  }
  return h;
}
