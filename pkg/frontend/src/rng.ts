// Counter-based splitmix64 over BigInt, the same stream the server
// draws from.  Position addressing means a task resumed mid-way re-reads
// exactly the values it would have read uninterrupted.

const MASK64 = (1n << 64n) - 1n;
const GAMMA = 0x9e3779b97f4a7c15n;
const MIX_A = 0xbf58476d1ce4e5b9n;
const MIX_B = 0x94d049bb133111ebn;

export function mix64(z: bigint): bigint {
  z &= MASK64;
  z ^= z >> 30n;
  z = (z * MIX_A) & MASK64;
  z ^= z >> 27n;
  z = (z * MIX_B) & MASK64;
  z ^= z >> 31n;
  return z;
}

export function drawAt(seed: bigint, index: number): bigint {
  return mix64((seed + (BigInt(index) + 1n) * GAMMA) & MASK64);
}

// Top 53 bits scaled to [0, 1); exact in a double.
export function uniformAt(seed: bigint, index: number): number {
  return Number(drawAt(seed, index) >> 11n) * 2 ** -53;
}
