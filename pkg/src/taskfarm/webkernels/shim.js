// Compute-side helpers shared by every kernel bundle.
//
// The random stream here must stay bit-identical to the server's: a
// counter-based splitmix64 over BigInt, position-addressable so a task
// resumed from a checkpoint re-reads exactly the draws it would have
// read uninterrupted.

"use strict";

const TF_MASK64 = (1n << 64n) - 1n;
const TF_GAMMA = 0x9E3779B97F4A7C15n;
const TF_MIX_A = 0xBF58476D1CE4E5B9n;
const TF_MIX_B = 0x94D049BB133111EBn;

function tfMix64(z) {
  z &= TF_MASK64;
  z ^= z >> 30n;
  z = (z * TF_MIX_A) & TF_MASK64;
  z ^= z >> 27n;
  z = (z * TF_MIX_B) & TF_MASK64;
  z ^= z >> 31n;
  return z;
}

function tfDrawAt(seed, index) {
  return tfMix64((seed + (BigInt(index) + 1n) * TF_GAMMA) & TF_MASK64);
}

// Top 53 bits; the result is exact in a double, matching the server.
function tfUniformAt(seed, index) {
  return Number(tfDrawAt(seed, index) >> 11n) * 2 ** -53;
}

// Kernels call this with their implementation object; the harness that
// evaluated the bundle picks it up from TF_KERNEL afterwards.
function __registerKernel(kernel) {
  globalThis.TF_KERNEL = kernel;
}

globalThis.tfDrawAt = tfDrawAt;
globalThis.tfUniformAt = tfUniformAt;
globalThis.__registerKernel = __registerKernel;
