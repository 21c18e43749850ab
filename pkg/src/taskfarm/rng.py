"""Deterministic 64-bit random streams shared with the browser worker.

The generator is the splitmix64 output mix applied to a counter: draw
``i`` of the stream rooted at ``seed`` is ``mix64(seed + (i + 1) * GAMMA)``
with all arithmetic modulo 2**64.  Because every draw is addressed by its
index alone, a resumed task can continue mid-stream from any checkpoint
without carrying generator state, and the JavaScript worker reproduces the
exact same values with BigInt arithmetic.

Constants are the splitmix64 increment and finalizer from Steele, Lea and
Flood, "Fast splittable pseudorandom number generators" (OOPSLA 2014).
Do not change them: recorded experiment outputs and the cross-language
equivalence tests both pin this stream.
"""

MASK64 = (1 << 64) - 1

GAMMA = 0x9E3779B97F4A7C15
MIX_A = 0xBF58476D1CE4E5B9
MIX_B = 0x94D049BB133111EB


def mix64(z: int) -> int:
    """splitmix64 finalizer: avalanche a 64-bit value."""
    z &= MASK64
    z = ((z ^ (z >> 30)) * MIX_A) & MASK64
    z = ((z ^ (z >> 27)) * MIX_B) & MASK64
    return z ^ (z >> 31)


def draw(seed: int, index: int) -> int:
    """64-bit draw number ``index`` (0-based) of the stream rooted at ``seed``."""
    return mix64((seed + (index + 1) * GAMMA) & MASK64)


def uniform(seed: int, index: int) -> float:
    """Draw ``index`` mapped onto [0, 1) with 53-bit resolution.

    The top 53 bits divided by 2**53, the usual double construction, so
    Python and JavaScript produce bit-identical floats.
    """
    return (draw(seed, index) >> 11) * 2.0 ** -53


def uniform_block(seed: int, start: int, count: int):
    """Draws ``start`` .. ``start+count-1`` as a float64 array.

    Same values as ``uniform``, computed vectorised: uint64 arithmetic
    wraps modulo 2**64 exactly like the scalar path, so the fast path is
    bit-identical, just not one call per draw.
    """
    import numpy as np

    idx = np.arange(start + 1, start + count + 1, dtype=np.uint64)
    z = (np.uint64(seed) + idx * np.uint64(GAMMA))
    z = (z ^ (z >> np.uint64(30))) * np.uint64(MIX_A)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(MIX_B)
    z = z ^ (z >> np.uint64(31))
    return (z >> np.uint64(11)).astype(np.float64) * 2.0 ** -53
