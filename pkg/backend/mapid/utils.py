import hashlib
import logging

import numpy as np

# Configure structured logging
logger = logging.getLogger(__name__)

_U64_MASK = (1 << 64) - 1


def derive_seed(base_seed: int, *parts: int) -> int:
    """
    Derive an independent 64-bit seed from a base seed and integer coordinates.

    Args:
        base_seed: Experiment-level seed
        *parts: Coordinates of the work unit (e.g. instance, fold)

    Returns:
        Deterministic 64-bit seed
    """
    key = ":".join(str(int(p)) for p in (base_seed, *parts))
    h = hashlib.sha256(key.encode("utf-8")).digest()
    return int.from_bytes(h[:8], "big")


def uniform_stream(seed: int, size: int) -> np.ndarray:
    """
    Draw uniforms in [0, 1) from a Philox counter-based generator keyed by `seed`.

    Each uniform uses the top 53 bits of one raw 64-bit output, so the stream is
    reproducible from (seed, position) alone.
    """
    bitgen = np.random.Philox(key=int(seed) & _U64_MASK)
    raw = np.asarray(bitgen.random_raw(size), dtype=np.uint64)
    return (raw >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)


def gaussian_stream(seed: int, size: int) -> np.ndarray:
    """
    Draw standard normal variates with the Box–Muller transform.

    Args:
        seed: Stream key
        size: Number of variates

    Returns:
        Array of `size` N(0, 1) draws
    """
    if size <= 0:
        return np.zeros(0)
    pairs = (size + 1) // 2
    u = uniform_stream(seed, 2 * pairs)
    u1 = 1.0 - u[0::2]  # (0, 1], keeps log finite
    u2 = u[1::2]
    radius = np.sqrt(-2.0 * np.log(u1))
    theta = 2.0 * np.pi * u2
    out = np.empty(2 * pairs)
    out[0::2] = radius * np.cos(theta)
    out[1::2] = radius * np.sin(theta)
    return out[:size]


def permutation(seed: int, n: int) -> np.ndarray:
    """Seeded uniform random permutation of range(n)."""
    rng = np.random.Generator(np.random.Philox(key=int(seed) & _U64_MASK))
    return rng.permutation(n)
