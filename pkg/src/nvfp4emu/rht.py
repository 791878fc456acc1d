"""Counter-based PRNG and the seeded randomized Hadamard transform.

Every stochastic choice in this package is a pure function of
(seed, stream id, index).  There is no generator state: two processes, or
the two operands of one GEMM, reproduce the exact same draws from the
same coordinates.  The mixer is the splitmix64 finalizer chained over the
three arguments; its outputs are pinned by golden tests, so the
construction is fixed for the life of the repository.

The rotation is the Sylvester-ordered Hadamard matrix normalized by
1/sqrt(n), applied to 128-element chunks after a seeded +-1 sign flip.
The same sign vector is reused for every chunk of a tensor, and paired
GEMM operands must pass the same rotation id so their rotations cancel in
the inner product.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "SeedPair",
    "CHUNK",
    "prng_uniform",
    "prng_signs",
    "derive_stream",
    "hadamard_128",
    "rht_apply",
    "rht_inverse",
]

CHUNK = 128

_MASK = np.uint64(0xFFFFFFFFFFFFFFFF)
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
# Domain tags keep sign-vector draws, element rounding and scale rounding
# on disjoint streams even when callers reuse small tensor ids.
_DOMAIN_SIGNS = np.uint64(0x53494748)


@dataclass(frozen=True)
class SeedPair:
    """Rotation seed and rounding seed driving one quantization event."""

    rht: int
    sr: int


def _u64(x) -> np.ndarray:
    return np.asarray(x).astype(np.uint64)


def _mix64(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


def _bits(seed, stream, index) -> np.ndarray:
    with np.errstate(over="ignore"):
        z = _mix64(_u64(seed) + _GOLDEN)
        z = _mix64(z ^ (_u64(stream) + _GOLDEN))
        z = _mix64(z ^ (_u64(index) + _GOLDEN))
    return z


def _fnv1a64(data: bytes) -> int:
    h = 0xCBF29CE484222325
    for byte in data:
        h = ((h ^ byte) * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h


def derive_stream(*parts) -> int:
    """Mix integers (or short string tags) into a single 64-bit stream id."""
    z = np.uint64(0)
    with np.errstate(over="ignore"):
        for p in parts:
            if isinstance(p, (str, bytes)):
                p = _fnv1a64(p.encode() if isinstance(p, str) else p)
            z = _mix64(z ^ (_u64(p) + _GOLDEN))
    return int(z)


def prng_uniform(seed, stream, index):
    """Deterministic uniform [0,1) sample(s) for (seed, stream, index).

    `index` may be an integer array; the top 53 bits of the mixed counter
    form the mantissa.
    """
    bits = _bits(seed, stream, index)
    return (bits >> np.uint64(11)).astype(np.float64) * (2.0**-53)


def prng_signs(seed, stream, n: int) -> np.ndarray:
    """n deterministic +-1 signs drawn from the given stream."""
    u = prng_uniform(seed, stream, np.arange(n, dtype=np.uint64))
    return np.where(u < 0.5, 1.0, -1.0)


def _sign_vector(seed, rotation_id, n: int) -> np.ndarray:
    return prng_signs(seed, derive_stream(_DOMAIN_SIGNS, rotation_id), n)


def _fwht(x: np.ndarray, copy: bool = True) -> np.ndarray:
    """Unnormalized Walsh-Hadamard transform along the last axis."""
    from ._kernels import fwht_inplace

    n = x.shape[-1]
    lead = x.shape[:-1]
    y = np.array(x, dtype=np.float64, copy=copy)
    y = np.ascontiguousarray(y).reshape(-1, n)
    fwht_inplace(y)
    return y.reshape(*lead, n)


def hadamard_128(x) -> np.ndarray:
    """Orthonormal Hadamard transform of length-128 vector(s).

    Symmetric and involutive: applying it twice returns the input up to
    float accumulation.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != CHUNK:
        raise ValueError(f"hadamard_128 requires length {CHUNK}, got {x.shape[-1]}")
    return _fwht(x) * (CHUNK**-0.5)


def _chunked(x: np.ndarray, chunk: int) -> np.ndarray:
    if chunk < 16 or chunk & (chunk - 1) or chunk % 16:
        raise ValueError("rotation chunk must be a power of two and a multiple of 16")
    if x.shape[-1] % chunk != 0:
        raise ValueError(
            f"rotation requires the last dimension ({x.shape[-1]}) to be a "
            f"multiple of {chunk}"
        )
    return x.reshape(*x.shape[:-1], x.shape[-1] // chunk, chunk)


def rht_apply(x, seed, rotation_id=0, chunk: int = CHUNK) -> np.ndarray:
    """Seeded sign flip followed by the normalized Hadamard, per chunk.

    Every chunk of the tensor shares one sign vector so the rotation can
    be expressed as a single block-diagonal GEMM; `rotation_id` must be
    the identifier of the GEMM inner dimension when two operands are
    meant to cancel.
    """
    x = np.asarray(x, dtype=np.float64)
    signs = _sign_vector(seed, rotation_id, chunk)
    y = _chunked(x, chunk) * signs
    return (_fwht(y, copy=False) * (chunk**-0.5)).reshape(x.shape)


def rht_inverse(y, seed, rotation_id=0, chunk: int = CHUNK) -> np.ndarray:
    """Exact inverse of rht_apply: Hadamard, then undo the sign flip."""
    y = np.asarray(y, dtype=np.float64)
    signs = _sign_vector(seed, rotation_id, chunk)
    x = _fwht(_chunked(y, chunk)) * (chunk**-0.5) * signs
    return x.reshape(y.shape)
