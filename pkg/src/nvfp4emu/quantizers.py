"""NVFP4 vector/matrix quantizers and their tensor containers.

An NVFP4 tensor stores one E2M1 code per element, one E4M3 scale per
contiguous group of 16 elements along the last axis, and a single fp32
scale for the whole tensor.  The square-block variant shares one E4M3
scale across a 16x16 tile instead, which makes the quantized weight
reusable under transposition at the cost of coarser scaling.

Scale constructions:

* ``quantize_sr``       guarded scales (global cap 448 with a 16/17 margin
                        absorbing FP8 round-down), stochastic elements;
                        never clips, unbiased in expectation.
* ``quantize_rtn``      clipping construction with global cap 256 and an
                        explicit grid ceiling ``s``; the 448/256 headroom
                        is reserved for scale corrections applied later.
* ``quantize_rtn_46``   forward-pass quantizer: per group, scales
                        targeting grid ceilings 6.0 and 4.0 are both
                        evaluated and the branch with the lower realized
                        squared error is kept.  Deterministic and biased.
* ``quantize_sr_46``    the stochastic counterpart; each branch draws its
                        own rounding noise and the better realization is
                        kept, which is what makes the scheme biased even
                        though each branch alone is unbiased.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from ._kernels import LUT_DBL_TO_CODE, dequant_elements, rtn_codes, sr_codes
from .formats import (
    E4M3_MAX,
    FP4_ABS_MAX,
    decode_fp4,
    decode_fp8,
    encode_fp8_rtn,
)
from .rht import derive_stream, prng_uniform

__all__ = [
    "GROUP",
    "GridMax",
    "NVFP4Tensor",
    "SquareBlockTensor",
    "quantize_sr",
    "quantize_rtn",
    "quantize_rtn_46",
    "quantize_sr_46",
    "quantize_square_block",
    "dequantize",
    "serialize_nvfp4",
    "deserialize_nvfp4",
]

GROUP = 16

# Largest factor by which E4M3 round-to-nearest can shrink a positive
# value in the normal range; the guard that keeps stochastic element
# rounding clip-free.
FP8_RTN_MARGIN = 16.0 / 17.0

# Default global-scale ceiling for the guarded (forward / SR) construction.
GUARDED_SCALE_CAP = E4M3_MAX * FP8_RTN_MARGIN

_QUOTIENT_SLACK = 1.0 + 1e-9


@dataclass(frozen=True)
class GridMax:
    """Grid ceiling targeted by a scale construction; at most 6.0."""

    s: float = FP4_ABS_MAX

    def __post_init__(self):
        if not 0.0 < self.s <= FP4_ABS_MAX:
            raise ValueError(f"grid max must be in (0, 6], got {self.s}")


@dataclass
class NVFP4Tensor:
    """FP4 codes + one E4M3 scale per 16 elements + one fp32 tensor scale.

    Groups run along the last axis.  Element i of the dequantization is
    decode(fp4[i]) * decode(scales8[i // 16]) * scale32.
    """

    fp4: np.ndarray  # uint8 codes, logical shape
    scales8: np.ndarray  # uint8 E4M3 codes, shape[:-1] + (d/16,)
    scale32: np.float32
    group_axis: int = -1

    @property
    def shape(self):
        return self.fp4.shape


@dataclass
class SquareBlockTensor:
    """FP4 codes with one E4M3 scale per 16x16 block and one fp32 scale."""

    fp4: np.ndarray  # uint8, (rows, cols)
    scales8: np.ndarray  # uint8, (rows/16, cols/16)
    scale32: np.float32

    @property
    def shape(self):
        return self.fp4.shape


def _check_groups(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] % GROUP != 0:
        raise ValueError(f"last dimension must be a multiple of {GROUP}")
    if not np.isfinite(x).all():
        raise ValueError("input must be finite")
    return x


def _group_absmax(x: np.ndarray) -> np.ndarray:
    return np.abs(x.reshape(*x.shape[:-1], -1, GROUP)).max(axis=-1)


def _zero_like(x: np.ndarray) -> NVFP4Tensor:
    return NVFP4Tensor(
        fp4=np.zeros(x.shape, dtype=np.uint8),
        scales8=np.zeros((*x.shape[:-1], x.shape[-1] // GROUP), dtype=np.uint8),
        scale32=np.float32(0.0),
    )


def _group_denoms(s8_codes: np.ndarray, scale32) -> np.ndarray:
    return decode_fp8(s8_codes) * float(scale32)


def quantize_sr(x, seed, stream=0) -> NVFP4Tensor:
    """Unbiased NVFP4 quantization with stochastic element rounding.

    The tensor scale maps the global absmax to 448 * 16/17 and group
    scales map each group absmax to 6 * 16/17, so that even worst-case
    FP8 round-down leaves every element quotient inside the grid.
    """
    x = _check_groups(x)
    absmax = np.abs(x).max() if x.size else 0.0
    if absmax == 0.0:
        return _zero_like(x)
    scale32 = np.float32(absmax / (FP4_ABS_MAX * FP8_RTN_MARGIN * E4M3_MAX))
    gmax = _group_absmax(x)
    s8 = encode_fp8_rtn(gmax / (float(scale32) * FP4_ABS_MAX * FP8_RTN_MARGIN))
    denom = _group_denoms(s8, scale32)
    peak = np.max(gmax / np.where(denom > 0.0, denom, np.inf))
    if peak > FP4_ABS_MAX * _QUOTIENT_SLACK:
        raise AssertionError(
            f"non-clipping construction produced quotient {peak}; encoder bug"
        )
    u = prng_uniform(seed, stream, np.arange(x.size, dtype=np.uint64).reshape(x.shape))
    codes, _ = sr_codes(x, denom, u)
    return NVFP4Tensor(fp4=codes, scales8=s8, scale32=scale32)


def quantize_rtn(x, s: GridMax | float = FP4_ABS_MAX) -> NVFP4Tensor:
    """Deterministic NVFP4 quantization with grid ceiling s and cap 256.

    Group scales may round down, in which case the largest elements of the
    group land above s and saturate at +-6; the construction accepts that
    clipping in exchange for scale headroom (448/256 = 1.75x) above the
    cap, reserved for multiplicative scale corrections.
    """
    s = s.s if isinstance(s, GridMax) else float(s)
    x = _check_groups(x)
    absmax = np.abs(x).max() if x.size else 0.0
    if absmax == 0.0:
        return _zero_like(x)
    scale32 = np.float32(absmax / (s * 256.0))
    gmax = _group_absmax(x)
    s8 = encode_fp8_rtn(gmax / (float(scale32) * s))
    codes, _ = rtn_codes(x, _group_denoms(s8, scale32), want_err=False)
    return NVFP4Tensor(fp4=codes, scales8=s8, scale32=scale32)


def _select_branches(x, scale32, branches):
    """Keep, per group, the candidate branch with lower squared error.

    ``branches`` yields (s8_codes, fp4_codes, per_group_error); errors are
    measured in the dequantized domain.  Ties keep the earliest candidate
    (the 6.0 branch), preserving plain-RTN behavior.
    """
    n_groups_shape = (*x.shape[:-1], x.shape[-1] // GROUP)
    best_err = fp4 = s8 = None
    for s8_c, fp4_c, err_c in branches:
        err_c = err_c.reshape(n_groups_shape)
        if best_err is None:
            best_err, fp4, s8 = err_c, fp4_c, s8_c
        else:
            better = err_c < best_err
            mask = np.repeat(better, GROUP, axis=-1).reshape(x.shape)
            fp4 = np.where(mask, fp4_c, fp4)
            s8 = np.where(better, s8_c, s8)
            best_err = np.minimum(best_err, err_c)
    return NVFP4Tensor(fp4=fp4, scales8=s8, scale32=scale32)


def quantize_rtn_46(
    x,
    caps=(6.0, 4.0),
    scale_cap: float = GUARDED_SCALE_CAP,
) -> NVFP4Tensor:
    """Forward-pass RTN quantization with per-group grid-ceiling choice.

    The tensor scale comes from the first (6.0) ceiling; each group is
    then quantized under a scale targeting every ceiling in ``caps`` and
    the branch with the lower dequantized squared error wins.
    """
    x = _check_groups(x)
    absmax = np.abs(x).max() if x.size else 0.0
    if absmax == 0.0:
        return _zero_like(x)
    scale32 = np.float32(absmax / (caps[0] * scale_cap))
    gmax = _group_absmax(x)
    want_err = len(caps) > 1

    def branches():
        for c in caps:
            s8 = encode_fp8_rtn(gmax / (float(scale32) * c))
            codes, err = rtn_codes(x, _group_denoms(s8, scale32), want_err)
            yield s8, codes, err

    if not want_err:
        s8, codes, _ = next(branches())
        return NVFP4Tensor(fp4=codes, scales8=s8, scale32=scale32)
    return _select_branches(x, scale32, branches())


def quantize_sr_46(x, seed, stream=0, caps=(6.0, 4.0)) -> NVFP4Tensor:
    """Stochastic 4/6 quantization: SR elements under both ceilings, each
    branch with its own rounding draws, then per-group selection of the
    realization with lower squared error.

    Both branches carry the 16/17 guard so neither ever clips, and each
    branch alone is unbiased; selecting on realized error correlates the
    kept branch with its own rounding noise, which is exactly why this
    scheme is biased.
    """
    x = _check_groups(x)
    absmax = np.abs(x).max() if x.size else 0.0
    if absmax == 0.0:
        return _zero_like(x)
    scale32 = np.float32(absmax / (caps[0] * GUARDED_SCALE_CAP))
    gmax = _group_absmax(x)
    idx = np.arange(x.size, dtype=np.uint64).reshape(x.shape)

    def branches():
        for branch, c in enumerate(caps):
            s8 = encode_fp8_rtn(gmax / (float(scale32) * c * FP8_RTN_MARGIN))
            u = prng_uniform(seed, derive_stream(stream, branch), idx)
            codes, err = sr_codes(x, _group_denoms(s8, scale32), u, want_err=True)
            yield s8, codes, err

    return _select_branches(x, scale32, branches())


def quantize_square_block(x, use_46: bool = False) -> SquareBlockTensor:
    """Deterministic quantization with one E4M3 scale per 16x16 block.

    Uses the cap-256 ceiling construction; with ``use_46`` the 6.0/4.0
    branch choice is made per block.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] % GROUP or x.shape[1] % GROUP:
        raise ValueError("square-block input must be 2D with both dims multiples of 16")
    if not np.isfinite(x).all():
        raise ValueError("input must be finite")
    absmax = np.abs(x).max() if x.size else 0.0
    if absmax == 0.0:
        return SquareBlockTensor(
            fp4=np.zeros(x.shape, dtype=np.uint8),
            scales8=np.zeros((x.shape[0] // GROUP, x.shape[1] // GROUP), dtype=np.uint8),
            scale32=np.float32(0.0),
        )
    caps = (6.0, 4.0) if use_46 else (6.0,)
    scale32 = np.float32(absmax / (caps[0] * 256.0))
    r, c = x.shape
    blocks = x.reshape(r // GROUP, GROUP, c // GROUP, GROUP)
    bmax = np.abs(blocks).max(axis=(1, 3))
    best_err = fp4 = s8 = None
    for cap in caps:
        s8_c = encode_fp8_rtn(bmax / (float(scale32) * cap))
        denom = decode_fp8(s8_c)[:, None, :, None] * float(scale32)
        safe = np.where(denom > 0.0, denom, np.inf)
        q = np.where(np.isfinite(safe), blocks / safe, 0.0)
        a2 = np.minimum(np.abs(q) * 2.0, 12.0)
        rr = np.where(
            a2 <= 4.0,
            np.rint(a2),
            np.where(a2 <= 8.0, 2.0 * np.rint(a2 * 0.5), 4.0 * np.rint(a2 * 0.25)),
        )
        fp4_c = LUT_DBL_TO_CODE[rr.astype(np.intp)] | (
            np.signbit(q).astype(np.uint8) << 3
        )
        deq = np.copysign(rr * 0.5, q) * np.where(np.isfinite(safe), safe, 0.0)
        err = ((deq - blocks) ** 2).sum(axis=(1, 3))
        if best_err is None:
            best_err, fp4, s8 = err, fp4_c, s8_c
        else:
            better = err < best_err
            fp4 = np.where(better[:, None, :, None], fp4_c, fp4)
            s8 = np.where(better, s8_c, s8)
            best_err = np.minimum(best_err, err)
    return SquareBlockTensor(fp4=fp4.reshape(r, c), scales8=s8, scale32=scale32)


def dequantize(t):
    """Reconstruct the real-valued tensor from any quantized container."""
    if isinstance(t, NVFP4Tensor):
        return dequant_elements(t.fp4, _group_denoms(t.scales8, t.scale32))
    if isinstance(t, SquareBlockTensor):
        svals = decode_fp8(t.scales8)
        scale = np.repeat(np.repeat(svals, GROUP, axis=0), GROUP, axis=1)
        return decode_fp4(t.fp4) * scale * float(t.scale32)
    raise TypeError(f"cannot dequantize {type(t).__name__}")


_MAGIC = b"NV4T"
_VERSION = 1


def serialize_nvfp4(t: NVFP4Tensor) -> bytes:
    """Pack an NVFP4Tensor into the documented binary container.

    Layout: magic 'NV4T', u16 version, u8 ndim, u8 group-axis byte
    (0xFF = last axis), ndim * u32 dims, packed 4-bit codes two per byte
    (little element first), raw E4M3 scale bytes, fp32 tensor scale
    little-endian.
    """
    codes = t.fp4.reshape(-1)
    packed = (codes[0::2] | (codes[1::2] << 4)).astype(np.uint8)
    head = struct.pack(
        f"<4sHBB{t.fp4.ndim}I", _MAGIC, _VERSION, t.fp4.ndim, 0xFF, *t.fp4.shape
    )
    return (
        head
        + packed.tobytes()
        + t.scales8.reshape(-1).tobytes()
        + struct.pack("<f", float(t.scale32))
    )


def deserialize_nvfp4(buf: bytes) -> NVFP4Tensor:
    magic, version, ndim, _axis = struct.unpack_from("<4sHBB", buf, 0)
    if magic != _MAGIC:
        raise ValueError("bad magic in NVFP4 container")
    if version != _VERSION:
        raise ValueError(f"unsupported NVFP4 container version {version}")
    dims = struct.unpack_from(f"<{ndim}I", buf, 8)
    n = int(np.prod(dims))
    off = 8 + 4 * ndim
    packed = np.frombuffer(buf, dtype=np.uint8, count=n // 2, offset=off)
    codes = np.empty(n, dtype=np.uint8)
    codes[0::2] = packed & 0xF
    codes[1::2] = packed >> 4
    off += n // 2
    s8 = np.frombuffer(buf, dtype=np.uint8, count=n // GROUP, offset=off).copy()
    off += n // GROUP
    (scale32,) = struct.unpack_from("<f", buf, off)
    return NVFP4Tensor(
        fp4=codes.reshape(dims),
        scales8=s8.reshape(*dims[:-1], dims[-1] // GROUP),
        scale32=np.float32(scale32),
    )
