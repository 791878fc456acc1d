"""Unbiased NVFP4 quantization via rotation and corrected group scales.

Element rounding is deterministic (round-to-nearest), which is what keeps
the error low; unbiasedness is recovered by a per-chunk correction factor

    S = <x_rot, x_rot> / <x_rot, dequant(rtn(x_rot))>

that rescales the quantized chunk to be co-linear with the rotated input
in expectation.  S is far too fine-grained for E4M3 group scales to
represent (their minimum relative step is 1/16), so it is folded into the
scales by stochastic rounding, which preserves it exactly in expectation.

The returned tensor lives in rotated space.  Its dequantization estimates
the rotated input unbiasedly; apply ``rht_inverse`` for an estimate of
the original vector, or let the rotation cancel against a partner tensor
quantized with the same rotation id along the inner GEMM dimension.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .formats import E4M3_MAX, decode_fp8, encode_fp8_sr, round_e8m3_rtn
from .quantizers import (
    GROUP,
    GridMax,
    NVFP4Tensor,
    dequantize,
    quantize_rtn,
    _check_groups,
    _group_absmax,
    _zero_like,
)
from .rht import CHUNK, SeedPair, derive_stream, prng_uniform, rht_apply

__all__ = [
    "CorrectionFactors",
    "correction_factor",
    "chunk_correction_factors",
    "ms_eden_quantize",
    "ms_eden_estimate_pair",
]

_DOMAIN_SCALE_SR = 0x5343414C


@dataclass
class CorrectionFactors:
    """Per-128-chunk rescaling factors; near 1 on typical tensors."""

    per_chunk: np.ndarray


def correction_factor(x_rot, x_rtn) -> float:
    """Correction factor for one 128-element chunk.

    Returns 1.0 when the denominator is degenerate (all-zero chunk or a
    quantization orthogonal to the input), which can only happen here on
    all-zero chunks.
    """
    x_rot = np.asarray(x_rot, dtype=np.float64)
    x_rtn = np.asarray(x_rtn, dtype=np.float64)
    if x_rot.shape != x_rtn.shape or x_rot.shape[-1] != CHUNK:
        raise ValueError(f"correction_factor expects matching length-{CHUNK} chunks")
    num = float(x_rot @ x_rot)
    den = float(x_rot @ x_rtn)
    if num == 0.0 or abs(den) < 1e-30 * num:
        return 1.0
    return num / den


def chunk_correction_factors(x_rot: np.ndarray, x_rtn: np.ndarray) -> np.ndarray:
    """Vectorized correction factors for every 128-chunk along the last axis."""
    rc = x_rot.reshape(*x_rot.shape[:-1], -1, CHUNK)
    qc = x_rtn.reshape(rc.shape)
    num = (rc * rc).sum(axis=-1)
    den = (rc * qc).sum(axis=-1)
    safe = np.abs(den) >= 1e-30 * num
    good = safe & (num > 0.0)
    return np.where(good, num / np.where(good, den, 1.0), 1.0)


def _pow2_shift_exponent(pseudo_max: float) -> int:
    """Smallest k with pseudo_max / 2^k <= 256, computed exactly."""
    if pseudo_max <= 0.0:
        return 0
    m, e = math.frexp(pseudo_max / 256.0)  # pseudo_max/256 = m * 2^e
    return e - 1 if m == 0.5 else e


def _quantize_rtn_pow2(x: np.ndarray, s: float) -> NVFP4Tensor:
    """Clipping RTN quantization whose tensor scale is a power of two.

    The group scales, rounded to E4M3, then equal the full-range 4-bit
    mantissa scales shifted by the exact power of two, which is what makes
    a deferred-alignment pipeline bit-compatible with this single pass.
    """
    from ._kernels import rtn_codes
    from .formats import encode_fp8_rtn

    absmax = np.abs(x).max() if x.size else 0.0
    if absmax == 0.0:
        return _zero_like(x)
    gmax = _group_absmax(x)
    pseudo = round_e8m3_rtn(gmax / s)
    k = _pow2_shift_exponent(float(np.max(pseudo)))
    scale32 = np.float32(2.0**k)
    s8 = encode_fp8_rtn(gmax / (float(scale32) * s))
    codes, _ = rtn_codes(x, decode_fp8(s8) * float(scale32))
    return NVFP4Tensor(fp4=codes, scales8=s8, scale32=scale32)


def ms_eden_quantize(
    x,
    seeds: SeedPair,
    s: GridMax | float = 6.0,
    tensor_id: int = 0,
    rotation_id=None,
    pow2_scale: bool = False,
) -> NVFP4Tensor:
    """Quantize along the last axis: rotate, RTN with cap 256, correct.

    ``rotation_id`` defaults to ``tensor_id``; paired GEMM operands pass
    the shared inner-dimension id there while keeping distinct tensor ids
    for their rounding streams.  ``pow2_scale`` selects the power-of-two
    tensor-scale variant used as the deferred-alignment reference.
    """
    s = s.s if isinstance(s, GridMax) else float(s)
    x = _check_groups(x)
    if x.shape[-1] % CHUNK != 0:
        raise ValueError(f"last dimension must be a multiple of {CHUNK}")
    if rotation_id is None:
        rotation_id = tensor_id
    x_rot = rht_apply(x, seeds.rht, rotation_id)
    t = _quantize_rtn_pow2(x_rot, s) if pow2_scale else quantize_rtn(x_rot, s)
    if float(t.scale32) == 0.0:
        return t
    corr = chunk_correction_factors(x_rot, dequantize(t))
    per_group = np.repeat(corr, CHUNK // GROUP, axis=-1)
    corrected = per_group * decode_fp8(t.scales8)
    peak = corrected.max() if corrected.size else 0.0
    if peak > E4M3_MAX:
        raise ValueError(
            f"corrected group scale {peak} exceeds 448; the 448/256 headroom "
            "should absorb the correction factor"
        )
    gidx = np.arange(corrected.size, dtype=np.uint64).reshape(corrected.shape)
    u = prng_uniform(seeds.sr, derive_stream(_DOMAIN_SCALE_SR, tensor_id), gidx)
    t.scales8 = encode_fp8_sr(corrected, u)
    return t


def ms_eden_estimate_pair(
    a,
    b,
    seeds: SeedPair,
    pair_id: int = 0,
    s: GridMax | float = 6.0,
) -> tuple[NVFP4Tensor, NVFP4Tensor]:
    """Quantize both GEMM operands along their shared inner (last) axis.

    The two tensors share the rotation (same ``pair_id``) so the rotations
    cancel inside the product, and use independent rounding streams.  The
    emulated product of the pair then estimates a @ b.T without any
    inverse rotation.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape[-1] != b.shape[-1]:
        raise ValueError("operands must share the inner (last) dimension")
    qa = ms_eden_quantize(
        a, seeds, s, tensor_id=derive_stream(pair_id, 0), rotation_id=pair_id
    )
    qb = ms_eden_quantize(
        b, seeds, s, tensor_id=derive_stream(pair_id, 1), rotation_id=pair_id
    )
    return qa, qb
