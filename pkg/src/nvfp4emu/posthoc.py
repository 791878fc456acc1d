"""Two-pass deferred range alignment for the rotation-corrected quantizer.

A single-pass NVFP4 quantization needs the tensor-wide absmax before it
can write a single scale, which on real hardware forces a second full
read of the tensor.  The two-pass form here avoids that:

Pass 1 rotates and quantizes each chunk against local extended-range
pseudo-scales (E8M3: FP8-style 3-bit mantissas with a bf16-sized exponent
range), producing final FP4 codes, and folds the absmax reduction and the
per-chunk correction factors into the same sweep.

Pass 2 touches only the scales: it picks a power-of-two global shift that
brings every pseudo-scale at or below the 256 cap, applies the correction
factors, and stochastically rounds the result to E4M3.  Because the shift
is a power of two and E8M3 mantissas fit inside E4M3 mantissas, the
combined result is bit-identical to a single-pass quantization with a
power-of-two tensor scale fed the same rounding draws.

The cost model reproduces the bandwidth/instruction accounting of the
naive and deferred pipelines from the storage widths of the formats.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._kernels import dequant_elements, rtn_codes
from .formats import E4M3_MAX, encode_fp8_sr, round_e8m3_rtn
from .ms_eden import (
    _DOMAIN_SCALE_SR,
    CorrectionFactors,
    _pow2_shift_exponent,
    chunk_correction_factors,
)
from .quantizers import GROUP, GridMax, NVFP4Tensor
from .rht import CHUNK, derive_stream, prng_uniform, rht_apply

__all__ = [
    "ErNvfp4Tensor",
    "Pass1Reductions",
    "CostReport",
    "pass1",
    "pass2",
    "cost_model",
    "cost_model_table",
]


@dataclass
class ErNvfp4Tensor:
    """FP4 codes with one extended-range pseudo-scale per 16-group.

    The codes are final; alignment never touches them.
    """

    fp4: np.ndarray  # uint8
    pseudo_scales: np.ndarray  # float64 on the E8M3 grid

    @property
    def shape(self):
        return self.fp4.shape


@dataclass
class Pass1Reductions:
    """Reductions computed during the quantization sweep itself."""

    global_absmax: float  # absmax of the rotated tensor
    corrections: CorrectionFactors


def pass1(x, seed_rht, s: GridMax | float = 6.0, tensor_id: int = 0, rotation_id=None):
    """Rotate, quantize against extended-range pseudo-scales, and reduce.

    Returns the extended-range tensor plus the reductions pass 2 needs.
    """
    s = s.s if isinstance(s, GridMax) else float(s)
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] % CHUNK != 0:
        raise ValueError(f"last dimension must be a multiple of {CHUNK}")
    if rotation_id is None:
        rotation_id = tensor_id
    x_rot = rht_apply(x, seed_rht, rotation_id)
    gmax = np.abs(x_rot.reshape(*x_rot.shape[:-1], -1, GROUP)).max(axis=-1)
    pseudo = np.asarray(round_e8m3_rtn(gmax / s), dtype=np.float64)
    fp4, _ = rtn_codes(x_rot, pseudo)
    er = ErNvfp4Tensor(fp4=fp4, pseudo_scales=pseudo)
    deq = dequant_elements(fp4, pseudo)
    red = Pass1Reductions(
        global_absmax=float(np.abs(x_rot).max()) if x_rot.size else 0.0,
        corrections=CorrectionFactors(chunk_correction_factors(x_rot, deq)),
    )
    return er, red


def pass2(er: ErNvfp4Tensor, red: Pass1Reductions, seed_sr, tensor_id: int = 0):
    """Align pseudo-scales into E4M3: shift, correct, stochastically round.

    The shift 2^k is exact on E8M3 values (only the exponent moves), the
    correction multiplies in before rounding, and the FP4 codes are copied
    verbatim.
    """
    pseudo = er.pseudo_scales
    pmax = float(np.max(pseudo)) if pseudo.size else 0.0
    if pmax == 0.0:
        return NVFP4Tensor(
            fp4=er.fp4.copy(),
            scales8=np.zeros(pseudo.shape, dtype=np.uint8),
            scale32=np.float32(0.0),
        )
    k = _pow2_shift_exponent(pmax)
    scale32 = np.float32(2.0**k)
    shifted = pseudo / float(scale32)
    corr = np.repeat(red.corrections.per_chunk, CHUNK // GROUP, axis=-1)
    corrected = corr * shifted
    peak = corrected.max()
    if peak > E4M3_MAX:
        raise ValueError(
            f"shifted corrected scale {peak} exceeds 448; headroom exhausted"
        )
    gidx = np.arange(corrected.size, dtype=np.uint64).reshape(corrected.shape)
    u = prng_uniform(seed_sr, derive_stream(_DOMAIN_SCALE_SR, tensor_id), gidx)
    return NVFP4Tensor(fp4=er.fp4.copy(), scales8=encode_fp8_sr(corrected, u), scale32=scale32)


@dataclass(frozen=True)
class KernelCost:
    gmem_to_sm_bits_per_elem: float
    sm_to_gmem_bits_per_elem: float
    mma_calls_per_group: int


@dataclass(frozen=True)
class CostReport:
    pipeline: str
    kernel1: KernelCost
    kernel2: KernelCost

    @property
    def gmem_to_sm_total(self) -> float:
        return self.kernel1.gmem_to_sm_bits_per_elem + self.kernel2.gmem_to_sm_bits_per_elem

    @property
    def sm_to_gmem_total(self) -> float:
        return self.kernel1.sm_to_gmem_bits_per_elem + self.kernel2.sm_to_gmem_bits_per_elem

    @property
    def mma_total(self) -> int:
        return self.kernel1.mma_calls_per_group + self.kernel2.mma_calls_per_group

    @property
    def total_bits_per_elem(self) -> float:
        return self.gmem_to_sm_total + self.sm_to_gmem_total


def cost_model(
    pipeline: str,
    elem_bits: int = 4,
    scale_bits: int = 8,
    pseudo_scale_bits: int = 16,
    group: int = GROUP,
) -> CostReport:
    """Bits moved per element and rotation-GEMM calls for a re-quantization.

    The input of a re-quantization is an NVFP4 tensor (elem_bits plus one
    scale_bits scale per group).  The naive pipeline reads and rotates it
    twice: once to reduce the absmax, once to quantize.  The deferred
    pipeline reads it once, writes the extended-range form (elem_bits plus
    one pseudo_scale_bits pseudo-scale per group), and then runs a second
    kernel over the scales alone.
    """
    nvfp4 = elem_bits + scale_bits / group
    er = elem_bits + pseudo_scale_bits / group
    if pipeline == "naive":
        return CostReport(
            pipeline="naive",
            kernel1=KernelCost(nvfp4, 0.0, 1),
            kernel2=KernelCost(nvfp4, nvfp4, 1),
        )
    if pipeline == "posthoc":
        return CostReport(
            pipeline="posthoc",
            kernel1=KernelCost(nvfp4, er, 1),
            kernel2=KernelCost(pseudo_scale_bits / group, scale_bits / group, 0),
        )
    raise ValueError(f"unknown pipeline {pipeline!r}; expected 'naive' or 'posthoc'")


def cost_model_table() -> dict:
    """Both pipelines plus totals and the relative bandwidth saving."""
    naive = cost_model("naive")
    post = cost_model("posthoc")
    return {
        "naive": naive,
        "posthoc": post,
        "saving": 1.0 - post.total_bits_per_elem / naive.total_bits_per_elem,
    }
