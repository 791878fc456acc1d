"""Bit-exact NVFP4 quantization emulation and statistical harness."""

from .formats import (
    decode_fp4,
    decode_fp8,
    encode_fp4_rtn,
    encode_fp4_sr,
    encode_fp8_rtn,
    encode_fp8_sr,
    round_e8m3_rtn,
)
from .rht import SeedPair, hadamard_128, prng_uniform, rht_apply, rht_inverse
from .quantizers import (
    GridMax,
    NVFP4Tensor,
    SquareBlockTensor,
    dequantize,
    quantize_rtn,
    quantize_rtn_46,
    quantize_sr,
    quantize_sr_46,
    quantize_square_block,
)

__version__ = "0.1.0"
