"""Bit-exact scalar codecs for the three storage formats in the NVFP4 stack.

E2M1 ("FP4"):  1 sign, 2 exponent, 1 mantissa bit.  Magnitude grid
               {0, 0.5, 1, 1.5, 2, 3, 4, 6}; absolute maximum 6.0.
E4M3 ("FP8"):  OCP variant; no infinities, max finite 448, min normal
               2^-6, min subnormal 2^-9.  Code S.1111.111 is NaN and is
               never produced by the encoders here (they saturate).
E8M3:          3-bit-mantissa values with the exponent range of a
               16-bit brain-float carrier (2^-126 .. 2^127).  Used as an
               extended-range pseudo-scale; carried as a float64
               constrained to the grid, so multiplying or dividing by an
               in-range power of two is exact.

All encoders are vectorized over numpy arrays and are pure functions.
Stochastic encoders take the uniform sample(s) explicitly; no codec ever
draws randomness on its own.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "FP4_VALUES",
    "FP4_ABS_MAX",
    "E4M3_VALUES",
    "E4M3_MAX",
    "E4M3_MIN_NORMAL",
    "decode_fp4",
    "encode_fp4_rtn",
    "encode_fp4_sr",
    "decode_fp8",
    "encode_fp8_rtn",
    "encode_fp8_sr",
    "round_e8m3_rtn",
]

FP4_ABS_MAX = 6.0
E4M3_MAX = 448.0
E4M3_MIN_NORMAL = 2.0 ** -6

# Magnitude grid indexed by the low 3 bits of an E2M1 code (exp<<1 | mantissa).
_FP4_POS = np.array([0.0, 0.5, 1.0, 1.5, 2.0, 3.0, 4.0, 6.0])
# Decode table for all 16 codes; both zero codes decode to +0.0.
FP4_VALUES = np.concatenate([_FP4_POS, -_FP4_POS])
FP4_VALUES[8] = 0.0
# Relative slack for "must not exceed the grid max" checks.  Scale
# constructions guarantee the bound in real arithmetic; float64 division
# can overshoot by a few ulp, which is not a clipping bug.
_GRID_EPS = 1e-9


def _e4m3_decode_table() -> np.ndarray:
    vals = np.empty(256)
    for code in range(256):
        sign = -1.0 if code & 0x80 else 1.0
        e = (code >> 3) & 0xF
        m = code & 0x7
        if e == 15 and m == 7:
            vals[code] = np.nan
            continue
        if e == 0:
            vals[code] = sign * (m / 8.0) * 2.0**-6
        else:
            vals[code] = sign * (1.0 + m / 8.0) * 2.0 ** (e - 7)
    return vals


E4M3_VALUES = _e4m3_decode_table()
# Non-negative finite values in code order (codes 0..126); monotone increasing.
_E4M3_POS = E4M3_VALUES[:127]
_E4M3_MIDS = (_E4M3_POS[:-1] + _E4M3_POS[1:]) / 2.0


def decode_fp4(codes):
    """Decode E2M1 code(s) (0..15) to their grid values."""
    return FP4_VALUES[np.asarray(codes, dtype=np.uint8)]


def decode_fp8(codes):
    """Decode E4M3 code(s) (0..255) to float; the two NaN codes give NaN."""
    return E4M3_VALUES[np.asarray(codes, dtype=np.uint8)]


def _nearest_even_index(a: np.ndarray, mids: np.ndarray) -> np.ndarray:
    """Index of the nearest grid point given exact interval midpoints.

    Grid points alternate even/odd mantissa with array parity, so a tie at
    mids[i] belongs to the even index among {i, i+1}.
    """
    idx = np.searchsorted(mids, a, side="left")
    capped = np.minimum(idx, len(mids) - 1)
    tie_up = (idx < len(mids)) & (a == mids[capped]) & (idx % 2 == 1)
    return idx + tie_up


# Doubled grid magnitudes {0,1,2,3,4,6,8,12} -> code of magnitude/2; padded
# to 16 so a never-selected upper neighbor of 12 stays indexable.
_FP4_DBL_TO_CODE = np.zeros(17, dtype=np.uint8)
for _c, _v in enumerate(_FP4_POS):
    _FP4_DBL_TO_CODE[int(2 * _v)] = _c


def _fp4_round_doubled(a2: np.ndarray) -> np.ndarray:
    """Nearest doubled-grid magnitude for a2 = 2|x| in [0, 12].

    The doubled grid is integers 0..4, then step 2 to 8, then step 4;
    banker's rounding on each region reproduces ties-to-even-mantissa.
    """
    return np.where(
        a2 <= 4.0,
        np.rint(a2),
        np.where(a2 <= 8.0, 2.0 * np.rint(a2 * 0.5), 4.0 * np.rint(a2 * 0.25)),
    )


def encode_fp4_rtn(x) -> np.ndarray:
    """Round-to-nearest E2M1 encode, ties to even mantissa, saturating at +-6."""
    x = np.asarray(x, dtype=np.float64)
    if np.isnan(x).any():
        raise ValueError("NaN input to encode_fp4_rtn")
    a2 = np.minimum(np.abs(x) * 2.0, 2.0 * FP4_ABS_MAX)
    r = _fp4_round_doubled(a2)
    codes = _FP4_DBL_TO_CODE[r.astype(np.intp)]
    return codes | (np.signbit(x).astype(np.uint8) << 3)


def encode_fp4_sr(x, u) -> np.ndarray:
    """Stochastic-rounding E2M1 encode.

    Rounds the magnitude up to the next grid point with probability
    proportional to the position inside the interval, so the decoded
    result equals x in expectation.  Grid-exact inputs are deterministic
    for every u.  Inputs beyond +-6 would clip and break unbiasedness,
    so they raise.
    """
    x = np.asarray(x, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    if np.isnan(x).any():
        raise ValueError("NaN input to encode_fp4_sr")
    amax = np.abs(x).max() if x.size else 0.0
    if amax > FP4_ABS_MAX * (1.0 + _GRID_EPS):
        raise ValueError(
            f"encode_fp4_sr input {amax} exceeds the FP4 grid max 6.0; "
            "would clip; unbiasedness broken"
        )
    a2 = np.minimum(np.abs(x) * 2.0, 2.0 * FP4_ABS_MAX)
    lo = np.where(
        a2 < 4.0,
        np.floor(a2),
        np.where(a2 < 8.0, 2.0 * np.floor(a2 * 0.5), 4.0 * np.floor(a2 * 0.25)),
    )
    step = np.where(lo < 4.0, 1.0, np.where(lo < 8.0, 2.0, 4.0))
    p = (a2 - lo) / step
    r = lo + step * (u < p)
    codes = _FP4_DBL_TO_CODE[r.astype(np.intp)]
    return codes | (np.signbit(x).astype(np.uint8) << 3)


def encode_fp8_rtn(x) -> np.ndarray:
    """Round-to-nearest E4M3 encode for non-negative inputs.

    Ties go to the even mantissa; anything above 448 saturates to 448.
    The result never exceeds 17/16 times the input in the normal range.
    """
    x = np.asarray(x, dtype=np.float64)
    if np.isnan(x).any():
        raise ValueError("NaN input to encode_fp8_rtn")
    if (x < 0).any():
        raise ValueError("negative input to encode_fp8_rtn")
    return _nearest_even_index(x, _E4M3_MIDS).astype(np.uint8)


def encode_fp8_sr(x, u) -> np.ndarray:
    """Stochastic-rounding E4M3 encode for non-negative inputs up to 448.

    Values below the E4M3 minimum normal (2^-6) are rounded to nearest
    deterministically instead; stochastic rounding there would buy nothing
    measurable and costs a subnormal branch.
    """
    x = np.asarray(x, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    if np.isnan(x).any():
        raise ValueError("NaN input to encode_fp8_sr")
    if (x < 0).any():
        raise ValueError("negative input to encode_fp8_sr")
    amax = x.max() if x.size else 0.0
    if amax > E4M3_MAX * (1.0 + _GRID_EPS):
        raise ValueError(
            f"encode_fp8_sr input {amax} exceeds 448; "
            "EDEN-corrected scale overflowed FP8; check grid cap"
        )
    x = np.minimum(x, E4M3_MAX)
    lo = np.searchsorted(_E4M3_POS, x, side="right") - 1
    lo = np.clip(lo, 0, len(_E4M3_POS) - 2)
    a = _E4M3_POS[lo]
    b = _E4M3_POS[lo + 1]
    p = (x - a) / (b - a)
    sr_codes = (lo + (u < p)).astype(np.uint8)
    rtn_codes = _nearest_even_index(x, _E4M3_MIDS).astype(np.uint8)
    return np.where(x < E4M3_MIN_NORMAL, rtn_codes, sr_codes)


def round_e8m3_rtn(x):
    """Round non-negative value(s) to the nearest 4-significant-bit float.

    The grid is (1 + f/8) * 2^e with f in 0..7 and e in -126..127, plus 0.
    Ties go to the even mantissa.  Rounding commutes with multiplication
    by in-range powers of two because only the exponent shifts.
    """
    x = np.asarray(x, dtype=np.float64)
    if np.isnan(x).any():
        raise ValueError("NaN input to round_e8m3_rtn")
    if (x < 0).any():
        raise ValueError("negative input to round_e8m3_rtn")
    m, e = np.frexp(x)
    # m in [0.5, 1): 16*m in [8, 16); np.round ties-to-even matches the
    # even-mantissa convention since the fraction field is q - 8.
    q = np.round(16.0 * m)
    bump = q >= 16.0
    q = np.where(bump, 8.0, q)
    e = np.where(bump, e + 1, e)
    if (e - 1 > 127).any():
        raise OverflowError("round_e8m3_rtn overflow beyond the bf16 carrier range")
    out = np.ldexp(q / 16.0, e)
    # Below the minimum normal 2^-126 there are no grid points except 0.
    min_normal = 2.0**-126
    out = np.where(x < min_normal, np.where(x <= min_normal / 2.0, 0.0, min_normal), out)
    return out if out.ndim else float(out)
