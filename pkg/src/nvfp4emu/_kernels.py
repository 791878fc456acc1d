"""Fused element kernels for the quantizer hot paths.

Each operation exists twice: a pure-numpy reference and a numba-compiled
single-pass version with identical float64 semantics.  The compiled path
is used when numba imports cleanly and NVFP4EMU_NO_NUMBA is unset; the
test suite asserts bit-equality of the two routes, so either one is safe
to run everywhere.

Element kernels view the stream as (n_groups, 16) with one positive
scale per group; a zero (underflowed) group scale flushes its elements
to code 0.  Codes are E2M1: low 3 bits index the magnitude grid
{0, 0.5, 1, 1.5, 2, 3, 4, 6}, bit 3 is the sign.
"""

from __future__ import annotations

import os

import numpy as np

from .formats import FP4_VALUES

# Doubled magnitudes {0,1,2,3,4,6,8,12} -> magnitude code; padded to 16
# so a never-taken upper neighbor stays indexable.
LUT_DBL_TO_CODE = np.zeros(17, dtype=np.uint8)
for _c, _v in enumerate(FP4_VALUES[:8]):
    LUT_DBL_TO_CODE[int(2 * _v)] = _c

_FP4_TABLE = np.ascontiguousarray(FP4_VALUES)

HAVE_NUMBA = False
if not os.environ.get("NVFP4EMU_NO_NUMBA"):
    try:
        from numba import njit

        HAVE_NUMBA = True
    except ImportError:  # pragma: no cover
        pass


# --- pure numpy reference route ---------------------------------------


def _np_rtn(x2d, denom, want_err):
    d = np.where(denom > 0.0, denom, np.inf)[:, None]
    q = np.where(np.isfinite(d), x2d / d, 0.0)
    a2 = np.minimum(np.abs(q) * 2.0, 12.0)
    r = np.where(
        a2 <= 4.0,
        np.rint(a2),
        np.where(a2 <= 8.0, 2.0 * np.rint(a2 * 0.5), 4.0 * np.rint(a2 * 0.25)),
    )
    codes = LUT_DBL_TO_CODE[r.astype(np.intp)] | (np.signbit(q).astype(np.uint8) << 3)
    err = None
    if want_err:
        deq = np.copysign(r * 0.5, q) * np.where(np.isfinite(d), d, 0.0)
        err = ((deq - x2d) ** 2).sum(axis=1)
    return codes, err


def _np_sr(x2d, denom, u2d, want_err):
    d = np.where(denom > 0.0, denom, np.inf)[:, None]
    q = np.where(np.isfinite(d), x2d / d, 0.0)
    a2 = np.minimum(np.abs(q) * 2.0, 12.0)
    lo = np.where(
        a2 < 4.0,
        np.floor(a2),
        np.where(a2 < 8.0, 2.0 * np.floor(a2 * 0.5), 4.0 * np.floor(a2 * 0.25)),
    )
    step = np.where(lo < 4.0, 1.0, np.where(lo < 8.0, 2.0, 4.0))
    r = lo + step * (u2d < (a2 - lo) / step)
    codes = LUT_DBL_TO_CODE[r.astype(np.intp)] | (np.signbit(q).astype(np.uint8) << 3)
    err = None
    if want_err:
        deq = np.copysign(r * 0.5, q) * np.where(np.isfinite(d), d, 0.0)
        err = ((deq - x2d) ** 2).sum(axis=1)
    return codes, err


def _np_dequant(codes2d, denom):
    return _FP4_TABLE[codes2d] * denom[:, None]


def _np_fwht(y2d):
    n = y2d.shape[-1]
    h = 1
    while h < n:
        v = y2d.reshape(-1, n // (2 * h), 2, h)
        top = v[:, :, 0, :]
        bot = v[:, :, 1, :]
        diff = top - bot
        np.add(top, bot, out=top)
        bot[...] = diff
        h *= 2


# --- numba route -------------------------------------------------------

if HAVE_NUMBA:

    @njit(cache=True)
    def _nb_rtn(x2d, denom, want_err, codes, err):  # pragma: no cover
        for g in range(denom.shape[0]):
            d = denom[g]
            esum = 0.0
            for j in range(16):
                v = x2d[g, j]
                q = v / d if d > 0.0 else 0.0
                a2 = abs(q) * 2.0
                if a2 > 12.0:
                    a2 = 12.0
                if a2 <= 4.0:
                    r = np.rint(a2)
                elif a2 <= 8.0:
                    r = 2.0 * np.rint(a2 * 0.5)
                else:
                    r = 4.0 * np.rint(a2 * 0.25)
                c = LUT_DBL_TO_CODE[int(r)]
                if np.signbit(q):
                    c |= np.uint8(8)
                codes[g, j] = c
                if want_err:
                    deq = -r * 0.5 if np.signbit(q) else r * 0.5
                    deq = deq * d if d > 0.0 else 0.0
                    esum += (deq - v) * (deq - v)
            if want_err:
                err[g] = esum

    @njit(cache=True)
    def _nb_sr(x2d, denom, u2d, want_err, codes, err):  # pragma: no cover
        for g in range(denom.shape[0]):
            d = denom[g]
            esum = 0.0
            for j in range(16):
                v = x2d[g, j]
                q = v / d if d > 0.0 else 0.0
                a2 = abs(q) * 2.0
                if a2 > 12.0:
                    a2 = 12.0
                if a2 < 4.0:
                    lo = np.floor(a2)
                elif a2 < 8.0:
                    lo = 2.0 * np.floor(a2 * 0.5)
                else:
                    lo = 4.0 * np.floor(a2 * 0.25)
                step = 1.0 if lo < 4.0 else (2.0 if lo < 8.0 else 4.0)
                r = lo + step if u2d[g, j] < (a2 - lo) / step else lo
                c = LUT_DBL_TO_CODE[int(r)]
                if np.signbit(q):
                    c |= np.uint8(8)
                codes[g, j] = c
                if want_err:
                    deq = -r * 0.5 if np.signbit(q) else r * 0.5
                    deq = deq * d if d > 0.0 else 0.0
                    esum += (deq - v) * (deq - v)
            if want_err:
                err[g] = esum

    @njit(cache=True)
    def _nb_dequant(codes2d, denom, out):  # pragma: no cover
        for g in range(denom.shape[0]):
            d = denom[g]
            for j in range(16):
                out[g, j] = _FP4_TABLE[codes2d[g, j]] * d

    @njit(cache=True)
    def _nb_adam(param, grad, m, v, scale_m, scale_v, lr, b1, b2, eps):  # pragma: no cover
        n = param.shape[0]
        for i in range(n):
            g = grad[i]
            m[i] = b1 * m[i] + (1.0 - b1) * g
            v[i] = b2 * v[i] + (1.0 - b2) * g * g
            param[i] -= lr * (m[i] * scale_m) / (np.sqrt(v[i] * scale_v) + eps)

    @njit(cache=True)
    def _nb_fwht(y2d):  # pragma: no cover
        m, n = y2d.shape
        for i in range(m):
            h = 1
            while h < n:
                for start in range(0, n, 2 * h):
                    for j in range(start, start + h):
                        a = y2d[i, j]
                        b = y2d[i, j + h]
                        y2d[i, j] = a + b
                        y2d[i, j + h] = a - b
                h *= 2


# --- dispatchers -------------------------------------------------------


def rtn_codes(x, denom, want_err=False, force_numpy=False):
    """RTN element codes and, optionally, per-group squared error.

    ``x`` has groups along the last axis; ``denom`` is the per-group
    scale (group scale times tensor scale), flattened.
    """
    x2d = np.ascontiguousarray(x, dtype=np.float64).reshape(-1, 16)
    denom = np.ascontiguousarray(denom, dtype=np.float64).reshape(-1)
    if HAVE_NUMBA and not force_numpy:
        codes = np.empty(x2d.shape, dtype=np.uint8)
        err = np.empty(denom.shape[0]) if want_err else np.empty(0)
        _nb_rtn(x2d, denom, want_err, codes, err)
        return codes.reshape(np.shape(x)), (err if want_err else None)
    codes, err = _np_rtn(x2d, denom, want_err)
    return codes.reshape(np.shape(x)), err


def sr_codes(x, denom, u, want_err=False, force_numpy=False):
    """SR element codes and, optionally, per-group squared error."""
    x2d = np.ascontiguousarray(x, dtype=np.float64).reshape(-1, 16)
    u2d = np.ascontiguousarray(u, dtype=np.float64).reshape(-1, 16)
    denom = np.ascontiguousarray(denom, dtype=np.float64).reshape(-1)
    if HAVE_NUMBA and not force_numpy:
        codes = np.empty(x2d.shape, dtype=np.uint8)
        err = np.empty(denom.shape[0]) if want_err else np.empty(0)
        _nb_sr(x2d, denom, u2d, want_err, codes, err)
        return codes.reshape(np.shape(x)), (err if want_err else None)
    codes, err = _np_sr(x2d, denom, u2d, want_err)
    return codes.reshape(np.shape(x)), err


def dequant_elements(codes, denom, force_numpy=False):
    """Dequantized values from codes and flattened per-group scales."""
    codes2d = np.ascontiguousarray(codes).reshape(-1, 16)
    denom = np.ascontiguousarray(denom, dtype=np.float64).reshape(-1)
    if HAVE_NUMBA and not force_numpy:
        out = np.empty(codes2d.shape)
        _nb_dequant(codes2d, denom, out)
        return out.reshape(np.shape(codes))
    return _np_dequant(codes2d, denom).reshape(np.shape(codes))


def fwht_inplace(y2d, force_numpy=False):
    """In-place unnormalized Walsh-Hadamard transform on each row."""
    if HAVE_NUMBA and not force_numpy:
        _nb_fwht(y2d)
    else:
        _np_fwht(y2d)


def adam_step(param, grad, m, v, t, lr, b1=0.9, b2=0.999, eps=1e-8):
    """One fused Adam update; mutates param, m and v in place.

    Returns the incremented step counter.  Bias correction is folded into
    two scalar factors so the loop stays single-pass.
    """
    t += 1
    scale_m = 1.0 / (1.0 - b1**t)
    scale_v = 1.0 / (1.0 - b2**t)
    if HAVE_NUMBA:
        _nb_adam(
            param.reshape(-1), np.ascontiguousarray(grad, dtype=np.float64).reshape(-1),
            m.reshape(-1), v.reshape(-1), scale_m, scale_v, lr, b1, b2, eps,
        )
        return t
    m *= b1
    m += (1.0 - b1) * grad
    v *= b2
    v += (1.0 - b2) * grad * grad
    param -= lr * (m * scale_m) / (np.sqrt(v * scale_v) + eps)
    return t
