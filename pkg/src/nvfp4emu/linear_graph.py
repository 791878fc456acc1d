"""Quantized linear-layer computation graph.

Forward: Y = Qf(X) @ Qf(W).T with deterministic forward quantizers; the
quantized operands are saved on a tape.  Backward never sees the original
full-precision tensors: it dequantizes the tape, transposes, and
re-quantizes per the configured backward scheme, with both gradient GEMMs
quantized along their inner dimension

    dX = Q(E) @ Q(W.T).T        (inner = out features)
    dW = Q(E.T) @ Q(X.T).T      (inner = tokens)

Schemes: ``identity`` (no quantization), ``sr`` (stochastic rounding),
``sr_rht`` (stochastic rounding after a shared inner-dimension rotation
whenever both operands of a GEMM are quantized), ``sr_rht_46`` (the same
with per-group grid-ceiling selection; biased, kept as a negative
control) and ``ms_eden`` (rotation-corrected deterministic rounding,
which requires both operands of a quantized GEMM to be re-quantized).

Ablations a-e selectively disable quantization of individual GEMMs or
operands; ``reuse_forward_weights`` feeds the square-block forward weight
tensor straight into the dX GEMM, which then forgoes the rotation.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .ms_eden import ms_eden_estimate_pair
from .quantizers import (
    NVFP4Tensor,
    SquareBlockTensor,
    dequantize,
    quantize_rtn_46,
    quantize_sr,
    quantize_sr_46,
    quantize_square_block,
)
from .rht import CHUNK, SeedPair, derive_stream, rht_apply

__all__ = [
    "FORWARD_SCHEMES",
    "BACKWARD_SCHEMES",
    "ABLATIONS",
    "LayerConfig",
    "LinearTape",
    "GradPair",
    "baseline_config",
    "parse_config",
    "format_config",
    "gemm_emulated",
    "forward",
    "backward",
]

FORWARD_SCHEMES = ("rtn_1x16", "rtn_1x16_46", "rtn_16x16", "rtn_16x16_46", "identity")
BACKWARD_SCHEMES = ("identity", "sr", "sr_46", "sr_rht", "sr_rht_46", "ms_eden")
ABLATIONS = ("a", "b", "c", "d", "e", "full")

# Which operands each ablation quantizes: (E in dX GEMM, W in dX GEMM,
# E^T in dW GEMM, X^T in dW GEMM).
_ABLATION_MASK = {
    "a": (False, False, True, True),
    "b": (True, False, False, False),
    "c": (True, True, False, False),
    "d": (True, False, True, True),
    "e": (True, True, True, True),
    "full": (True, True, True, True),
}


@dataclass(frozen=True)
class LayerConfig:
    forward_scheme: str = "rtn_1x16_46"
    backward_scheme: str = "ms_eden"
    ablation: str = "full"
    reuse_forward_weights: bool = False

    def __post_init__(self):
        if self.forward_scheme not in FORWARD_SCHEMES:
            raise ValueError(f"unknown forward scheme {self.forward_scheme!r}")
        if self.backward_scheme not in BACKWARD_SCHEMES:
            raise ValueError(f"unknown backward scheme {self.backward_scheme!r}")
        if self.ablation not in ABLATIONS:
            raise ValueError(f"unknown ablation {self.ablation!r}")
        if self.backward_scheme == "ms_eden":
            if self.ablation in ("b", "d"):
                raise ValueError(
                    "ms_eden cannot quantize a single GEMM operand; "
                    f"ablation {self.ablation!r} is incompatible"
                )
            if self.reuse_forward_weights:
                raise ValueError("ms_eden requires weight re-quantization")
        if self.reuse_forward_weights and self.forward_scheme not in (
            "rtn_16x16",
            "rtn_16x16_46",
        ):
            raise ValueError("weight reuse requires a square-block forward scheme")


@dataclass
class LinearTape:
    """Quantized forward operands saved for the backward pass."""

    qX: np.ndarray | NVFP4Tensor
    qW: np.ndarray | NVFP4Tensor | SquareBlockTensor
    x_shape: tuple
    w_shape: tuple
    config: LayerConfig


@dataclass
class GradPair:
    dX: np.ndarray
    dW: np.ndarray


_BASELINES = {
    # Square-block weights, stochastic-rounding backward, quantized
    # weights reused for the input-gradient GEMM (so that GEMM is not
    # rotated).
    "nvidia": LayerConfig("rtn_16x16", "sr_rht", "full", reuse_forward_weights=True),
    # Native 1x16 forward scales, stochastic rounding with rotation on
    # both backward GEMMs, weights re-quantized.
    "tetrajet_v2": LayerConfig("rtn_1x16", "sr_rht", "full"),
    # The square-block recipe plus grid-ceiling selection on the forward.
    "four_over_six": LayerConfig(
        "rtn_16x16_46", "sr_rht", "full", reuse_forward_weights=True
    ),
    # Native forward scales with grid-ceiling selection; rotation-corrected
    # unbiased backward with full re-quantization.
    "quartet2": LayerConfig("rtn_1x16_46", "ms_eden", "full"),
    # Negative control: grid-ceiling selection inside the plain stochastic
    # backward; biased by construction, concentration curves plateau.
    "four_over_six_backward": LayerConfig(
        "rtn_16x16_46", "sr_46", "full", reuse_forward_weights=True
    ),
    "identity": LayerConfig("identity", "identity", "full"),
}


def baseline_config(name: str) -> LayerConfig:
    """Canonical layer configuration by recipe name."""
    try:
        return _BASELINES[name]
    except KeyError:
        raise ValueError(
            f"unknown baseline {name!r}; known: {sorted(_BASELINES)}"
        ) from None


def format_config(cfg: LayerConfig) -> str:
    return (
        f"forward_scheme = {cfg.forward_scheme}\n"
        f"backward_scheme = {cfg.backward_scheme}\n"
        f"ablation = {cfg.ablation}\n"
        f"reuse_forward_weights = {str(cfg.reuse_forward_weights).lower()}\n"
    )


def parse_config(text: str) -> LayerConfig:
    """Parse the key = value layer-config format emitted by format_config."""
    cfg = LayerConfig("identity", "identity")
    fields = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected key = value")
        key, val = (part.strip() for part in line.split("=", 1))
        if key == "reuse_forward_weights":
            if val not in ("true", "false"):
                raise ValueError(f"config line {lineno}: expected true/false")
            fields[key] = val == "true"
        elif key in ("forward_scheme", "backward_scheme", "ablation"):
            fields[key] = val
        else:
            raise ValueError(f"config line {lineno}: unknown key {key!r}")
    return replace(cfg, **fields)


def _deq(operand) -> np.ndarray:
    if isinstance(operand, (NVFP4Tensor, SquareBlockTensor)):
        return dequantize(operand)
    return np.asarray(operand, dtype=np.float64)


def gemm_emulated(qa, qb, accumulate: str = "f32") -> np.ndarray:
    """Emulated NVFP4 GEMM: dequantize, then a @ b.T at the stated precision.

    Operands may be quantized containers or plain arrays (identity path).
    """
    a = _deq(qa)
    b = _deq(qb)
    if a.shape[-1] != b.shape[-1]:
        raise ValueError(f"inner dimensions disagree: {a.shape} vs {b.shape}")
    if accumulate == "f32":
        return np.asarray(
            a.astype(np.float32) @ b.astype(np.float32).T, dtype=np.float64
        )
    if accumulate == "f64":
        return a @ b.T
    raise ValueError(f"unknown accumulate precision {accumulate!r}")


def _forward_quantize_activations(x, scheme):
    if scheme == "identity":
        return np.asarray(x, dtype=np.float64)
    use_46 = scheme.endswith("_46")
    return quantize_rtn_46(x, caps=(6.0, 4.0) if use_46 else (6.0,))


def _forward_quantize_weights(w, scheme):
    if scheme == "identity":
        return np.asarray(w, dtype=np.float64)
    use_46 = scheme.endswith("_46")
    if scheme.startswith("rtn_16x16"):
        return quantize_square_block(w, use_46=use_46)
    return quantize_rtn_46(w, caps=(6.0, 4.0) if use_46 else (6.0,))


def _check_dims(x, w, cfg):
    tokens, in_dim = x.shape
    out_dim, w_in = w.shape
    if w_in != in_dim:
        raise ValueError(f"X is {x.shape} but W is {w.shape}")
    rotated = cfg.backward_scheme in ("ms_eden", "sr_rht", "sr_rht_46")
    div = CHUNK if rotated else 16
    if cfg.forward_scheme != "identity" and in_dim % 16:
        raise ValueError("in dimension must be a multiple of 16")
    if cfg.backward_scheme != "identity":
        in_div = CHUNK if cfg.backward_scheme == "ms_eden" else 16
        if in_dim % in_div or out_dim % div or tokens % div:
            raise ValueError(
                f"dims (tokens={tokens}, in={in_dim}, out={out_dim}) are not "
                f"compatible with backward scheme {cfg.backward_scheme}; the "
                f"rotated inner dimensions must be multiples of {div}"
            )


def forward(x, w, cfg: LayerConfig, accumulate: str = "f32"):
    """Quantized forward pass; returns (Y, tape).

    X is (tokens, in), W is (out, in); both are quantized along the in
    dimension (the forward GEMM's inner axis).
    """
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    _check_dims(x, w, cfg)
    qx = _forward_quantize_activations(x, cfg.forward_scheme)
    qw = _forward_quantize_weights(w, cfg.forward_scheme)
    y = gemm_emulated(qx, qw, accumulate)
    tape = LinearTape(qX=qx, qW=qw, x_shape=x.shape, w_shape=w.shape, config=cfg)
    return y, tape


def _sr_pair(a, b, quant_a, quant_b, scheme, seeds, pair_id):
    """Quantize the operands of one backward GEMM under an SR scheme.

    The rotation is applied only when both operands are quantized, with a
    shared sign vector; rounding streams stay distinct per operand.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    rotate = scheme in ("sr_rht", "sr_rht_46") and quant_a and quant_b
    if rotate:
        a = rht_apply(a, seeds.rht, pair_id)
        b = rht_apply(b, seeds.rht, pair_id)
    quant = quantize_sr_46 if scheme in ("sr_rht_46", "sr_46") else quantize_sr
    qa = quant(a, seeds.sr, derive_stream(pair_id, 0)) if quant_a else a
    qb = quant(b, seeds.sr, derive_stream(pair_id, 1)) if quant_b else b
    return qa, qb


def backward(
    tape: LinearTape, e, seeds: SeedPair, accumulate: str = "f32"
) -> GradPair:
    """Backward pass from the saved quantized operands and the output grad.

    E is (tokens, out).  Both gradient GEMMs quantize along their inner
    dimension using distinct rotation streams; products are returned
    unrotated because shared-seed rotations cancel inside each GEMM.
    """
    cfg = tape.config
    e = np.asarray(e, dtype=np.float64)
    tokens, in_dim = tape.x_shape
    out_dim = tape.w_shape[0]
    if e.shape != (tokens, out_dim):
        raise ValueError(f"E has shape {e.shape}, expected {(tokens, out_dim)}")

    xd = _deq(tape.qX)
    wd = _deq(tape.qW)
    scheme = cfg.backward_scheme
    q_e, q_w, q_et, q_xt = _ABLATION_MASK[cfg.ablation]
    if scheme == "identity":
        q_e = q_w = q_et = q_xt = False

    pair_dx = derive_stream(1)
    pair_dw = derive_stream(2)

    # dX = Q(E) @ Q(W^T)^T, inner dimension = out features.
    wt = np.ascontiguousarray(wd.T)
    if scheme == "ms_eden" and q_e and q_w:
        qa, qb = ms_eden_estimate_pair(e, wt, seeds, pair_id=pair_dx)
        dx = gemm_emulated(qa, qb, accumulate)
    elif scheme in ("sr", "sr_46", "sr_rht", "sr_rht_46") and (q_e or q_w):
        if cfg.reuse_forward_weights and q_w:
            # The square-block weights go in as saved; no rotation is
            # possible, so only E is quantized, without rotation.
            quant = quantize_sr_46 if scheme in ("sr_rht_46", "sr_46") else quantize_sr
            qe = quant(e, seeds.sr, derive_stream(pair_dx, 0)) if q_e else e
            dx = gemm_emulated(qe, wt, accumulate)
        else:
            qa, qb = _sr_pair(e, wt, q_e, q_w, scheme, seeds, pair_dx)
            dx = gemm_emulated(qa, qb, accumulate)
    else:
        dx = gemm_emulated(e, wt, accumulate)

    # dW = Q(E^T) @ Q(X^T)^T, inner dimension = tokens.
    et = np.ascontiguousarray(e.T)
    xt = np.ascontiguousarray(xd.T)
    if scheme == "ms_eden" and q_et and q_xt:
        qa, qb = ms_eden_estimate_pair(et, xt, seeds, pair_id=pair_dw)
        dw = gemm_emulated(qa, qb, accumulate)
    elif scheme in ("sr", "sr_46", "sr_rht", "sr_rht_46") and (q_et or q_xt):
        qa, qb = _sr_pair(et, xt, q_et, q_xt, scheme, seeds, pair_dw)
        dw = gemm_emulated(qa, qb, accumulate)
    else:
        dw = gemm_emulated(et, xt, accumulate)

    return GradPair(dX=dx, dW=dw)
