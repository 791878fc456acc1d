"""Statistical harness: MSE bench, concentration protocol, gradient
checks, and a small quantization-aware training demo.

Every routine here is a pure function of its arguments; reruns with the
same seeds produce byte-identical reports.  Gaussian data comes from the
package PRNG through the Box-Muller transform (two counter-indexed
uniforms per normal), so the draws are reproducible across processes and
platforms and are pinned by golden tests.
"""

from __future__ import annotations

import json
import multiprocessing
import os
from dataclasses import dataclass, field

import numpy as np

from ._kernels import adam_step
from .linear_graph import (
    GradPair,
    LayerConfig,
    LinearTape,
    backward,
    baseline_config,
    forward,
)
from .ms_eden import ms_eden_quantize
from .quantizers import (
    dequantize,
    quantize_rtn_46,
    quantize_sr,
    quantize_sr_46,
    quantize_square_block,
)
from .rht import SeedPair, derive_stream, prng_uniform, rht_inverse

__all__ = [
    "TABLE_TARGETS_E3",
    "MseReport",
    "ConcentrationReport",
    "GradCheckReport",
    "TrainRun",
    "normal_samples",
    "mse_bench",
    "concentration",
    "fit_tail_slope",
    "grad_check",
    "train_demo",
]

# Reference quadratic error over N(0,1) per method, in units of 1e-3.
TABLE_TARGETS_E3 = {
    "rtn_1x16": 9.0,
    "rtn_1x16_46": 7.6,
    "rtn_16x16": 12.4,
    "rtn_16x16_46": 12.4,
    "sr_1x16": 23.5,
    "sr_1x16_46": 17.5,
    "ms_eden": 9.8,
}

MSE_VECTOR_LEN = 4096
MSE_MATRIX_SIDE = 256

# Fixed layer used by the concentration protocol and the gradient check.
CONC_IN, CONC_OUT, CONC_TOKENS = 256, 128, 128


def normal_samples(seed, stream, n: int) -> np.ndarray:
    """n standard-normal draws via Box-Muller over counter uniforms.

    Normal i consumes uniform indices 2i and 2i+1; u1 is shifted into
    (0, 1] so the logarithm is always finite.
    """
    idx = np.arange(n, dtype=np.uint64)
    u1 = prng_uniform(seed, stream, 2 * idx) + 2.0**-53
    u2 = prng_uniform(seed, stream, 2 * idx + 1)
    return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)


@dataclass
class MseReport:
    method: str
    group: str
    mse: float
    stderr: float
    n_samples: int
    seed: int

    @property
    def mse_e3(self) -> float:
        return self.mse * 1e3

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "group": self.group,
            "mse": self.mse,
            "mse_e3": self.mse_e3,
            "stderr": self.stderr,
            "n_samples": self.n_samples,
            "seed": self.seed,
            "target_e3": TABLE_TARGETS_E3.get(self.method),
        }


def _mse_quantizer(method, x, seed_rht, seed_sr, index):
    """Dequantized reconstruction of x under the named method."""
    if method == "rtn_1x16":
        return dequantize(quantize_rtn_46(x, caps=(6.0,)))
    if method == "rtn_1x16_46":
        return dequantize(quantize_rtn_46(x))
    if method == "rtn_16x16":
        return dequantize(quantize_square_block(x, use_46=False))
    if method == "rtn_16x16_46":
        return dequantize(quantize_square_block(x, use_46=True))
    if method == "sr_1x16":
        return dequantize(quantize_sr(x, seed_sr, stream=derive_stream(index)))
    if method == "sr_1x16_46":
        return dequantize(quantize_sr_46(x, seed_sr, stream=derive_stream(index)))
    if method == "ms_eden":
        seeds = SeedPair(
            derive_stream(seed_rht, index, 0), derive_stream(seed_sr, index, 1)
        )
        t = ms_eden_quantize(x, seeds, s=6.0, tensor_id=index)
        return rht_inverse(dequantize(t), seeds.rht, index)
    raise ValueError(f"unknown mse-bench method {method!r}")


def mse_bench(
    methods=None,
    n_samples: int = 1_000_000,
    seed: int = 0,
    seed_rht=None,
    seed_sr=None,
):
    """Quadratic error of each method over standard-normal data.

    1x16 methods quantize length-4096 vectors, square-block methods
    256x256 matrices; each vector is one independent tensor with its own
    scales and rounding streams.  The standard error is computed across
    per-tensor mean errors, which are independent.
    """
    if methods is None:
        methods = list(TABLE_TARGETS_E3)
    seed_rht = seed if seed_rht is None else seed_rht
    seed_sr = seed if seed_sr is None else seed_sr
    reports = []
    for method in methods:
        if method not in TABLE_TARGETS_E3:
            raise ValueError(f"unknown mse-bench method {method!r}")
        matrix = method.startswith("rtn_16x16")
        numel = MSE_MATRIX_SIDE**2 if matrix else MSE_VECTOR_LEN
        n_tensors = max(1, -(-n_samples // numel))
        data_stream = derive_stream("mse-data", 1 if matrix else 0)
        per_tensor = np.empty(n_tensors)
        for i in range(n_tensors):
            x = normal_samples(seed, derive_stream(data_stream, i), numel)
            if matrix:
                x = x.reshape(MSE_MATRIX_SIDE, MSE_MATRIX_SIDE)
            deq = _mse_quantizer(method, x, seed_rht, seed_sr, i)
            per_tensor[i] = np.mean((deq - x) ** 2)
        mse = float(per_tensor.mean())
        stderr = float(per_tensor.std(ddof=1) / np.sqrt(n_tensors)) if n_tensors > 1 else 0.0
        reports.append(
            MseReport(
                method=method,
                group="16x16" if matrix else "1x16",
                mse=mse,
                stderr=stderr,
                n_samples=n_tensors * numel,
                seed=seed,
            )
        )
    return reports


@dataclass
class ConcentrationReport:
    config: str
    b_values: list
    rel_errors: list
    slope: float
    tail_slope: float
    trials: int
    seed: int

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "b_values": self.b_values,
            "rel_errors": self.rel_errors,
            "slope": self.slope,
            "tail_slope": self.tail_slope,
            "trials": self.trials,
            "seed": self.seed,
        }


def fit_tail_slope(b_values, errors, b_min: int) -> float:
    """Least-squares slope of log2(error) against log2(B) for B >= b_min."""
    b = np.asarray(b_values, dtype=np.float64)
    e = np.asarray(errors, dtype=np.float64)
    keep = b >= b_min
    lb, le = np.log2(b[keep]), np.log2(e[keep])
    return float(np.polyfit(lb, le, 1)[0])


def _conc_layer(seed):
    """Frozen random layer, input batch and loss target for concentration."""
    w = normal_samples(seed, derive_stream("conc", 0), CONC_OUT * CONC_IN).reshape(
        CONC_OUT, CONC_IN
    ) / np.sqrt(CONC_IN)
    x = normal_samples(seed, derive_stream("conc", 1), CONC_TOKENS * CONC_IN).reshape(
        CONC_TOKENS, CONC_IN
    )
    t = normal_samples(seed, derive_stream("conc", 2), CONC_TOKENS * CONC_OUT).reshape(
        CONC_TOKENS, CONC_OUT
    )
    return x, w, t


def _resolve_config(cfg) -> tuple[str, LayerConfig]:
    if isinstance(cfg, LayerConfig):
        return "custom", cfg
    return cfg, baseline_config(cfg)


def concentration(
    cfg,
    b_max: int = 1024,
    trials: int = 2,
    seed: int = 0,
    seed_rht=None,
    seed_sr=None,
) -> ConcentrationReport:
    """Relative quadratic error of the B-averaged quantized backward.

    The reference gradient is the identity-scheme backward on the same
    tape (the quantity an unbiased backward estimates).  Unbiased schemes
    decay as 1/B; biased ones flatten at the squared-bias floor.
    """
    name, config = _resolve_config(cfg)
    seed_rht = seed if seed_rht is None else seed_rht
    seed_sr = seed if seed_sr is None else seed_sr
    x, w, t = _conc_layer(seed)
    y, tape = forward(x, w, config)
    e = y - t
    ref_tape = LinearTape(
        tape.qX,
        tape.qW,
        tape.x_shape,
        tape.w_shape,
        LayerConfig(config.forward_scheme, "identity"),
    )
    ref = backward(ref_tape, e, SeedPair(0, 0), accumulate="f64")
    norm = float((ref.dX**2).sum() + (ref.dW**2).sum())

    b_values = []
    b = 1
    while b <= b_max:
        b_values.append(b)
        b *= 2
    errs = np.zeros((trials, len(b_values)))
    for trial in range(trials):
        sx = np.zeros_like(ref.dX)
        sw = np.zeros_like(ref.dW)
        snap = 0
        for b in range(1, b_max + 1):
            seeds = SeedPair(
                derive_stream(seed_rht, trial, b, 0),
                derive_stream(seed_sr, trial, b, 1),
            )
            g = backward(tape, e, seeds)
            sx += g.dX
            sw += g.dW
            if snap < len(b_values) and b == b_values[snap]:
                dx = sx / b - ref.dX
                dw = sw / b - ref.dW
                errs[trial, snap] = ((dx**2).sum() + (dw**2).sum()) / norm
                snap += 1
    mean_errs = errs.mean(axis=0)
    return ConcentrationReport(
        config=name,
        b_values=b_values,
        rel_errors=[float(v) for v in mean_errs],
        slope=fit_tail_slope(b_values, mean_errs, b_min=16),
        tail_slope=fit_tail_slope(b_values, mean_errs, b_min=max(16, b_max // 8)),
        trials=trials,
        seed=seed,
    )


@dataclass
class GradCheckReport:
    max_rel_err: float
    n_probes: int
    step: float
    seed: int

    def to_dict(self) -> dict:
        return {
            "max_rel_err": self.max_rel_err,
            "n_probes": self.n_probes,
            "step": self.step,
            "seed": self.seed,
        }


def grad_check(
    cfg: LayerConfig | str = "identity",
    seed: int = 0,
    n_probes: int = 64,
    step: float = 1e-5,
) -> GradCheckReport:
    """Identity-scheme backward against central finite differences.

    The loss is the quadratic 0.5 * ||Y - T||^2; probes are spread over
    both X and W coordinates.  Runs entirely in double precision.
    """
    _, config = _resolve_config(cfg)
    if config.backward_scheme != "identity" or config.forward_scheme != "identity":
        raise ValueError("grad_check requires identity quantization schemes")
    x, w, t = _conc_layer(seed)

    def loss(xv, wv):
        y, _ = forward(xv, wv, config, accumulate="f64")
        return 0.5 * float(((y - t) ** 2).sum())

    y, tape = forward(x, w, config, accumulate="f64")
    g = backward(tape, y - t, SeedPair(0, 0), accumulate="f64")

    u = prng_uniform(seed, derive_stream("gradcheck"), np.arange(2 * n_probes, dtype=np.uint64))
    max_rel = 0.0
    for p in range(n_probes):
        for arr, grad, uu in ((x, g.dX, u[2 * p]), (w, g.dW, u[2 * p + 1])):
            flat = int(uu * arr.size)
            idx = np.unravel_index(flat, arr.shape)
            orig = arr[idx]
            arr[idx] = orig + step
            lp = loss(x, w)
            arr[idx] = orig - step
            lm = loss(x, w)
            arr[idx] = orig
            fd = (lp - lm) / (2 * step)
            denom = max(abs(fd), abs(grad[idx]), 1e-12)
            max_rel = max(max_rel, abs(fd - grad[idx]) / denom)
    return GradCheckReport(max_rel_err=max_rel, n_probes=2 * n_probes, step=step, seed=seed)


@dataclass
class TrainRun:
    config: str
    seed: int
    losses: np.ndarray = field(repr=False)

    @property
    def final_loss(self) -> float:
        tail = self.losses[-50:] if len(self.losses) >= 50 else self.losses
        return float(np.mean(tail))


def _relu(z):
    return np.maximum(z, 0.0)


def _adam_update(param, grad, state, lr):
    m, v, t = state
    t = adam_step(param, grad, m, v, t, lr)
    return m, v, t


def _train_single(cfg_name, si, steps, seed, tokens, dims, lr, optimizer) -> TrainRun:
    """One (config, seed) training run; pure function of its arguments."""
    config = baseline_config(cfg_name) if isinstance(cfg_name, str) else cfg_name
    label = cfg_name if isinstance(cfg_name, str) else "custom"
    d_in, d_hidden, d_out = dims

    def draw(tag, n, idx=0):
        return normal_samples(seed, derive_stream("demo", si, tag, idx), n)

    w1t = draw(0, d_hidden * d_in).reshape(d_hidden, d_in) / np.sqrt(d_in)
    w2t = draw(1, d_out * d_hidden).reshape(d_out, d_hidden) / np.sqrt(d_hidden)
    w1 = draw(2, d_hidden * d_in).reshape(d_hidden, d_in) / np.sqrt(d_in)
    w2 = draw(3, d_out * d_hidden).reshape(d_out, d_hidden) / np.sqrt(d_hidden)

    if optimizer == "adam":
        st1 = (np.zeros_like(w1), np.zeros_like(w1), 0)
        st2 = (np.zeros_like(w2), np.zeros_like(w2), 0)
    elif optimizer != "sgd":
        raise ValueError(f"unknown optimizer {optimizer!r}")

    losses = np.empty(steps)
    for it in range(steps):
        x = draw(4, tokens * d_in, it).reshape(tokens, d_in)
        target = _relu(x @ w1t.T) @ w2t.T

        h_pre, tape1 = forward(x, w1, config)
        h = _relu(h_pre)
        y, tape2 = forward(h, w2, config)
        diff = y - target
        losses[it] = float(np.mean(diff**2))
        e2 = 2.0 * diff / diff.size

        seeds2 = SeedPair(
            derive_stream(seed, si, it, 2, 0), derive_stream(seed, si, it, 2, 1)
        )
        g2 = backward(tape2, e2, seeds2)
        e1 = g2.dX * (h_pre > 0)
        seeds1 = SeedPair(
            derive_stream(seed, si, it, 1, 0), derive_stream(seed, si, it, 1, 1)
        )
        g1 = backward(tape1, e1, seeds1)

        if optimizer == "adam":
            st1 = _adam_update(w1, g1.dW, st1, lr)
            st2 = _adam_update(w2, g2.dW, st2, lr)
        else:
            w1 -= lr * g1.dW
            w2 -= lr * g2.dW
    return TrainRun(config=label, seed=si, losses=losses)


def train_demo(
    config_names=("identity", "quartet2", "tetrajet_v2", "nvidia"),
    steps: int = 2000,
    n_seeds: int = 5,
    seed: int = 0,
    tokens: int = 128,
    dims: tuple = (256, 512, 256),
    lr: float = 1e-3,
    optimizer: str = "adam",
    workers: int | None = None,
) -> list[TrainRun]:
    """Train a two-layer MLP on realizable synthetic regression targets.

    A frozen teacher with the same architecture generates targets; the
    student's linear layers run under each layer configuration.  Teacher,
    initialization and data stream are shared across configurations for a
    given seed index so runs are directly comparable.  Runs are
    independent and execute in a small process pool unless ``workers=1``.
    """
    jobs = [
        (cfg_name, si, steps, seed, tokens, dims, lr, optimizer)
        for cfg_name in config_names
        for si in range(n_seeds)
    ]
    if workers is None:
        workers = min(len(jobs), os.cpu_count() or 1)
    if workers > 1 and len(jobs) > 1:
        ctx = multiprocessing.get_context("fork")
        with ctx.Pool(workers) as pool:
            return pool.starmap(_train_single, jobs)
    return [_train_single(*job) for job in jobs]


def reports_to_json(obj) -> str:
    """Stable JSON rendering used by the CLI; identical across reruns."""

    def default(o):
        if hasattr(o, "to_dict"):
            return o.to_dict()
        if isinstance(o, np.ndarray):
            return o.tolist()
        if isinstance(o, (np.floating, np.integer)):
            return o.item()
        raise TypeError(f"not JSON-serializable: {type(o)}")

    return json.dumps(obj, default=default, indent=2, sort_keys=True) + "\n"
