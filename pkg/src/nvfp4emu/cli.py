"""Command-line interface.

Subcommands: mse-bench, concentration, grad-check, train-demo,
cost-model, formats.  Every report is a pure function of the flags;
--check turns acceptance thresholds into the exit code (0 pass, 2 fail).
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from .formats import E4M3_VALUES, FP4_VALUES
from .harness import (
    TABLE_TARGETS_E3,
    concentration,
    grad_check,
    mse_bench,
    reports_to_json,
    train_demo,
)
from .linear_graph import baseline_config, parse_config
from .posthoc import cost_model_table

MSE_REL_TOL = 0.05
SLOPE_BAND = (-1.15, -0.85)
PLATEAU_TAIL = -0.3


def _write(path, text):
    if path is None or path == "-":
        sys.stdout.write(text)
    else:
        with open(path, "w") as fh:
            fh.write(text)


def _resolve(name):
    if os.path.isfile(name):
        with open(name) as fh:
            return parse_config(fh.read())
    return baseline_config(name)


def _cmd_mse_bench(args):
    methods = args.methods.split(",") if args.methods else None
    reports = mse_bench(
        methods,
        n_samples=args.samples,
        seed=args.seed,
        seed_rht=args.seed_rht,
        seed_sr=args.seed_sr,
    )
    if args.format == "json":
        _write(args.out, reports_to_json([r.to_dict() for r in reports]))
    else:
        lines = ["method,group,mse,mse_e3,stderr,n_samples,seed,target_e3"]
        for r in reports:
            tgt = TABLE_TARGETS_E3.get(r.method)
            lines.append(
                f"{r.method},{r.group},{r.mse!r},{r.mse_e3!r},{r.stderr!r},"
                f"{r.n_samples},{r.seed},{tgt!r}"
            )
        _write(args.out, "\n".join(lines) + "\n")
    if not args.check:
        return 0
    ok = True
    for r in reports:
        target = TABLE_TARGETS_E3[r.method] * 1e-3
        rel = (r.mse - target) / target
        inside = abs(rel) <= MSE_REL_TOL
        se_ok = 4.0 * r.stderr <= MSE_REL_TOL * r.mse
        print(
            f"[{'PASS' if inside and se_ok else 'FAIL'}] {r.method}: "
            f"{r.mse_e3:.3f}e-3 vs {TABLE_TARGETS_E3[r.method]}e-3 "
            f"({rel * 100:+.2f}%, 4*SE/mse={4 * r.stderr / r.mse:.4f})"
        )
        ok &= inside and se_ok
    return 0 if ok else 2


def _cmd_concentration(args):
    rep = concentration(
        _resolve(args.config),
        b_max=args.b_max,
        trials=args.trials,
        seed=args.seed,
        seed_rht=args.seed_rht,
        seed_sr=args.seed_sr,
    )
    rep.config = args.config
    if args.format == "json":
        _write(args.out, reports_to_json(rep.to_dict()))
    else:
        lines = ["config,B,rel_sq_error"]
        for b, e in zip(rep.b_values, rep.rel_errors):
            lines.append(f"{rep.config},{b},{e!r}")
        lines.append(f"# slope={rep.slope!r} tail_slope={rep.tail_slope!r}")
        _write(args.out, "\n".join(lines) + "\n")
    if not args.check:
        return 0
    if args.plateau:
        ok = rep.tail_slope > PLATEAU_TAIL
        print(
            f"[{'PASS' if ok else 'FAIL'}] {args.config}: tail slope "
            f"{rep.tail_slope:+.3f} (plateau requires > {PLATEAU_TAIL})"
        )
    else:
        ok = SLOPE_BAND[0] <= rep.slope <= SLOPE_BAND[1]
        print(
            f"[{'PASS' if ok else 'FAIL'}] {args.config}: slope {rep.slope:+.3f} "
            f"(unbiased band {SLOPE_BAND})"
        )
    return 0 if ok else 2


def _cmd_grad_check(args):
    rep = grad_check(seed=args.seed)
    _write(args.out, reports_to_json(rep.to_dict()))
    if args.check:
        ok = rep.max_rel_err < 1e-4
        print(f"[{'PASS' if ok else 'FAIL'}] grad-check max rel err {rep.max_rel_err:.2e}")
        return 0 if ok else 2
    return 0


def _cmd_train_demo(args):
    names = args.configs.split(",")
    runs = train_demo(
        config_names=names,
        steps=args.steps,
        n_seeds=args.trials,
        seed=args.seed,
        optimizer=args.optimizer,
    )
    lines = ["config,seed,step,loss"]
    for run in runs:
        for step, loss in enumerate(run.losses):
            lines.append(f"{run.config},{run.seed},{step},{loss!r}")
    _write(args.out, "\n".join(lines) + "\n")
    summary = {}
    for name in names:
        finals = [r.final_loss for r in runs if r.config == name]
        summary[name] = {
            "mean_final_loss": float(np.mean(finals)),
            "stderr": float(np.std(finals, ddof=1) / np.sqrt(len(finals)))
            if len(finals) > 1
            else 0.0,
            "finals": finals,
        }
    sys.stderr.write(reports_to_json(summary))
    if args.check:
        finite = all(np.isfinite(r.losses).all() for r in runs)
        print(f"[{'PASS' if finite else 'FAIL'}] all runs finite")
        return 0 if finite else 2
    return 0


def _cmd_cost_model(args):
    table = cost_model_table()
    naive, post = table["naive"], table["posthoc"]
    if args.format == "json":
        payload = {
            name: {
                "gmem_to_sm_bits_per_elem": [
                    rep.kernel1.gmem_to_sm_bits_per_elem,
                    rep.kernel2.gmem_to_sm_bits_per_elem,
                ],
                "sm_to_gmem_bits_per_elem": [
                    rep.kernel1.sm_to_gmem_bits_per_elem,
                    rep.kernel2.sm_to_gmem_bits_per_elem,
                ],
                "mma_calls_per_group": [
                    rep.kernel1.mma_calls_per_group,
                    rep.kernel2.mma_calls_per_group,
                ],
                "total_bits_per_elem": rep.total_bits_per_elem,
            }
            for name, rep in (("naive", naive), ("posthoc", post))
        }
        payload["saving"] = table["saving"]
        _write(args.out, reports_to_json(payload))
    else:
        rows = [
            ("", "naive", "posthoc"),
            (
                "GMEM->SM bits/elem",
                f"{naive.kernel1.gmem_to_sm_bits_per_elem}+{naive.kernel2.gmem_to_sm_bits_per_elem}",
                f"{post.kernel1.gmem_to_sm_bits_per_elem}+{post.kernel2.gmem_to_sm_bits_per_elem}",
            ),
            (
                "SM->GMEM bits/elem",
                f"{naive.kernel1.sm_to_gmem_bits_per_elem}+{naive.kernel2.sm_to_gmem_bits_per_elem}",
                f"{post.kernel1.sm_to_gmem_bits_per_elem}+{post.kernel2.sm_to_gmem_bits_per_elem}",
            ),
            (
                "mma calls/group",
                str(naive.mma_total),
                str(post.mma_total),
            ),
            (
                "total bits/elem",
                str(naive.total_bits_per_elem),
                str(post.total_bits_per_elem),
            ),
            ("saving", "", f"{table['saving'] * 100:.1f}%"),
        ]
        width = max(len(r[0]) for r in rows) + 2
        text = "\n".join(f"{r[0]:<{width}}{r[1]:>12}{r[2]:>12}" for r in rows) + "\n"
        _write(args.out, text)
    return 0


def _cmd_formats(args):
    if args.action != "dump":
        raise SystemExit(f"unknown formats action {args.action!r}")
    lines = ["format,code,bits,value"]
    for code in range(16):
        lines.append(f"e2m1,{code},{code:04b},{float(FP4_VALUES[code])!r}")
    for code in range(256):
        lines.append(f"e4m3,{code},{code:08b},{float(E4M3_VALUES[code])!r}")
    _write(args.out, "\n".join(lines) + "\n")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nvfp4emu", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, fmt_default="csv"):
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--seed-rht", type=int, default=None, help="override rotation seed")
        sp.add_argument("--seed-sr", type=int, default=None, help="override rounding seed")
        sp.add_argument("--out", default=None, help="output path (default stdout)")
        sp.add_argument("--format", choices=("csv", "json"), default=fmt_default)
        sp.add_argument("--check", action="store_true", help="exit 2 if thresholds fail")

    sp = sub.add_parser("mse-bench", help="quadratic error of the quantizers on N(0,1)")
    common(sp)
    sp.add_argument("--samples", type=int, default=1_000_000)
    sp.add_argument("--methods", default=None, help="comma-separated subset")
    sp.set_defaults(func=_cmd_mse_bench)

    sp = sub.add_parser("concentration", help="1/B decay of averaged quantized backwards")
    common(sp)
    sp.add_argument("--config", default="quartet2", help="baseline name or config file")
    sp.add_argument("--b-max", type=int, default=1024)
    sp.add_argument("--trials", type=int, default=2)
    sp.add_argument("--plateau", action="store_true", help="check for a plateau instead")
    sp.set_defaults(func=_cmd_concentration)

    sp = sub.add_parser("grad-check", help="finite-difference oracle for the backward")
    common(sp, fmt_default="json")
    sp.set_defaults(func=_cmd_grad_check)

    sp = sub.add_parser("train-demo", help="small quantization-aware training demo")
    common(sp)
    sp.add_argument("--configs", default="identity,quartet2,tetrajet_v2,nvidia")
    sp.add_argument("--steps", type=int, default=2000)
    sp.add_argument("--trials", type=int, default=5, help="seeds per config")
    sp.add_argument("--optimizer", choices=("adam", "sgd"), default="adam")
    sp.set_defaults(func=_cmd_train_demo)

    sp = sub.add_parser("cost-model", help="bits moved per element for both pipelines")
    common(sp)
    sp.set_defaults(func=_cmd_cost_model)

    sp = sub.add_parser("formats", help="format tables")
    common(sp)
    sp.add_argument("action", choices=("dump",))
    sp.set_defaults(func=_cmd_formats)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
