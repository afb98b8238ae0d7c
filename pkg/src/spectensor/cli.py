"""Command-line interface.

Subcommands::

    gen          synthesize a noisy low-rank tensor instance (.t4)
    gen-samples  draw dictionary-model samples (.smp)
    decompose    recover components from a .t4 tensor -> JSON report
    dictlearn    learn an orthonormal dictionary from .smp samples -> JSON
    bench        run a TOML-configured experiment grid -> CSV + JSON + PNG
    spectrum     dump the square-unfolding eigenvalues to help choose eps
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from .decompose import RecoveryParams, full_decompose
from .dictlearn import (
    NiceDistSpec,
    learn_dictionary,
    read_smp,
    sample_nice,
    write_smp,
)
from .harness import NOISE_KINDS, NoiseModel, gen_instance, haar_orthonormal, run_experiment
from .tensor import PLAN_SQUARE, read_t4, reshape, write_t4


def _cmd_gen(args):
    t, truth = gen_instance(args.d, args.n, NoiseModel(args.noise, args.eps), args.seed)
    write_t4(args.out, t)
    if args.truth:
        with open(args.truth, "w") as fh:
            json.dump(
                {"components": [list(map(float, v)) for v in truth.vectors]},
                fh,
                indent=2,
                sort_keys=True,
            )
    print(f"wrote {args.out} (d={args.d}, n={args.n}, noise={args.noise}, eps={args.eps})")


def _cmd_gen_samples(args):
    rng = np.random.default_rng(args.seed)
    a = haar_orthonormal(rng, args.d, args.n)
    spec = NiceDistSpec(n=args.n, p=args.p, tau=args.tau)
    x = sample_nice(spec, rng, size=args.m)
    y = x @ a
    write_smp(args.out, y)
    if args.truth:
        with open(args.truth, "w") as fh:
            json.dump(
                {
                    "columns": [list(map(float, v)) for v in a],
                    "p": args.p,
                    "tau": spec.pairwise_cap,
                },
                fh,
                indent=2,
                sort_keys=True,
            )
    print(f"wrote {args.out} ({args.m} samples, d={args.d}, n={args.n}, p={args.p})")


def _cmd_decompose(args):
    t = read_t4(args.input)
    params = RecoveryParams(
        eps=args.eps,
        dedup_corr=args.dedup_corr,
        trials_per_round=args.trials,
        trials_cap=args.max_trials,
        max_rounds=args.max_rounds,
        rng_seed=args.seed,
    )
    report = full_decompose(t, params)
    with open(args.out, "w") as fh:
        fh.write(report.to_json())
    print(
        f"recovered {len(report.components)} components in {report.rounds} rounds "
        f"({report.trials_used} contractions) -> {args.out}"
    )
    for w in report.warnings:
        print(f"warning: {w}", file=sys.stderr)


def _cmd_dictlearn(args):
    samples = read_smp(args.samples)
    params = None
    if args.eps is not None:
        params = RecoveryParams(eps=args.eps, rng_seed=args.seed)
    else:
        params = RecoveryParams(
            eps=min(max(3.0 * (args.alpha if args.alpha is not None else args.tau), 1e-3), 0.25),
            rng_seed=args.seed,
        )
    report = learn_dictionary(
        samples,
        tau=args.tau,
        params=params,
        whiten_first=args.whiten,
        alpha=args.alpha,
        scale=args.scale,
    )
    with open(args.out, "w") as fh:
        fh.write(report.to_json())
    print(f"learned {len(report.components)} dictionary columns -> {args.out}")
    for w in report.warnings + report.decomposition.warnings:
        print(f"warning: {w}", file=sys.stderr)


def _cmd_bench(args):
    out = run_experiment(args.config, out_dir=args.out_dir)
    print(f"wrote {out['csv']} ({len(out['rows'])} rows)")
    for p in out["figures"]:
        print(f"wrote {p}")


def _cmd_spectrum(args):
    t = read_t4(args.input)
    m = reshape(t, PLAN_SQUARE)
    lam = np.linalg.eigvalsh((m + m.T) / 2)[::-1]
    top = lam[: args.top]
    for i, v in enumerate(top, 1):
        print(f"{i:4d}  {v:+.12e}")
    if args.plot:
        from .plotting import render_spectrum

        render_spectrum(top, args.plot, eps=args.eps)
        print(f"wrote {args.plot}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="spectensor",
        description="Spectral decomposition of noisy orthogonal 4-tensors "
        "and orthonormal dictionary learning.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic tensor instance")
    p.add_argument("--d", type=int, required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--noise", choices=NOISE_KINDS, default="none")
    p.add_argument("--eps", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--truth", help="optional JSON path for the ground truth")
    p.set_defaults(func=_cmd_gen)

    p = sub.add_parser("gen-samples", help="generate dictionary-model samples")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--d", type=int, required=True)
    p.add_argument("--p", type=float, required=True)
    p.add_argument("--m", type=int, required=True)
    p.add_argument("--tau", type=float, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--truth", help="optional JSON path for the dictionary")
    p.set_defaults(func=_cmd_gen_samples)

    p = sub.add_parser("decompose", help="decompose a .t4 tensor")
    p.add_argument("--input", required=True)
    p.add_argument("--eps", type=float, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--trials", type=int, default=None, help="contractions per round")
    p.add_argument("--max-trials", type=int, default=4000)
    p.add_argument("--max-rounds", type=int, default=None)
    p.add_argument("--dedup-corr", type=float, default=None)
    p.set_defaults(func=_cmd_decompose)

    p = sub.add_parser("dictlearn", help="learn a dictionary from .smp samples")
    p.add_argument("--samples", required=True)
    p.add_argument("--tau", type=float, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--whiten", action="store_true")
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--scale", type=float, default=None)
    p.add_argument("--eps", type=float, default=None, help="decomposition eps override")
    p.set_defaults(func=_cmd_dictlearn)

    p = sub.add_parser("bench", help="run an experiment grid from a TOML config")
    p.add_argument("--config", required=True)
    p.add_argument("--out-dir", default=None)
    p.set_defaults(func=_cmd_bench)

    p = sub.add_parser("spectrum", help="eigenvalue dump of the square unfolding")
    p.add_argument("--input", required=True)
    p.add_argument("--top", type=int, default=32)
    p.add_argument("--eps", type=float, default=None, help="reference line for the plot")
    p.add_argument("--plot", default=None, help="optional PNG path")
    p.set_defaults(func=_cmd_spectrum)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    args.func(args)
    return 0


if __name__ == "__main__":
    sys.exit(main())
