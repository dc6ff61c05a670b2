"""Command-line entry points.

Subcommands: train, sweep, bounds, nngp, counterexample, verify, plot.
Exit codes: 0 success, 1 a check or assertion failed, 2 configuration error.
Flags shared by all subcommands: --config (flat JSON), --out, --seed,
--desk (short fits, widths capped at 4096), --threads.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace

import numpy as np

from . import bounds, data, harness, mfvi, net, nngp
from .errors import ConfigError, WideBnnError

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_CONFIG = 2


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="flat JSON config file")
    p.add_argument("--out", help="output directory")
    p.add_argument("--seed", type=int, help="base seed")
    p.add_argument("--desk", action="store_true",
                   help="apply the desk preset (5000 steps, widths <= 4096)")
    p.add_argument("--threads", type=int, help="worker processes for sweeps")


def _overlay(args, experiment: str, **defaults) -> harness.ExperimentConfig:
    raw: dict = dict(defaults)
    if args.config:
        with open(args.config) as fh:
            try:
                raw.update(json.load(fh))
            except json.JSONDecodeError as err:
                raise ConfigError(f"config is not valid JSON: {err}") from err
    raw["experiment"] = experiment
    if args.out:
        raw["output_dir"] = args.out
    if args.seed is not None:
        raw["base_seed"] = args.seed
    if args.threads is not None:
        raw["threads"] = args.threads
    for key in ("dataset", "activation", "depth", "widths"):
        val = getattr(args, key, None)
        if val is not None:
            raw[key] = val
    cfg = harness.config_from_dict(raw)
    if args.desk:
        cfg = harness.apply_desk_preset(cfg)
    return cfg


def _cmd_train(args) -> int:
    cfg = _overlay(args, "convergence", widths=[args.width or 256])
    ds = harness.load_dataset(cfg)
    arch = harness.build_arch(cfg, cfg.widths[0], ds.d_in)
    tc = replace(cfg.train, seed=harness.cell_seed(cfg.base_seed, cfg.widths[0], 0))
    q, hist = mfvi.train(arch, ds, mfvi.gaussian_likelihood(ds.noise_sigma2), tc)
    os.makedirs(cfg.output_dir, exist_ok=True)
    hist.to_csv(os.path.join(cfg.output_dir, "history.csv"))
    rng = harness.cell_rng(cfg.base_seed, cfg.widths[0], 0, 2)
    elbo, se = mfvi.elbo_estimate(q, arch, ds, mfvi.gaussian_likelihood(ds.noise_sigma2),
                                  256, rng)
    summary = {
        "dataset": ds.name,
        "width": cfg.widths[0],
        "final_kl": mfvi.kl_to_standard_normal(q),
        "final_elbo": elbo,
        "final_elbo_se": se,
    }
    with open(os.path.join(cfg.output_dir, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
    harness.write_metadata(cfg)
    print(f"trained width={cfg.widths[0]} on {ds.name}: "
          f"KL={summary['final_kl']:.4f} ELBO={elbo:.4f} (+/- {se:.4f})")
    return EXIT_OK


def _cmd_sweep(args) -> int:
    experiment = "convergence" if args.kind == "convergence" else "rmse_sweep"
    cfg = _overlay(args, experiment)
    if args.kind == "convergence":
        res = harness.run_convergence(cfg)
        dists = res.per_width_distances()
        ok = harness.trend_nonincreasing(dists)
        for w, d in zip(res.widths, dists):
            print(f"width {w:>6}: max distance {np.mean(d):.4g} "
                  f"(bound {res.bound_by_width[w]:.4g})")
        print(f"trend non-increasing: {ok}")
        print(f"wrote {res.csv_path}")
        return EXIT_OK if ok else EXIT_CHECK_FAILED
    res = harness.run_rmse_sweep(cfg)
    print(f"wrote {res.csv_path}")
    return EXIT_OK


def _cmd_bounds(args) -> int:
    cfg = _overlay(args, "bounds_table")
    inp = bounds.BoundInputs(M=args.width or 1024, L=cfg.depth, d_in=args.d_in,
                             x_norm=args.x_norm, kl=args.kl, even_part=args.even_part)
    reports = [bounds.mean_bound_deep(inp), bounds.second_moment_bound(inp),
               bounds.mean_diff_bound(inp, args.x_norm)]
    if cfg.depth == 1:
        reports.insert(0, bounds.mean_bound_1hl(inp))
    print(bounds.format_report_table(reports))
    ds = harness.load_dataset(cfg)
    print(f"kl cap (gaussian, closed form): "
          f"{bounds.kl_bound_gaussian(ds, cfg.depth, ds.noise_sigma2):.6g}")
    os.makedirs(cfg.output_dir, exist_ok=True)
    path = os.path.join(cfg.output_dir, "bounds.csv")
    bounds.reports_to_csv(reports, path)
    print(f"wrote {path}")
    return EXIT_OK


def _cmd_nngp(args) -> int:
    cfg = _overlay(args, "bounds_table")
    arch = harness.build_arch(cfg, cfg.widths[0], 1)
    X = cfg.grid[:, None]
    K = nngp.nngp_kernel(arch, X)
    os.makedirs(cfg.output_dir, exist_ok=True)
    path = os.path.join(cfg.output_dir, "kernel.csv")
    K.to_csv(path)
    print(f"kernel on {cfg.grid_points} grid points, layer {K.layer}; "
          f"diag range [{K.entries.diagonal().min():.4g}, {K.entries.diagonal().max():.4g}]")
    print(f"wrote {path}")
    return EXIT_OK


def _cmd_counterexample(args) -> int:
    cfg = _overlay(args, "counterexample", activation="relu",
                   widths=[256, 1024, 4096])
    report = harness.run_counterexample(cfg)
    for row in report.rows:
        print(f"width {row.width:>7}: gap {row.gap:.4f} (+/- {row.gap_se:.4f}) "
              f"elbo trained/spiked/prior+bias: "
              f"{row.elbo_trained:.1f} / {row.elbo_spiked:.1f} / {row.elbo_prior_optbias:.1f}")
    print(f"threshold {report.threshold:.4f} (ideal gap {report.ideal_gap:.4f}); "
          f"passed: {report.passed}")
    return EXIT_OK if report.passed else EXIT_CHECK_FAILED


def _cmd_verify(args) -> int:
    cfg = _overlay(args, "verify")
    report = harness.run_verify(cfg.base_seed)
    os.makedirs(cfg.output_dir, exist_ok=True)
    report.to_json(os.path.join(cfg.output_dir, "verify.json"))
    for check in report.checks:
        status = "pass" if check.passed else "FAIL"
        print(f"[{status}] {check.name} {check.details}")
    return EXIT_OK if report.passed else EXIT_CHECK_FAILED


def _cmd_plot(args) -> int:
    cfg = _overlay(args, "posterior_plot")
    res = harness.run_posterior_plot(cfg)
    print(f"wrote {res.csv_path} and {res.svg_path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="widebnn")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="fit one variational model")
    _add_common(p)
    p.add_argument("--dataset")
    p.add_argument("--width", type=int)
    p.add_argument("--activation")
    p.add_argument("--depth", type=int)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("sweep", help="width sweeps (convergence or rmse)")
    _add_common(p)
    p.add_argument("--kind", choices=("convergence", "rmse"), default="convergence")
    p.add_argument("--dataset")
    p.add_argument("--activation")
    p.add_argument("--depth", type=int)
    p.add_argument("--widths", type=int, nargs="+")
    p.set_defaults(func=_cmd_sweep)

    p = sub.add_parser("bounds", help="evaluate the closed-form bounds")
    _add_common(p)
    p.add_argument("--dataset")
    p.add_argument("--depth", type=int)
    p.add_argument("--width", type=int)
    p.add_argument("--d-in", dest="d_in", type=int, default=1)
    p.add_argument("--x-norm", dest="x_norm", type=float, default=1.0)
    p.add_argument("--kl", type=float, default=1.0)
    p.add_argument("--even-part", dest="even_part", type=float, default=0.0)
    p.set_defaults(func=_cmd_bounds)

    p = sub.add_parser("nngp", help="export the infinite-width kernel on a grid")
    _add_common(p)
    p.add_argument("--activation")
    p.add_argument("--depth", type=int)
    p.add_argument("--widths", type=int, nargs="+")
    p.set_defaults(func=_cmd_nngp)

    p = sub.add_parser("counterexample", help="train on the constructed dataset")
    _add_common(p)
    p.add_argument("--widths", type=int, nargs="+")
    p.add_argument("--activation")
    p.set_defaults(func=_cmd_counterexample)

    p = sub.add_parser("verify", help="run the self-check battery")
    _add_common(p)
    p.set_defaults(func=_cmd_verify)

    p = sub.add_parser("plot", help="posterior bands against the references")
    _add_common(p)
    p.add_argument("--dataset")
    p.add_argument("--activation")
    p.add_argument("--depth", type=int)
    p.add_argument("--widths", type=int, nargs="+")
    p.set_defaults(func=_cmd_plot)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except WideBnnError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CHECK_FAILED


if __name__ == "__main__":
    sys.exit(main())
