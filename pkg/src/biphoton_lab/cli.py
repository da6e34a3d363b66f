"""Command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 pipeline error.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

from .config import ConfigError, ExperimentConfig, parse_config
from .experiments import (PRESETS, PipelineError, analyze_stack, default_config, run_alpha_scan,
                          run_preset, run_ratio_curve, scaled, simulate_to_file, fit_areas)
from .g2 import CorrelationError, _atomic_write
from .metrics import FitError, MetricError
from .optics import OpticsError
from .stackio import StackFormatError

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_PIPELINE = 0, 2, 3, 4

log = logging.getLogger("biphoton_lab")


def _global_flags(top: bool) -> argparse.ArgumentParser:
    # flags are accepted before and after the verb; the subcommand copies carry no
    # defaults so they never overwrite a value given before the verb
    d = (lambda v: v) if top else (lambda v: argparse.SUPPRESS)
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", type=Path, default=d(None), help="INI configuration file")
    p.add_argument("--seed", type=int, default=d(None), help="root RNG seed (overrides the config)")
    p.add_argument("--out", type=Path, default=d(Path("out")), help="output directory")
    p.add_argument("--threads", type=int, default=d(None), help="worker threads for simulation")
    p.add_argument("--paper-scale", action="store_true", default=d(False),
                   help="150x150 ROI and 10x frames per batch")
    p.add_argument("-v", "--verbose", action="store_true", default=d(False))
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _global_flags(False)
    ap = argparse.ArgumentParser(prog="biphoton-lab", parents=[_global_flags(True)],
                                 description="Photon-pair correlation simulator and analysis")
    sub = ap.add_subparsers(dest="verb", required=True)

    s = sub.add_parser("simulate", parents=[common], help="write a BPF1 frame stack")
    s.add_argument("--frames", type=int, default=4000)
    s.add_argument("--name", default="stack.bpf")

    a = sub.add_parser("analyze", parents=[common], help="correlation image of a stack")
    a.add_argument("stack", type=Path)
    a.add_argument("--window", type=int, default=32)
    a.add_argument("--interpolation", choices=("paper", "full-column", "off"), default="paper")
    a.add_argument("--center", type=int, nargs=2, default=(0, 0), metavar=("DX", "DY"))
    a.add_argument("--halfwidth", type=int, default=0,
                   help="peak window half-width in lags; 0 reads the single expected lag")
    a.add_argument("--batches", type=int, default=4)
    a.add_argument("--shuffle", type=int, metavar="SEED",
                   help="shuffled null estimator (diagnostic)")
    a.add_argument("--fit", action="store_true", help="also fit the peak variance")

    sub.add_parser("ratio-curve", parents=[common], help="xi(dx)/xi0 for the configured separations")
    sub.add_parser("calibrate-alpha", parents=[common], help="grating shift scan")
    f = sub.add_parser("fit-areas", parents=[common], help="entanglement and beam area fits")
    f.add_argument("--frames", type=int, default=4000)

    p = sub.add_parser("preset", parents=[common], help="run a figure preset")
    p.add_argument("id", choices=PRESETS)

    r = sub.add_parser("report", parents=[common], help="summarise a run directory")
    r.add_argument("run_dir", type=Path, nargs="?")
    return ap


def load_config(args) -> ExperimentConfig:
    if args.config is not None:
        try:
            text = args.config.read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read {args.config}: {exc}") from None
        cfg = parse_config(text)
        if cfg.defaulted:
            log.info("defaults used: %s", ", ".join(cfg.defaulted))
    else:
        cfg = default_config()
    if args.seed is not None:
        if not 0 <= args.seed < 2**64:
            raise ConfigError("--seed must be a 64-bit unsigned integer")
        cfg = cfg.with_seed(args.seed)
    if args.threads is not None:
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        cfg = dataclasses.replace(cfg, threads=args.threads)
    return scaled(cfg, args.paper_scale)


def _run(args) -> int:
    out: Path = args.out
    if args.verb == "report":
        return report(args.run_dir or out)
    if args.verb == "preset":
        base = load_config(args) if args.config else None
        seed = args.seed if args.seed is not None else (base.seed if base else 0)
        res = run_preset(args.id, seed, out, args.paper_scale, base)
        for name, path in sorted(res.artifacts.items()):
            print(f"{name}: {path}")
        print(f"manifest: {out / 'manifest.txt'}")
        return EXIT_OK

    cfg = load_config(args)
    out.mkdir(parents=True, exist_ok=True)
    if args.verb == "simulate":
        path = out / args.name
        tel = simulate_to_file(cfg, args.frames, path)
        print(f"wrote {path} ({args.frames} frames)")
        for k, v in tel.items():
            print(f"  {k}: {v}")
    elif args.verb == "analyze":
        img, xi = analyze_stack(args.stack, args.window, args.interpolation, tuple(args.center),
                                args.halfwidth, 1 if args.shuffle is not None else args.batches,
                                args.shuffle)
        stem = args.stack.stem + ("_shuffled" if args.shuffle is not None else "")
        img.to_csv(out / f"{stem}_correlation.csv")
        print(f"frames: {img.frames}")
        print(f"xi: {xi.mean!r} +- {xi.stderr!r}")
        if args.fit:
            from .metrics import fit_gaussian_variance
            fit = fit_gaussian_variance(img, cfg.optics, "correlation")
            _atomic_write(out / f"{stem}_fit.txt", fit.report())
            print(f"variance_mm2: {fit.variance!r}")
    elif args.verb == "ratio-curve":
        curve = run_ratio_curve(cfg)
        curve.write(out / "ratio_curve.csv")
        sys.stdout.write(curve.to_csv())
    elif args.verb == "calibrate-alpha":
        scan, best = run_alpha_scan(cfg)
        scan.write(out / "alpha_scan.csv")
        sys.stdout.write(scan.to_csv())
        print(f"alpha_star: {best!r}")
    elif args.verb == "fit-areas":
        corr, inten = fit_areas(cfg, args.frames)
        _atomic_write(out / "fit_correlation.txt", corr.report())
        _atomic_write(out / "fit_intensity.txt", inten.report())
        print(f"A_e_mm2: {corr.variance!r}")
        print(f"Sigma_mm2: {inten.variance!r}")
    return EXIT_OK


def report(run_dir: Path) -> int:
    manifest = run_dir / "manifest.txt"
    if not manifest.exists():
        raise FileNotFoundError(f"no manifest.txt in {run_dir}")
    for line in manifest.read_text().splitlines():
        if line.startswith("[config]"):
            break
        print(line)
    for csv in sorted(run_dir.glob("*.csv")):
        rows = csv.read_text().splitlines()
        print(f"\n{csv.name} ({len(rows) - 1} rows)")
        for row in rows[:12]:
            print("  " + row)
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return _run(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (StackFormatError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (PipelineError, MetricError, FitError, CorrelationError, OpticsError, ValueError) as exc:
        print(f"pipeline error: {exc}", file=sys.stderr)
        return EXIT_PIPELINE


if __name__ == "__main__":
    sys.exit(main())
