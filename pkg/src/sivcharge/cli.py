"""Command-line entry point: ``sivcharge {run,replay,validate,list-profiles,ple}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, load_config
from .profiles import DEFAULT_PROFILE, list_profiles, load_profile
from .sequence import SequenceError

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_SIM, EXIT_ACCEPT = 0, 1, 2, 3, 4

log = logging.getLogger("sivcharge")


def _with_profile(cfg, profile):
    if profile is None:
        return cfg
    from .config import ExperimentConfig

    model = {k: v for k, v in cfg.model.items() if k != "params"}
    model["profile"] = profile
    d = cfg.to_dict()
    d["model"] = model
    return ExperimentConfig.from_dict(d)


def _cmd_run(args) -> int:
    from .runner import run_experiment

    code = EXIT_OK
    if args.config is None and not args.check:
        print("run: --config is required unless --check is given", file=sys.stderr)
        return EXIT_CONFIG
    if args.config is not None:
        try:
            cfg = _with_profile(load_config(args.config), args.profile)
        except (ConfigError, KeyError) as exc:
            print(exc, file=sys.stderr)
            return EXIT_CONFIG
        try:
            outcome = run_experiment(cfg, args.out, workers=args.workers, seed=args.seed)
        except (SequenceError, ValueError, OSError) as exc:
            print(f"simulation failed: {exc}", file=sys.stderr)
            return EXIT_SIM
        print(f"wrote {outcome.out_dir} ({len(outcome.manifest['runs'])} runs)")
        for f in outcome.failures:
            print(f"run {f['index']} {f['axes']} failed: {f['error']}", file=sys.stderr)
        if not outcome.ok:
            code = EXIT_SIM
    if args.check:
        from .acceptance import run_suite

        results = run_suite(quick=args.quick)
        for r in results:
            print(r.line())
        if not all(r.passed for r in results):
            return EXIT_ACCEPT
    return code


def _cmd_replay(args) -> int:
    from .runner import replay

    try:
        report = replay(args.manifest, args.out, workers=args.workers)
    except (OSError, KeyError, json.JSONDecodeError) as exc:
        print(f"cannot replay {args.manifest}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ConfigError as exc:
        print(exc, file=sys.stderr)
        return EXIT_CONFIG
    for line in report.lines():
        print(line)
    return EXIT_OK if report.identical else EXIT_FAIL


def _cmd_validate(args) -> int:
    status = EXIT_OK
    for path in args.configs:
        try:
            cfg = load_config(path)
        except ConfigError as exc:
            print(exc, file=sys.stderr)
            status = EXIT_CONFIG
            continue
        print(f"{path}: ok ({len(cfg.runs())} runs, protocol {cfg.protocol_name})")
    return status


def _cmd_list_profiles(args) -> int:
    for name, desc in list_profiles(args.profiles_file):
        print(f"{name}\t{desc}")
    return EXIT_OK


def _cmd_ple(args) -> int:
    from .analysis import fit_lorentzian
    from .photonics import DetectorParams, simulate_histogram, window_intensity
    from .runner import run_seed
    from .sequence import protocol_ple

    try:
        params = load_profile(args.profile or DEFAULT_PROFILE)
    except KeyError as exc:
        print(exc.args[0], file=sys.stderr)
        return EXIT_CONFIG
    if args.points < 7 or args.span <= 0:
        print("ple: need --points >= 7 and a positive --span", file=sys.stderr)
        return EXIT_CONFIG
    seed = 0 if args.seed is None else args.seed
    det = DetectorParams()
    rows = []
    for i, d in enumerate(np.linspace(-args.span / 2, args.span / 2, args.points)):
        seq = protocol_ple(detuning=float(d), resonant_power=args.power, voltage=args.voltage)
        h = simulate_histogram(seq, params, det, args.repetitions, run_seed(seed, i))
        rows.append((float(d), *window_intensity(h, *seq.window("scan"))))
    fit = fit_lorentzian(rows)
    s = args.power / params.p_sat
    report = {"power_uw": args.power, "saturation": s, "expected_fwhm_mhz": params.gamma_0 * np.sqrt(1 + s),
              "scan": [list(r) for r in rows], "fit": fit.to_dict()}
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    err = fit.errors["fwhm_mhz"] if fit.errors else float("nan")
    print(f"FWHM {fit.params['fwhm_mhz']:.1f} +/- {err:.1f} MHz (model {report['expected_fwhm_mhz']:.1f} MHz), "
          f"center {fit.params['x0_mhz']:.1f} MHz, converged={fit.converged}")
    return EXIT_OK if fit.converged else EXIT_SIM


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sivcharge", description=__doc__)
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="simulate and analyse an experiment config")
    r.add_argument("--config", type=Path)
    r.add_argument("--out", type=Path)
    r.add_argument("--seed", type=int, help="override the config's master seed")
    r.add_argument("--workers", type=int, default=1)
    r.add_argument("--profile", help="replace the config's model profile")
    r.add_argument("--check", action="store_true", help="also run the built-in acceptance suite")
    r.add_argument("--quick", action="store_true", help="acceptance suite with reduced statistics")
    r.set_defaults(func=_cmd_run)

    rp = sub.add_parser("replay", help="re-run a manifest and verify identical outputs")
    rp.add_argument("manifest", type=Path)
    rp.add_argument("--out", type=Path)
    rp.add_argument("--workers", type=int, default=1)
    rp.set_defaults(func=_cmd_replay)

    v = sub.add_parser("validate", help="parse and check config files")
    v.add_argument("configs", nargs="+", type=Path)
    v.set_defaults(func=_cmd_validate)

    lp = sub.add_parser("list-profiles", help="show named model profiles")
    lp.add_argument("--profiles-file", type=Path)
    lp.set_defaults(func=_cmd_list_profiles)

    pl = sub.add_parser("ple", help="detuning scan plus Lorentzian fit")
    pl.add_argument("--profile")
    pl.add_argument("--power", type=float, default=13.0, help="resonant power (uW)")
    pl.add_argument("--span", type=float, default=2400.0, help="full scan range (MHz)")
    pl.add_argument("--points", type=int, default=25)
    pl.add_argument("--repetitions", type=int, default=2000)
    pl.add_argument("--voltage", type=float, default=0.0)
    pl.add_argument("--seed", type=int)
    pl.add_argument("--out", type=Path, help="write the scan and fit as JSON")
    pl.set_defaults(func=_cmd_ple)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
