"""Command line entry point: ``nsnudge <command> [options]``."""

from __future__ import annotations

import argparse
import logging
import sys

from . import config as cfgmod, runner
from .assimilation import ConfigError
from .observables import NetworkError


def _base(sub, name, help_text):
    p = sub.add_parser(name, help=help_text)
    p.add_argument("--config", help="run config or manifest.ini (defaults to the desk preset)")
    p.add_argument("--seed", type=int, help="noise seed (force seed for make-force)")
    p.add_argument("--out", required=name != "stats", help="new output directory")
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nsnudge", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    _base(sub, "make-force", "generate the random body force")
    p = _base(sub, "spinup", "integrate the free-running reference flow")
    p.add_argument("--from", dest="start", help="resume from a spinup checkpoint")
    for name, text in (("assimilate", "single nudging run"), ("ensemble", "ensemble of nudging runs"),
                       ("sweep", "ensembles over eps_list, or mu_sweep synchronisation")):
        p = _base(sub, name, text)
        p.add_argument("--members", type=int)
        p.add_argument("--mode", choices=["plain", "filtered"])
        if name == "sweep":
            p.add_argument("--over", choices=["eps", "mu"], default="eps")
    _base(sub, "certify", "type-I certificate and chi-square tail check")
    p = _base(sub, "stats", "window statistics of an existing ensemble/sweep run")
    p.add_argument("--in", dest="run_dir", required=True)
    p.add_argument("--window", type=float, nargs=2, metavar=("LO", "HI"))
    sub.add_parser("show-config", help="print the effective config").add_argument("--config")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = cfgmod.load(args.config) if args.config else cfgmod.defaults()
        if args.command == "show-config":
            sys.stdout.write(cfgmod.serialize(cfg))
            return 0
        seed = getattr(args, "seed", None)
        if args.command == "make-force":
            cfg = runner.seeded(cfg, force_seed=seed)
        else:
            cfg = runner.seeded(cfg, noise_seed=seed, members=getattr(args, "members", None),
                                mode=getattr(args, "mode", None))
        if args.command == "make-force":
            res = runner.cmd_make_force(cfg, args.out)
            print(f"wrote {res['path']} (|f| = {res['force_l2']:.6g})")
        elif args.command == "spinup":
            res = runner.cmd_spinup(cfg, args.out, args.start)
            print(f"spinup done; populated mode fraction {res['populated_fraction']:.4f}")
        elif args.command == "assimilate":
            res = runner.cmd_assimilate(cfg, args.out)
            s = res["series"]
            print(f"final ||U-u||^2 = {s.w_h1_sq[-1]:.6e}, clipped {int(s.clipped.sum())}, diverged {s.diverged}")
        elif args.command == "ensemble":
            res = runner.cmd_ensemble(cfg, args.out)
            print(f"ensemble of {res['stats'].member_count}: final mean {res['stats'].mean_sq_error[-1]:.6e}")
        elif args.command == "sweep":
            res = runner.cmd_sweep(cfg, args.out, args.over)
            if args.over == "eps":
                print(f"scaling slope {res['slope']:.4f}")
            else:
                for mu, mn, fin, rate, corr, div in res["rows"]:
                    print(f"mu={mu:g}: min ratio {mn:.3e}, decay rate {rate:.4g}, diverged {bool(div)}")
        elif args.command == "certify":
            res = runner.cmd_certify(cfg, args.out)
            print(res["report"])
            return 0 if res["ok"] else 1
        elif args.command == "stats":
            sys.stdout.write(runner.cmd_stats(args.run_dir, tuple(args.window) if args.window else None))
    except NetworkError as exc:
        print(f"network rejected: {exc}", file=sys.stderr)
        return 2
    except (cfgmod.ConfigFileError, ConfigError, runner.RunDirError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
