"""Command-line entry point ``rfmem``.

Subcommands either take flags (``constants``, ``spectrum``, ``generate``) or
a config file (``train``, ``collapse``, ``phase``, ``run``).  ``run`` also
accepts a ``manifest.json`` written by an earlier run.
"""

import argparse
import json
import logging
import sys

from . import __version__
from . import experiments as ex


def _add_output(p):
    p.add_argument("--out", default=None, help="output directory (overrides the config)")
    p.add_argument("--seed", type=int, default=None)


def build_parser():
    parser = argparse.ArgumentParser(prog="rfmem", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"rfmem {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    c = sub.add_parser("constants", help="print the scalar activation constants as JSON")
    c.add_argument("--activation", default="tanh")
    c.add_argument("--sigma-x2", type=float, default=1.0)
    c.add_argument("--t", type=float, default=0.01)
    c.add_argument("--order", type=int, default=0, help="quadrature order (0 = automatic)")

    s = sub.add_parser("spectrum", help="analytic density of U plus summary")
    s.add_argument("--psi-p", type=float, default=64.0)
    s.add_argument("--psi-n", type=float, default=8.0)
    s.add_argument("--t", type=float, default=0.01)
    s.add_argument("--activation", default="tanh")
    s.add_argument("--measure", default="1:1", help="'lam:w,...' or a file holding that text")
    s.add_argument("--grid", type=int, default=3000, help="number of grid points")
    s.add_argument("--eps-final", type=float, default=1e-4)
    s.add_argument("--empirical-d", type=int, default=0, help="also diagonalize a GEP matrix at this d")
    _add_output(s)

    g = sub.add_parser("generate", help="sample by reverse diffusion and measure memorization")
    g.add_argument("--provider", choices=("gmm", "empirical", "rf"), default="empirical")
    g.add_argument("--scheme", choices=("em", "ddim"), default="em")
    g.add_argument("--d", type=int, default=8)
    g.add_argument("--n-train", type=int, default=16)
    g.add_argument("--n-samples", type=int, default=1000)
    g.add_argument("--k", type=float, default=1.0 / 3.0)
    g.add_argument("--steps", type=int, default=1000)
    g.add_argument("--no-kl", action="store_true")
    _add_output(g)

    for name, help_ in (("train", "one training run"), ("collapse", "psi_n sweep with onset fit"),
                        ("phase", "(psi_n, psi_p) generalization-loss grid"), ("run", "any config or manifest")):
        p = sub.add_parser(name, help=help_)
        p.add_argument("config")
        _add_output(p)
    return parser


def _from_flags(args):
    seed = 0 if args.seed is None else args.seed
    out = args.out or "."
    if args.command == "spectrum":
        raw = {"psi_p": args.psi_p, "psi_n": args.psi_n, "t": args.t, "activation": args.activation,
               "measure": args.measure, "n_grid": args.grid, "eps_final": args.eps_final,
               "empirical_d": args.empirical_d}
    else:
        raw = {"provider": args.provider, "scheme": args.scheme, "d": args.d, "n_train": args.n_train,
               "n_samples": args.n_samples, "k": args.k, "steps": args.steps, "kl": not args.no_kl}
    return ex.resolve(args.command, {k: str(v) for k, v in raw.items()}, seed, out)


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "constants":
            cfg = ex.resolve("constants", {"activation": args.activation, "sigma_x2": str(args.sigma_x2),
                                           "t": str(args.t), "order": str(args.order)})
            files = ex.run_constants(cfg)
            print(json.dumps(files["constants.json"], indent=2, sort_keys=True))
            return ex.EXIT_OK
        if args.command in ("spectrum", "generate"):
            cfg = _from_flags(args)
        else:
            cfg = ex.load_config(args.config)
            if args.command != "run" and cfg.kind != args.command:
                raise ex.ConfigError(f"config kind is {cfg.kind!r}, expected {args.command!r}")
            if args.out is not None:
                cfg.output_dir = args.out
            if args.seed is not None:
                cfg.seed = args.seed
    except ex.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return ex.EXIT_CONFIG
    except ValueError as exc:
        print(f"invalid argument: {exc}", file=sys.stderr)
        return ex.EXIT_CONFIG
    status = ex.run(cfg)
    if status == ex.EXIT_OK:
        print(f"wrote results to {cfg.output_dir}")
    else:
        print(f"run failed (exit {status}); see {cfg.output_dir}/error.json", file=sys.stderr)
    return status


if __name__ == "__main__":
    sys.exit(main())
