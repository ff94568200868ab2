"""Command-line entry point: ``wdl {barycenter,train,reconstruct,gradcheck}``.

Every subcommand prints a tab-separated summary on stdout and writes its
files under ``--out``. Exit codes: 0 success, 1 invalid input or
parameters, 2 numerical instability, 3 gradient check failure.
"""

from __future__ import annotations

import argparse
import math
import sys
from pathlib import Path

import numpy as np

from . import io
from .core import CostSpec, Grid, InstabilityError, ValidationError, WDLError, build_kernel
from .gradcheck import MAX_N, VARIANTS, run_gradcheck
from .learn import reconstruct, train, train_best_of
from .losses import KINDS

EXIT_OK, EXIT_INVALID, EXIT_UNSTABLE, EXIT_CHECK = 0, 1, 2, 3
GRADCHECK_THRESHOLD = 1e-4


class GradcheckFailure(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def _float_or_inf(text: str) -> float:
    return math.inf if text.strip().lower() in ("inf", "infinity") else float(text)


def _add_solver_flags(p):
    p.add_argument("--config", help="key = value configuration file")
    p.add_argument("--gamma", type=float, help="entropic regularization strength")
    p.add_argument("--n-iters", dest="L", type=int, help="Sinkhorn iterations L")
    p.add_argument("--tau", type=float, help="extrapolation exponent (<= 0)")
    p.add_argument("--rho", type=_float_or_inf, help="KL relaxation strength ('inf' = balanced)")
    p.add_argument("--log-domain", dest="log_domain", action="store_true", default=None,
                   help="run the iterations on log-scalings (small gamma)")
    p.add_argument("--out", dest="output_dir", help="output directory (default: out)")
    p.add_argument("--plot", action="store_true", default=None, help="also write PNG figures")


def _add_data_flags(p):
    p.add_argument("--data", dest="data_path", help="CSV file or directory of PGM images")
    p.add_argument("--format", dest="data_format", choices=io.FORMATS, help="input layout")
    p.add_argument("--jitter", dest="jitter_epsilon", type=float,
                   help="mass added to every bin before normalizing")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="wdl", description="Wasserstein dictionary learning")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    b = sub.add_parser("barycenter", help="barycenters of the input histograms")
    _add_solver_flags(b)
    _add_data_flags(b)
    b.add_argument("--weights", help="comma-separated weights, one per input histogram")
    b.add_argument("--sweep", type=int, metavar="K",
                   help="three inputs: all weights (i, j, k) / K with i + j + k = K")

    t = sub.add_parser("train", help="learn atoms and weights")
    _add_solver_flags(t)
    _add_data_flags(t)
    t.add_argument("--loss", help=f"one of {KINDS}; 'wasserstein:<iters>' sets inner iterations")
    t.add_argument("--atoms", dest="S", type=int, help="number of atoms S")
    t.add_argument("--zeta", type=float, help="weight-gradient scale (default N / (100 M))")
    t.add_argument("--warm-start", dest="warm_start", action="store_true", default=None,
                   help="seed each evaluation with the previous final scalings")
    t.add_argument("--seed", type=int, help="initialization seed")
    t.add_argument("--deterministic", action="store_true", default=None,
                   help="fixed reduction order; runs are already sequential")
    t.add_argument("--max-outer-iters", dest="max_outer_iters", type=int,
                   help="accepted L-BFGS steps")
    t.add_argument("--restart-every", dest="restart_every", type=int,
                   help="clear the L-BFGS memory every k iterations (0: never)")
    t.add_argument("--lbfgs-memory", dest="lbfgs_memory", type=int, help="stored curvature pairs")
    t.add_argument("--init", choices=("uniform-atoms", "random-atoms"), help="atom initialization")
    t.add_argument("--restarts", type=int, default=1,
                   help="independent seeds (seed, seed+1, ...); the best objective is kept")

    r = sub.add_parser("reconstruct", help="barycenters of trained atoms")
    _add_solver_flags(r)
    r.add_argument("--dictionary", required=True, help="atoms.csv from a training run")
    r.add_argument("--codes", required=True, help="weights.csv from a training run")
    r.add_argument("--grid", help="image grid as HxW (default: 1-D)")

    g = sub.add_parser("gradcheck", help="finite-difference audit of the gradients")
    g.add_argument("--gamma", type=float, default=1.0)
    g.add_argument("--n-iters", dest="L", default="1,3,10",
                   help="comma-separated iteration counts")
    g.add_argument("--loss", default=",".join(KINDS), help="comma-separated losses")
    g.add_argument("--variants", default=",".join(VARIANTS))
    g.add_argument("--bins", type=int, default=8, help=f"grid length N (<= {MAX_N})")
    g.add_argument("--atoms", dest="S", type=int, default=2)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", dest="output_dir")
    g.add_argument("--corrupt-sign", action="store_true", help=argparse.SUPPRESS)
    return parser


_CONFIG_KEYS = set(io._TYPES)


def resolve_config(args) -> io.ExperimentConfig:
    cfg = io.ExperimentConfig()
    if getattr(args, "config", None):
        cfg = io.config_from_text(Path(args.config).read_text())
    given = {k: v for k, v in vars(args).items() if k in _CONFIG_KEYS and v is not None}
    return io.update_config(cfg, **given)


def _kernel(dims, gamma):
    return build_kernel(CostSpec(Grid(tuple(dims))), gamma)


def _emit(rows):
    for r in rows:
        print("\t".join(str(v) for v in r))


def _save_histograms(out: Path, stem: str, hists, dims):
    io.write_csv(out / f"{stem}.csv", hists)
    if len(dims) == 2:
        for i, h in enumerate(np.atleast_2d(hists)):
            io.write_pgm(out / f"{stem}_{i}.pgm", np.reshape(h, dims))


def simplex_lattice(k: int):
    return [(i, j, k - i - j) for i in range(k, -1, -1) for j in range(k - i + 1)]


def cmd_barycenter(args) -> int:
    cfg = resolve_config(args)
    if not cfg.data_path:
        raise ValidationError("--data is required")
    hists, dims = io.ingest(cfg.data_path, cfg.data_format, cfg.jitter_epsilon)
    out = io.ensure_dir(cfg.output_dir)
    tc = cfg.train
    kernel = _kernel(dims, tc.gamma)
    if args.sweep is not None:
        if hists.shape[0] != 3 or args.sweep < 1:
            raise ValidationError("--sweep needs exactly three inputs and K >= 1")
        lattice = simplex_lattice(args.sweep)
        weights = np.array(lattice, dtype=np.float64) / args.sweep
    elif args.weights:
        weights = np.array([[float(w) for w in args.weights.split(",")]])
    else:
        weights = np.full((1, hists.shape[0]), 1.0 / hists.shape[0])
    if weights.shape[1] != hists.shape[0]:
        raise ValidationError(f"got {weights.shape[1]} weights for {hists.shape[0]} inputs")
    if np.any(weights < 0) or not np.allclose(weights.sum(1), 1.0):
        raise ValidationError("weights must be nonnegative and sum to 1")
    P = reconstruct(hists, weights, kernel, tc)
    io.write_csv(out / "weights.csv", weights, prefix="w")
    if args.sweep is not None:
        sweep = io.ensure_dir(out / "sweep")
        for (i, j, k), h in zip(lattice, P):
            _save_histograms(sweep, f"bary_{i}_{j}_{k}", h, dims)
        if cfg.plot:
            from .plots import plot_sweep

            plot_sweep(P, lattice, dims, out / "sweep.png")
    else:
        _save_histograms(out, "barycenter", P, dims)
    _emit([("item", "mass", "argmax")] + [(i, repr(float(p.sum())), int(np.argmax(p)))
                                          for i, p in enumerate(P)])
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    if not cfg.data_path:
        raise ValidationError("--data is required")
    data, dims = io.ingest(cfg.data_path, cfg.data_format, cfg.jitter_epsilon)
    out = io.ensure_dir(cfg.output_dir)
    tc = cfg.train
    kernel = _kernel(dims, tc.gamma)
    if args.restarts < 1:
        raise ValidationError("--restarts must be >= 1")
    if args.restarts == 1:
        res = train(data, kernel, tc)
    else:
        res = train_best_of(data, kernel, tc, range(tc.seed, tc.seed + args.restarts))
    (out / "config.txt").write_text(io.config_to_text(cfg))
    io.write_csv(out / "atoms.csv", res.atoms)
    io.write_csv(out / "weights.csv", res.weights, prefix="w")
    io.write_csv(out / "recon.csv", res.reconstructions)
    io.write_table(out / "history.csv", ("outer_iter", "objective", "mean_recon_error", "seconds"),
                   [(h.outer_iter, h.objective, h.mean_recon_error, h.seconds)
                    for h in res.history])
    (out / "weights_scatter.svg").write_text(io.weights_scatter_svg(res.weights))
    if cfg.plot:
        from .plots import plot_atoms, plot_history, plot_reconstructions

        plot_atoms(res.atoms, dims, out / "atoms.png")
        plot_history(res.history, out / "history.png")
        plot_reconstructions(data, res.reconstructions, dims, out / "recon.png")
    err = np.sum((res.reconstructions - data) ** 2, axis=1)
    _emit([("objective", repr(res.objective)),
           ("outer_iters", res.history[-1].outer_iter),
           ("status", res.message),
           ("total_quadratic_error", repr(float(err.sum())))])
    return EXIT_OK


def cmd_reconstruct(args) -> int:
    cfg = resolve_config(args)
    atoms = io.read_csv_rows(args.dictionary)
    weights = io.read_csv_rows(args.codes)
    dims = (atoms.shape[1],)
    if args.grid:
        try:
            dims = tuple(int(v) for v in args.grid.lower().split("x"))
        except ValueError:
            raise ValidationError(f"bad --grid {args.grid!r}; expected HxW") from None
    kernel = _kernel(dims, cfg.train.gamma)
    P = reconstruct(atoms, weights, kernel, cfg.train)
    out = io.ensure_dir(cfg.output_dir)
    _save_histograms(out, "recon", P, dims)
    _emit([("item", "mass")] + [(i, repr(float(p.sum()))) for i, p in enumerate(P)])
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    try:
        n_iters = tuple(int(v) for v in args.L.split(","))
    except ValueError:
        raise ValidationError(f"bad --n-iters {args.L!r}") from None
    losses = tuple(v.strip() for v in args.loss.split(","))
    variants = tuple(v.strip() for v in args.variants.split(","))
    if args.bins > MAX_N:
        raise ValidationError(f"gradcheck is limited to N <= {MAX_N}")
    for v in variants:
        if v not in VARIANTS:
            raise ValidationError(f"unknown variant {v!r}; expected one of {VARIANTS}")
    results = run_gradcheck(gamma=args.gamma, n_iters=n_iters, n=args.bins, s=args.S,
                            losses=losses, variants=variants, seed=args.seed,
                            flip_sign=args.corrupt_sign)
    header = ("loss", "variant", "L", "err_atoms", "err_weights", "status")
    rows = [(r.loss, r.variant, r.n_iter, f"{r.err_atoms:.3e}", f"{r.err_weights:.3e}",
             "ok" if r.worst <= GRADCHECK_THRESHOLD else "FAIL") for r in results]
    _emit([header] + rows)
    if args.output_dir:
        out = io.ensure_dir(args.output_dir)
        io.write_table(out / "gradcheck.csv", header, rows)
    bad = [r for r in results if not r.worst <= GRADCHECK_THRESHOLD]
    if bad:
        worst = max(bad, key=lambda r: r.worst)
        raise GradcheckFailure(
            f"{len(bad)} case(s) above {GRADCHECK_THRESHOLD:g}; worst: loss={worst.loss} "
            f"variant={worst.variant} L={worst.n_iter} relative error {worst.worst:.3e}"
        )
    return EXIT_OK


COMMANDS = {
    "barycenter": cmd_barycenter,
    "train": cmd_train,
    "reconstruct": cmd_reconstruct,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except GradcheckFailure as exc:
        print(f"wdl: gradient check failed: {exc}", file=sys.stderr)
        return EXIT_CHECK
    except InstabilityError as exc:
        print(f"wdl: numerical instability: {exc}", file=sys.stderr)
        return EXIT_UNSTABLE
    except (WDLError, ValueError, OSError) as exc:
        print(f"wdl: error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
