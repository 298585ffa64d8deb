"""Command-line driver for the oscillator/advection-diffusion experiments.

    mgrit-adjoint --mode piggyback --N 60000 --rho 2 --m 4 --levels 3 --tol 1e-9 \\
        --output history.csv

Exit status: 0 on success, 1 when a check fails, 2 for an invalid
configuration, 3 when an iteration does not converge.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
import time

import numpy as np

from .core import SolverConfig, TapedIteration, initial_guess, mgrit_iteration, solve
from .grid import TimeGridSpec
from .models.vdp_advdiff import ModelConfig, VanDerPolAdvectionDiffusion
from .oracles import FDSpec, finite_difference_gradient, sequential_adjoint, sequential_forward
from .parallel import partition
from .piggyback import gradient_report, piggyback_solve

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_BAD_CONFIG = 2
EXIT_NOT_CONVERGED = 3

MODES = ("sequential", "mgrit", "piggyback", "fd-check", "validate-table2")

# published reference gradients for this model, keyed by (N, rho)
REFERENCE_GRADIENTS = {
    (60000, 2.0): 0.230724810643109,
    (60000, 3.0): 0.223017099689057,
    (60000, 4.0): 0.196451436058937,
    (120000, 2.0): 0.232395575709547,
    (120000, 3.0): 0.225073911851428,
    (120000, 4.0): 0.198695760225926,
    (240000, 2.0): 0.234781281565824,
    (240000, 3.0): 0.228025754956746,
    (240000, 4.0): 0.204046297945359,
}

log = logging.getLogger("mgrit_adjoint")


class ConfigError(ValueError):
    pass


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="mgrit-adjoint",
        description="MGRIT solves and adjoint gradients for the oscillator/advection-diffusion model.",
    )
    p.add_argument("--mode", choices=MODES, required=True)
    p.add_argument("--N", type=int, default=60000, help="number of time steps")
    p.add_argument("--T", type=float, default=30.0, help="final time")
    p.add_argument("--m", type=int, default=4, help="coarsening factor")
    p.add_argument("--levels", type=int, default=3, help="maximum number of time levels")
    p.add_argument("--min-coarse", type=int, default=2, help="minimum points on a coarse level")
    p.add_argument("--relax", choices=("F", "FCF"), default="FCF")
    p.add_argument("--tol", type=float, default=1e-9)
    p.add_argument("--max-iter", type=int, default=30)
    p.add_argument(
        "--rho", type=float, action="append", help="design value (repeat for several runs)"
    )
    p.add_argument(
        "--workers",
        type=int,
        default=int(os.environ.get("MGRIT_WORKERS", "1")),
        help="number of time-slab workers (default: $MGRIT_WORKERS or 1)",
    )
    p.add_argument("--eps", type=float, default=1e-6, help="finite-difference step")
    p.add_argument("--fd-scheme", choices=("forward", "central"), default="forward")
    p.add_argument("--norm", choices=("l2", "dx"), default="l2")
    p.add_argument("--upwind-order", type=int, choices=(1, 2), default=2)
    p.add_argument("--eps-step", type=float, default=1e-12, help="functional iteration tolerance")
    p.add_argument("--seed", type=int, default=0, help="random seed for fd-check")
    p.add_argument("--output", help="CSV file to write")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def make_setup(args):
    """Validate everything up front and build the model, grid and solver config."""
    if args.N < 1:
        raise ConfigError("--N must be at least 1")
    if args.T <= 0:
        raise ConfigError("--T must be positive")
    if args.eps <= 0:
        raise ConfigError("--eps must be positive")
    if args.max_iter < 0:
        raise ConfigError("--max-iter must be >= 0")
    try:
        model = ModelConfig(
            T=args.T,
            N=args.N,
            eps_step=args.eps_step,
            norm=args.norm,
            upwind_order=args.upwind_order,
        )
        config = SolverConfig(
            tol=args.tol,
            max_iter=args.max_iter,
            max_levels=args.levels,
            coarsening=args.m,
            min_coarse_points=args.min_coarse,
            relaxation=args.relax,
            workers=args.workers,
        )
        grid = TimeGridSpec.uniform(args.T, args.N)
        config.hierarchy(grid)
        partition(grid.n_points, args.workers)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    rhos = args.rho if args.rho else [2.0]
    return VanDerPolAdvectionDiffusion(model), grid, config, rhos


def write_csv(path, header, rows) -> None:
    if not path:
        return
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([v if isinstance(v, (int, str)) else f"{v:.15g}" for v in row])


# -- modes -----------------------------------------------------------------------


def run_sequential(args, app, grid, config, rhos):
    rows = []
    for rho in rhos:
        traj, J = sequential_forward(app, grid, [rho])
        grad = sequential_adjoint(app, grid, [rho], trajectory=traj)
        print(f"rho={rho:g}  J={J:.15g}  gradient={grad[0]:.15g}")
        rows.append((grid.n_steps, rho, J, grad[0]))
    write_csv(args.output, ("N", "rho", "J", "gradient"), rows)
    return EXIT_OK


def run_mgrit(args, app, grid, config, rhos):
    status = EXIT_OK
    rows = []
    for rho in rhos:
        res = solve(app, grid, [rho], config)
        print(
            f"rho={rho:g}  J={res.J:.15g}  iterations={res.iterations}  "
            f"converged={res.converged}"
        )
        rows.extend((rho, k + 1, r) for k, r in enumerate(res.residual_history))
        if not res.converged and config.max_iter > 0:
            status = EXIT_NOT_CONVERGED
    write_csv(args.output, ("rho", "iter", "residual"), rows)
    return status


def run_piggyback(args, app, grid, config, rhos):
    status = EXIT_OK
    rows = []
    for rho in rhos:
        state = piggyback_solve(app, grid, [rho], config)
        rep = gradient_report(state, [rho])
        print(
            f"rho={rho:g}  J={rep['J']:.15g}  gradient={rep['gradient'][0]:.15g}  "
            f"iterations={rep['iterations']}  converged={rep['converged']}"
        )
        for k, (ru, rb) in enumerate(zip(state.primal_history, state.adjoint_history)):
            rows.append((k + 1, ru, rb) if len(rhos) == 1 else (rho, k + 1, ru, rb))
        if not state.converged and config.max_iter > 0:
            status = EXIT_NOT_CONVERGED
    header = ("iter", "primal_residual", "adjoint_residual")
    write_csv(args.output, header if len(rhos) == 1 else ("rho",) + header, rows)
    return status


def run_validate(args, app, grid, config, rhos):
    status = EXIT_OK
    rows = []
    fd = FDSpec(args.eps, args.fd_scheme)
    for rho in rhos:
        state = piggyback_solve(app, grid, [rho], config)
        if not state.converged:
            status = EXIT_NOT_CONVERGED
        g_adj = float(state.grad[0])
        g_fd = finite_difference_gradient(app, grid, [rho], fd)
        rel = abs(g_adj - g_fd) / abs(g_fd)
        rows.append((grid.n_steps, rho, args.eps, g_fd, g_adj, rel))
        verdict = "PASS" if rel < 0.02 else "FAIL"
        print(
            f"N={grid.n_steps} rho={rho:g} eps={args.eps:g}  fd={g_fd:.15g}  "
            f"adjoint={g_adj:.15g}  rel_error={100 * rel:.3g}%  {verdict}"
        )
        if rel >= 0.02 and status == EXIT_OK:
            status = EXIT_CHECK_FAILED
        ref = REFERENCE_GRADIENTS.get((grid.n_steps, float(rho)))
        if ref is not None:
            off = abs(g_adj - ref) / abs(ref)
            note = "within 1%" if off < 1e-2 else "differs"
            print(f"    reference gradient {ref:.15g}: relative difference {off:.3g} ({note})")
    write_csv(
        args.output, ("N", "rho", "epsilon", "fd_gradient", "adjoint_gradient", "rel_error"), rows
    )
    return status


def _dot_test_step(app, dt, rho, rng, eps=1e-6):
    n = app.cfg.n + 2
    u = app.init(0.0) + 0.1 * rng.standard_normal(n)
    d = rng.standard_normal(n)
    bar = rng.standard_normal(n)
    design = np.array([rho])
    ahead = app.step(u + eps * d, 0, 1, dt, design)
    behind = app.step(u - eps * d, 0, 1, dt, design)
    lhs = float(bar @ (ahead - behind)) / (2 * eps)
    inc, _ = app.step_adjoint(u, 0, 1, dt, design, bar)
    rhs = float(d @ inc)
    return abs(lhs - rhs) / abs(lhs)


def _dot_test_iteration(rho, rng, eps=1e-6):
    # a short horizon keeps the space-time system tiny
    cfg = ModelConfig(T=0.1, N=16)
    app = VanDerPolAdvectionDiffusion(cfg)
    grid = TimeGridSpec.uniform(cfg.T, cfg.N)
    sconf = SolverConfig(max_levels=2, coarsening=4)
    h = sconf.hierarchy(grid)
    state = initial_guess(app, h)
    state.values[1:] = [v + 0.01 * rng.standard_normal(v.size) for v in state.values[1:]]
    design = np.array([rho])
    d = [None] + [rng.standard_normal(v.size) for v in state.values[1:]]
    seed = [None] + [rng.standard_normal(v.size) for v in state.values[1:]]

    def shifted(sign):
        s = state.copy()
        s.values[1:] = [v + sign * eps * dv for v, dv in zip(s.values[1:], d[1:])]
        out, _ = mgrit_iteration(app, h, s, design, sconf)
        return out.values

    plus, minus = shifted(1.0), shifted(-1.0)
    lhs = sum(float(b @ (p - m)) for b, p, m in zip(seed[1:], plus[1:], minus[1:])) / (2 * eps)
    bar, _ = TapedIteration(app, h, state, design, sconf).reverse(seed, bar_J=0.0)
    rhs = sum(float(dv @ b) for dv, b in zip(d[1:], bar[1:]))
    return abs(lhs - rhs) / abs(lhs)


def run_fd_check(args, app, grid, config, rhos):
    rng = np.random.default_rng(args.seed)
    failed = False

    def report(name, value, limit):
        nonlocal failed
        ok = value < limit
        failed |= not ok
        print(f"{'PASS' if ok else 'FAIL'}  {name}: {value:.3e} (limit {limit:g})")

    hierarchy = config.hierarchy(grid)
    for rho in rhos:
        for lv in hierarchy.levels:
            report(f"step dot-product, rho={rho:g}, dt={lv.dt:g}", _dot_test_step(app, lv.dt, rho, rng), 1e-7)
        report(f"iteration dot-product, rho={rho:g}", _dot_test_iteration(rho, rng), 1e-6)
        g_adj = sequential_adjoint(app, grid, [rho])[0]
        g_fd = finite_difference_gradient(app, grid, [rho], FDSpec(args.eps, args.fd_scheme))
        report(f"adjoint vs finite differences, rho={rho:g}", abs(g_adj - g_fd) / abs(g_fd), 0.02)
    return EXIT_CHECK_FAILED if failed else EXIT_OK


RUNNERS = {
    "sequential": run_sequential,
    "mgrit": run_mgrit,
    "piggyback": run_piggyback,
    "fd-check": run_fd_check,
    "validate-table2": run_validate,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        app, grid, config, rhos = make_setup(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BAD_CONFIG
    start = time.perf_counter()
    status = RUNNERS[args.mode](args, app, grid, config, rhos)
    print(f"wall time {time.perf_counter() - start:.2f} s", file=sys.stderr)
    return status


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
