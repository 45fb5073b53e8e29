"""Command-line front end: ``chordqp analyze | solve | bench``.

stdout carries machine-readable JSON (or CSV for ``bench``); logs go to
stderr. Exit codes: 0 ok, 1 numerical failure, 2 usage or parse error,
3 oracle mismatch.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time

import numpy as np

from . import mpc_models as mm
from .coupled_qp import from_dict
from .errors import ChordQPError, InvalidProblem, InvalidTree, NumericalBreakdown
from .graph import (
    CliqueTree,
    EliminationOrdering,
    assign_terms,
    build_clique_tree,
    build_sparsity_graph,
    chordal_embedding,
    enumerate_cliques,
    is_chordal,
    merge_cliques,
)
from .ipm import IpmSettings, solve_ipm
from .mp_solver import solve_tree
from .oracles import active_set_enumeration, dense_kkt_solve
from .riccati_oracle import riccati_backward, riccati_rollout

log = logging.getLogger("chordqp")

EXIT_OK, EXIT_NUMERIC, EXIT_USAGE, EXIT_ORACLE = 0, 1, 2, 3
ORACLE_MAX_VARS = 2000
ORACLE_MAX_INEQ = 14


class UsageError(Exception):
    pass


# -- problem loading ---------------------------------------------------------------


def _read_json(path: str) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    except OSError as exc:
        raise UsageError(f"{path}: {exc.strerror}") from None


def _root_index(args, tree: CliqueTree) -> int | None:
    if args.root in (None, "backward"):
        return None
    if args.root == "forward":
        return tree.size - 1
    try:
        idx = int(args.root) - 1
    except ValueError:
        raise UsageError(f"--root must be backward, forward or a clique index, got {args.root!r}") from None
    if not 0 <= idx < tree.size:
        raise UsageError(f"--root {args.root} outside 1..{tree.size}")
    return idx


def _parse_merge(spec: str) -> list[list[int]]:
    try:
        return [[int(i) - 1 for i in grp.split(",") if i.strip()] for grp in spec.split(";") if grp.strip()]
    except ValueError:
        raise UsageError(f"--merge expects groups like '1,2;3,4', got {spec!r}") from None


def load_problem(args):
    """Returns ``(qp, tree, context)``; context keeps the formulation object."""
    data = _read_json(args.path)
    form = args.formulation
    ctx: dict = {"formulation": form}
    t0 = time.perf_counter()
    if form == "qp":
        qp = from_dict(data)
        g = build_sparsity_graph(qp)
        chordal, peo = is_chordal(g)
        ordering = EliminationOrdering(peo) if chordal else chordal_embedding(g)
        ctx["fill_edges"] = sorted(ordering.fill_edges)
        tree = build_clique_tree(enumerate_cliques(ordering, g))
        tree = assign_terms(qp, tree)
    elif form == "classical":
        m = mm.classical_from_dict(data)
        ctx["mpc"] = m
        if args.split and args.split > 1:
            qp, tree = mm.lower_parallel(m, args.split)
        else:
            qp, tree = mm.lower_classical(m, "forward" if args.root == "forward" else "backward")
    elif form == "lasso":
        m = mm.lasso_from_dict(data)
        ctx["mpc"] = m.base
        qp, tree = mm.lower_lasso(m, "forward" if args.root == "forward" else "backward", args.split or 1)
    elif form == "scenario":
        m = mm.scenario_from_dict(data)
        ctx["scenario"] = m
        qp, tree = mm.lower_scenario(m, args.split or 1)
    elif form == "distributed":
        m, N = mm.distributed_from_dict(data)
        qp, tree = mm.lower_distributed(m, N)
    else:  # argparse restricts the choices
        raise UsageError(f"unknown formulation {form}")
    ctx["embed_time"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    if args.root not in (None, "backward", "forward"):
        tree = tree.with_root(_root_index(args, tree))
    elif form == "qp" and args.root == "forward":
        tree = tree.with_root(tree.size - 1)
    if getattr(args, "merge", None):
        tree = merge_cliques(tree, _parse_merge(args.merge))
    ctx["tree_time"] = time.perf_counter() - t0
    return qp, tree, ctx


# -- commands ------------------------------------------------------------------------


def _labels(qp, c):
    return [qp.space.label(i) for i in c]


def cmd_analyze(args) -> int:
    qp, tree, ctx = load_problem(args)
    names = tree.names or tuple(f"C{i + 1}" for i in range(tree.size))
    report = {
        "n": qp.n,
        "terms": len(qp.terms),
        "n_cliques": tree.size,
        "cliques": [
            {"name": names[i], "variables": _labels(qp, c), "size": len(c),
             "parent": None if tree.parent[i] is None else names[tree.parent[i]],
             "terms": [k + 1 for k in tree.terms_of(i)]}
            for i, c in enumerate(tree.cliques)
        ],
        "tree_edges": [[names[i], names[j]] for i, j in tree.tree_edges],
        "separators": [
            {"edge": [names[i], names[j]], "variables": _labels(qp, s)}
            for (i, j), s in sorted(tree.separators.items())
        ],
        "root": names[tree.root],
        "dot": tree.to_dot(label=qp.space.label),
    }
    if "fill_edges" in ctx:
        report["fill_edges"] = [[qp.space.label(i), qp.space.label(j)] for i, j in ctx["fill_edges"]]
    json.dump(report, sys.stdout, indent=1)
    sys.stdout.write("\n")
    return EXIT_OK


def _trajectory(ctx, qp, z):
    mpc = ctx.get("mpc")
    if mpc is None:
        return None
    x, u = mm.trajectories(qp.space, z, mpc.N)
    return {"x": x.tolist(), "u": u.tolist()}


def cmd_solve(args) -> int:
    t_start = time.perf_counter()
    qp, tree, ctx = load_problem(args)
    report: dict = {"mode": args.mode, "formulation": args.formulation}
    timings = {"embed": ctx["embed_time"], "tree": ctx["tree_time"]}

    if args.mode == "riccati":
        if "mpc" not in ctx or args.formulation != "classical":
            raise UsageError("--mode riccati needs --formulation classical")
        if ctx["mpc"].has_inequalities:
            raise UsageError("--mode riccati rejects problems with inequality rows")
        t0 = time.perf_counter()
        tape = riccati_backward(ctx["mpc"])
        x, u, obj = riccati_rollout(tape)
        timings["riccati"] = time.perf_counter() - t0
        z = np.zeros(qp.n)
        blocks = qp.space.blocks
        for k in range(ctx["mpc"].N + 1):
            z[list(blocks[f"x{k}"])] = x[k]
            if k < ctx["mpc"].N:
                z[list(blocks[f"u{k}"])] = u[k]
        report.update(status="Optimal", objective=obj, iterations=1, warnings=tape.warnings)
    elif args.mode == "tree" and qp.n_ineq == 0:
        sol = solve_tree(qp, tree, args.parallel or False)
        z = sol.x_star
        timings["upward"] = sol.timings["upward"]
        timings["downward"] = sol.timings["downward"]
        report.update(
            status="Optimal", objective=sol.objective, iterations=1, warnings=sol.warnings,
            level_times={"upward": sol.timings["upward_levels"], "downward": sol.timings["downward_levels"]},
        )
    else:
        if args.mode == "tree":
            log.info("problem has inequality rows; using the interior-point method")
        settings = IpmSettings(
            tol_gap=args.tol, tol_feas=args.tol, max_iter=args.max_iter,
            predictor_corrector=args.sigma_fixed is None,
            sigma_fixed=args.sigma_fixed if args.sigma_fixed is not None else 0.1,
            parallel=args.parallel or False,
        )
        t0 = time.perf_counter()
        res = solve_ipm(qp, tree, settings)
        timings["ipm"] = time.perf_counter() - t0
        z = res.z
        for h in res.residual_history:
            log.info("iter %(iter)d gap %(mu_gap).3e pinf %(primal_inf).3e dinf %(dual_inf).3e", h)
        report.update(
            status=res.status, objective=qp.objective(z), iterations=res.iterations,
            max_direction_residual=max(res.direction_residuals, default=0.0),
        )
        report["mode"] = "ipm"

    report["x"] = z.tolist()
    report["labels"] = [qp.space.label(i) for i in range(qp.n)]
    traj = _trajectory(ctx, qp, z)
    if traj is not None:
        report["trajectory"] = traj
    if "scenario" in ctx:
        report["non_anticipativity_residual"] = mm.non_anticipativity_residual(ctx["scenario"], qp.space, z)

    code = EXIT_OK if report["status"] == "Optimal" else EXIT_NUMERIC
    if args.check_oracle:
        dev = _oracle_deviation(qp, z, tree)
        report["oracle_deviation"] = dev
        tol = 1e-6 if qp.n_ineq else 1e-8
        if dev is not None and dev > tol:
            log.error("oracle deviation %.3e exceeds %.1e", dev, tol)
            code = EXIT_ORACLE if code == EXIT_OK else code
    timings["total"] = time.perf_counter() - t_start
    report["timings"] = timings
    json.dump(report, sys.stdout, indent=1)
    sys.stdout.write("\n")
    return code


def _oracle_deviation(qp, z, tree) -> float | None:
    if qp.n > ORACLE_MAX_VARS:
        log.warning("dense oracle disabled above %d variables", ORACLE_MAX_VARS)
        return None
    if qp.n_ineq:
        if qp.n_ineq > ORACLE_MAX_INEQ:
            log.warning("active-set oracle disabled above %d inequality rows", ORACLE_MAX_INEQ)
            return None
        ref = active_set_enumeration(qp).z
    else:
        ref = dense_kkt_solve(qp).z
    return float(np.abs(z - ref).max() / (1.0 + np.abs(ref).max()))


def cmd_bench(args) -> int:
    sizes = [int(s) for s in args.sizes.split(",") if s]
    splits = [int(s) for s in args.split.split(",") if s]
    rng = np.random.default_rng(args.seed)
    from .generators import random_classical

    writer = csv.writer(sys.stdout, lineterminator="\n")
    writer.writerow(["N", "branches", "wall_time", "iterations", "max_dev_vs_serial"])
    for N in sizes:
        m = random_classical(rng, args.n, args.m, N)
        qp0, t0_ = mm.lower_classical(m)
        ref = None
        for P in sorted(set([1] + splits)):
            if P > N:
                continue
            qp, tree = (qp0, t0_) if P == 1 else mm.lower_parallel(m, P)
            best = np.inf
            for _ in range(args.repeat):
                t0 = time.perf_counter()
                sol = solve_tree(qp, tree, P if P > 1 and args.parallel else False)
                best = min(best, time.perf_counter() - t0)
            x, u = mm.trajectories(qp.space, sol.x_star, N)
            flat = np.concatenate([x.ravel(), u.ravel()])
            if ref is None:
                ref = flat
            dev = float(np.abs(flat - ref).max())
            writer.writerow([N, P, f"{best:.6e}", 1, f"{dev:.3e}"])
    return EXIT_OK


# -- argument parsing ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="chordqp", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("path", help="problem file (JSON)")
        sp.add_argument("--formulation", default="qp",
                        choices=["qp", "classical", "lasso", "scenario", "distributed"])
        sp.add_argument("--root", default=None, help="backward, forward or a 1-based clique index")
        sp.add_argument("--split", type=int, default=None, help="parallel-in-time branches")
        sp.add_argument("--merge", default=None, help="clique groups to merge, e.g. '1,2;3,4'")

    a = sub.add_parser("analyze", help="print cliques, separators and the clique tree")
    common(a)
    a.set_defaults(func=cmd_analyze)

    s = sub.add_parser("solve", help="solve a problem file")
    common(s)
    s.add_argument("--mode", default="tree", choices=["tree", "ipm", "riccati"])
    s.add_argument("--parallel", type=int, default=None, metavar="K", help="worker threads per tree level")
    s.add_argument("--tol", type=float, default=1e-8)
    s.add_argument("--max-iter", type=int, default=100)
    s.add_argument("--sigma-fixed", type=float, default=None,
                   help="fixed centring parameter instead of predictor-corrector")
    s.add_argument("--check-oracle", action="store_true", help="compare with a dense reference solve")
    s.set_defaults(func=cmd_solve)

    b = sub.add_parser("bench", help="time tree solves of random classical MPC problems")
    b.add_argument("--sizes", default="64,128,256")
    b.add_argument("--split", default="1", help="comma-separated branch counts")
    b.add_argument("--n", type=int, default=4, help="state dimension")
    b.add_argument("--m", type=int, default=2, help="input dimension")
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--repeat", type=int, default=3)
    b.add_argument("--parallel", action="store_true", help="run branch levels on a thread pool")
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_USAGE
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr,
    )
    try:
        return args.func(args)
    except UsageError as exc:
        log.error("%s", exc)
        return EXIT_USAGE
    except (InvalidProblem, InvalidTree) as exc:
        log.error("invalid problem: %s", exc)
        return EXIT_USAGE
    except NumericalBreakdown as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return EXIT_NUMERIC
    except ChordQPError as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
