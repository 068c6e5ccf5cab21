"""Batch command line: ``ringform {eig,submod,search,synth,sim} --config cfg.json``.

Each command writes plot-ready CSV files into ``--out``; every CSV gets a
``.meta.json`` sidecar with the effective config, the package version and
the wall time. Exit codes: 0 success, 2 invalid config, 3 numerical
failure, 4 simulation abort.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from importlib import metadata
from pathlib import Path

import numpy as np
from scipy.linalg import LinAlgError

from . import __version__
from .config import ConfigError, ExperimentConfig, load_config
from .model import (
    FormationSet,
    ModelError,
    OvmParams,
    build_acc_closed_loop,
    linearize,
    string_stability_index,
)
from .perf import SynthesisError, local_optimality_gap, synthesize
from .search import (
    SearchError,
    check_pair,
    classify,
    enumerate_orbits,
    j1_oracle,
    j2_oracle,
    optimal_formation,
    platoon_formation,
    submodularity_check,
    uniform_formation,
)
from .sim import SimulationAbort, build_scenario, metrics, perturbation_sweep, run
from .spectral import spectrum, verify_stability_invariance

log = logging.getLogger("ringform")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_ABORT = 0, 2, 3, 4


def package_version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return __version__


def fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return f"{float(x):.12g}"
    if isinstance(x, FormationSet):
        return " ".join(map(str, x.indices))
    return "" if x is None else str(x)


class Output:
    """Writes CSV files plus metadata sidecars into one directory."""

    def __init__(self, out_dir, config: ExperimentConfig, command: str):
        self.dir = Path(out_dir)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.config = config
        self.command = command
        self.start = time.perf_counter()
        self.files: list[Path] = []

    def meta(self, path: Path, extra: dict | None = None) -> None:
        doc = {
            "command": self.command,
            "config": self.config.to_dict(),
            "version": package_version(),
            "wall_time_s": time.perf_counter() - self.start,
        }
        if extra:
            doc.update(extra)
        sidecar = path.with_name(path.stem + ".meta.json")
        sidecar.write_text(json.dumps(doc, indent=2, default=_json_default) + "\n")

    def table(self, name: str, header, rows, extra: dict | None = None) -> Path:
        path = self.dir / name
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for row in rows:
                w.writerow([fmt(x) for x in row])
        self.meta(path, extra)
        self.files.append(path)
        return path


def _json_default(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, FormationSet):
        return list(obj.indices)
    return str(obj)


# --- eig ----------------------------------------------------------------------

def cmd_eig(cfg: ExperimentConfig, out: Output) -> int:
    opts, n, coeffs = cfg.eig, cfg.n, cfg.coeffs()
    rows, summary = [], []
    for k in opts.k:
        if k == 0:
            S = FormationSet(n, ())
            rep = spectrum(build_acc_closed_loop(coeffs, S, cfg.gains))
            spectra, formations, dev, res, verdict = [rep], [S], 0.0, float("nan"), "invariant"
        else:
            inv = verify_stability_invariance(coeffs, cfg.gains, n, k, opts.trials, cfg.seed, opts.tol)
            spectra, formations = inv.spectra, inv.formations
            dev, res = inv.max_deviation, inv.max_residual
            verdict = "invariant" if inv.invariant else "not invariant"
        for trial, (S, sp) in enumerate(zip(formations, spectra)):
            for lam in sp.eigenvalues:
                rows.append((k, trial, S, lam.real, lam.imag))
        stable = all(sp.stable for sp in spectra)
        summary.append((k, len(formations), dev, res, stable, verdict))
        print(f"k={k}: {verdict} (max deviation {dev:.3g}, stable={stable})")
    out.table("eig_spectrum.csv", ["k", "trial", "formation", "re", "im"], rows)
    out.table(
        "eig_summary.csv", ["k", "formations", "max_deviation", "max_residual", "stable", "verdict"], summary
    )
    return EXIT_OK


# --- submod -------------------------------------------------------------------

def _oracle(cfg: ExperimentConfig, cost: str, coeffs, backend: str = "riccati"):
    if cost == "j1":
        return j1_oracle(coeffs, cfg.gains, cfg.weights)
    return j2_oracle(coeffs, cfg.weights, backend)


def cmd_submod(cfg: ExperimentConfig, out: Output) -> int:
    opts, n = cfg.submod, cfg.n
    oracle = _oracle(cfg, opts.cost, cfg.coeffs(), opts.backend)
    res = submodularity_check(
        oracle, n, opts.trials, cfg.seed, opts.tol, opts.stop_on_counterexample, cfg.threads
    )
    margins = [(c.chain_id, i + 1, m) for c in res.chains for i, m in enumerate(c.margins)]
    chains = [
        (c.chain_id, c.seed, " ".join(str(S.indices[-1]) for S in _additions(c.chain)), c.monotone, c.valid, c.error)
        for c in res.chains
    ]
    ce = res.counterexample
    extra = {
        "verdict": res.verdict,
        "invalid_chains": res.invalid,
        "counterexample": None if ce is None else {
            "chain_id": ce.chain_id,
            "chain": [list(S.indices) for S in ce.chain],
            "margins": ce.margins,
        },
    }
    out.table("submod_chains.csv", ["chain_id", "i", "margin"], margins, extra)
    out.table("submod_orders.csv", ["chain_id", "seed", "order", "monotone", "valid", "error"], chains)
    print(f"{opts.cost.upper()}: {res.verdict} ({res.invalid} invalid chains)")

    if opts.pairs:
        rows = []
        for e, small, large in opts.pairs:
            small_S, large_S = FormationSet(n, small), FormationSet(n, large)
            pc = check_pair(oracle, e, small_S, large_S)
            rows.append((
                e, small_S, large_S, oracle(small_S), oracle(small_S.add(e)), oracle(large_S),
                oracle(large_S.add(e)), pc.margin_small, pc.margin_large, pc.violated,
            ))
            status = "violated" if pc.violated else "holds"
            print(f"pair e={e}, {small_S} < {large_S}: margins {pc.margin_small:.6g} vs {pc.margin_large:.6g} ({status})")
        out.table(
            "submod_pairs.csv",
            ["e", "small", "large", "J_small", "J_small_plus_e", "J_large", "J_large_plus_e",
             "margin_small", "margin_large", "violated"],
            rows,
        )
    return EXIT_OK


def _additions(chain: list[FormationSet]) -> list[FormationSet]:
    """Singletons naming the index added at each step (for the order column)."""
    out, prev = [], set()
    for S in chain[:-1]:
        (new,) = set(S.indices) - prev
        out.append(FormationSet(S.n, (new,)))
        prev = set(S.indices)
    return out


# --- search -------------------------------------------------------------------

def _cells(cfg: ExperimentConfig):
    """Yield ``(alpha, beta, s_star, ovm_or_None, coeffs_or_None, skip_reason)`` for every grid cell."""
    opts = cfg.search
    if not opts.alpha:
        spec = cfg.require("model")
        ovm = spec.ovm
        yield (
            ovm.alpha if ovm else math.nan, ovm.beta if ovm else math.nan,
            spec.s_star if ovm else math.nan, ovm, spec.linear(), None,
        )
        return
    for a in opts.alpha:
        for b in opts.beta:
            for s in opts.s_star:
                try:
                    ovm = OvmParams(a, b, opts.v_max, opts.s_st, opts.s_go)
                    coeffs = linearize(ovm, s)
                except ModelError as exc:
                    yield a, b, s, None, None, str(exc)
                    continue
                yield a, b, s, ovm, coeffs, None


SEARCH_HEADER = ["n", "k", "alpha", "beta", "s_star", "xi", "alpha1", "alpha2", "alpha3", "orbits",
                 "best", "best_class", "best_J", "worst", "worst_class", "worst_J", "failures", "error"]


def _search_cell(cfg: ExperimentConfig, cell, threads: int = 1):
    """Rank all orbits at one parameter cell for every k; returns ``(rows, ranking_rows)``."""
    opts, n = cfg.search, cfg.n
    a, b, s, ovm, coeffs, _ = cell
    xi = string_stability_index(ovm, s) if ovm is not None else math.nan
    oracle = _oracle(cfg, opts.cost, coeffs, opts.backend)
    head = (a, b, s, xi, coeffs.alpha1, coeffs.alpha2, coeffs.alpha3)
    rows, ranking = [], []
    for k in opts.k:
        try:
            r = optimal_formation(oracle, n, k, "best", threads, opts.tie_tol, cfg.seed)
        except SearchError as exc:
            if opts.mode == "point":
                raise
            rows.append((n, k, *head, len(enumerate_orbits(n, k)), "", "", None, "", "", None, None, str(exc)))
            continue
        rows.append((
            n, k, *head, len(r.ranked),
            " | ".join(map(fmt, r.best)), r.best_class, r.best_value,
            " | ".join(map(fmt, r.worst)), r.worst_class, r.worst_value, len(r.failures), None,
        ))
        ranking += [(n, k, a, b, s, rank + 1, S, classify(S), v) for rank, (S, v) in enumerate(r.ranked)]
    return rows, ranking


def _search_cell_job(args):
    cfg, cell = args
    return _search_cell(cfg, cell)[0]


def cmd_search(cfg: ExperimentConfig, out: Output) -> int:
    opts = cfg.search
    if opts.mode == "scale":
        return _search_scale(cfg, out)
    cells, skipped = [], []
    for cell in _cells(cfg):
        a, b, s, _, _, why = cell
        if why is None:
            cells.append(cell)
        else:
            skipped.append({"alpha": a, "beta": b, "s_star": s, "reason": why})
            log.info("skipping cell alpha=%g beta=%g s*=%g: %s", a, b, s, why)
    rows, ranking_rows = [], []
    if opts.mode == "sweep":
        # cells are independent; separate processes sidestep the GIL on many small solves
        if cfg.threads > 1 and len(cells) > 1:
            with ProcessPoolExecutor(cfg.threads) as pool:
                for part in pool.map(_search_cell_job, [(cfg, c) for c in cells]):
                    rows += part
        else:
            for c in cells:
                rows += _search_cell(cfg, c)[0]
        print(f"{len(rows)} cell/k results, {len(skipped)} degenerate cells skipped")
    else:
        for c in cells:
            part, ranking = _search_cell(cfg, c, cfg.threads)
            rows += part
            ranking_rows += ranking
        for row in rows:
            n, k, a, b, s = row[:5]
            print(f"alpha={a:g} beta={b:g} s*={s:g} k={k}: best {row[10]} ({row[11]}), worst {row[13]} ({row[14]})")
    out.table("search.csv", SEARCH_HEADER, rows, {"skipped_cells": skipped})
    if ranking_rows:
        out.table("search_ranking.csv", ["n", "k", "alpha", "beta", "s_star", "rank", "formation", "class", "J"],
                  ranking_rows)
    return EXIT_OK


def _search_scale(cfg: ExperimentConfig, out: Output) -> int:
    opts = cfg.search
    rows = []
    for a, b, s, ovm, coeffs, why in _cells(cfg):
        if why is not None:
            raise ConfigError(f"search: {why}")
        oracle = _oracle(cfg, opts.cost, coeffs, opts.backend)
        for n in opts.n_values:
            for k in opts.k:
                jp = oracle(platoon_formation(n, k))
                ju = oracle(uniform_formation(n, k))
                rows.append((n, k, a, b, s, jp, ju, ju - jp))
                print(f"n={n} k={k}: J(platoon)={jp:.6g} J(uniform)={ju:.6g} gap={ju - jp:.4g}")
    out.table("search_scale.csv", ["n", "k", "alpha", "beta", "s_star", "J_platoon", "J_uniform", "gap"], rows)
    return EXIT_OK


# --- synth --------------------------------------------------------------------

def cmd_synth(cfg: ExperimentConfig, out: Output) -> int:
    opts, n, coeffs, w = cfg.synth, cfg.n, cfg.coeffs(), cfg.weights
    other = "sdp" if opts.backend == "riccati" else "riccati"
    rows, failed = [], []
    header_k = [f"s{i}" for i in range(1, n + 1)] + [f"v{i}" for i in range(1, n + 1)]
    for j, idx in enumerate(opts.formations, start=1):
        S = FormationSet(n, idx)
        res = synthesize(coeffs, S, w, backend=opts.backend)
        meta = res.solver_meta
        rot = cross = gap = None
        if res.converged:
            if opts.rotation_check:
                rot = synthesize(coeffs, S.rotate(1), w, backend=opts.backend).h2_sq
            if opts.cross_check:
                try:
                    cross = synthesize(coeffs, S, w, backend=other).h2_sq
                except ImportError as exc:
                    log.warning("cross-check backend unavailable: %s", exc)
            if opts.perturbation_trials:
                gap = local_optimality_gap(coeffs, S, w, res, trials=opts.perturbation_trials, rng_seed=cfg.seed)
        else:
            failed.append(str(S))
        out.table(f"gain_{j}.csv", header_k, res.K.tolist(), {"formation": list(S.indices), "J2": -res.h2_sq,
                                                             "status": res.status, "solver": meta})
        rows.append((
            S, -res.h2_sq, res.status, opts.backend, meta.get("evaluator_h2"), meta.get("evaluator_gap"),
            meta.get("lyapunov_residual"), meta.get("riccati_residual"),
            None if rot is None else -rot, None if rot is None else abs(rot - res.h2_sq),
            None if cross is None else -cross,
            None if cross is None or not math.isfinite(cross) else abs(cross - res.h2_sq) / res.h2_sq,
            gap,
        ))
        print(f"{S}: J2={-res.h2_sq:.6g} ({res.status})")
    out.table(
        "synth.csv",
        ["formation", "J2", "status", "backend", "evaluator_h2", "evaluator_gap", "lyapunov_residual",
         "riccati_residual", "J2_rotated", "rotation_gap", f"J2_{other}", "backend_gap", "perturbation_gain"],
        rows,
    )
    if failed:
        raise SynthesisError(f"synthesis failed for {', '.join(failed)}")
    return EXIT_OK


# --- sim ----------------------------------------------------------------------

def cmd_sim(cfg: ExperimentConfig, out: Output) -> int:
    opts = cfg.sim
    base = opts.scenario
    named = opts.formations or (("run", tuple(base.formation)),)
    conv_rows = []
    for name, idx in named:
        config = replace(base, formation=idx)
        scenario = build_scenario(config)
        try:
            trace = run(scenario)
        except SimulationAbort as exc:
            exc.trace.to_csv(out.dir / f"trace_{name}.csv", opts.stride)
            out.meta(out.dir / f"trace_{name}.csv", {"aborted": str(exc)})
            raise
        path = out.dir / f"trace_{name}.csv"
        trace.to_csv(path, opts.stride)
        m = metrics(trace, eps_v=opts.eps_v, hold=opts.hold)
        out.meta(path, {"formation": list(idx), "conservation_error": trace.conservation_error(),
                        "overrides": int(trace.override.sum()), "metrics": m.__dict__})
        out.files.append(path)
        print(f"{name}: lq_cost={m.lq_cost:.6g} stabilizing_time={m.stabilizing_time:.4g}"
              f"{' (censored)' if m.censored else ''}")

        if opts.sweep and config.perturbation is not None:
            res = perturbation_sweep(config, threads=cfg.threads, eps_v=opts.eps_v, hold=opts.hold)
            rows = [
                (v, None if mm is None else mm.stabilizing_time, None if mm is None else mm.censored,
                 None if mm is None else mm.lq_cost, err)
                for v, mm, err in res
            ]
        else:
            vehicle = config.perturbation.vehicle if config.perturbation else None
            rows = [(vehicle, m.stabilizing_time, m.censored, m.lq_cost, None)]
        out.table(f"metrics_{name}.csv", ["vehicle", "stabilizing_time", "censored", "lq_cost", "error"], rows,
                  {"formation": list(idx)})

        if opts.dt_halving:
            half = build_scenario(replace(config, dt=config.dt / 2), gain=scenario.gain)
            mh = metrics(run(half), eps_v=opts.eps_v, hold=opts.hold)
            rel = abs(mh.lq_cost - m.lq_cost) / max(abs(m.lq_cost), np.finfo(float).tiny)
            conv_rows += [(name, config.dt, m.lq_cost, m.stabilizing_time, None),
                          (name, config.dt / 2, mh.lq_cost, mh.stabilizing_time, rel)]
            print(f"{name}: dt halving changes lq_cost by {100 * rel:.3g}%")
    if conv_rows:
        out.table("convergence.csv", ["formation", "dt", "lq_cost", "stabilizing_time", "rel_change"], conv_rows)
    return EXIT_OK


COMMANDS = {"eig": cmd_eig, "submod": cmd_submod, "search": cmd_search, "synth": cmd_synth, "sim": cmd_sim}

HELP = {
    "eig": "closed-loop spectra of random ACC formations and the invariance verdict",
    "submod": "random-chain diminishing-returns test and explicit pair checks",
    "search": "optimal/worst formations at one point, over a parameter grid, or across ring sizes",
    "synth": "cooperative gain synthesis with evaluator, rotation and backend cross-checks",
    "sim": "nonlinear ring simulation, perturbation sweep and dt-halving report",
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="JSON experiment config")
    common.add_argument("--out", default="out", help="output directory (default: out)")
    common.add_argument("--threads", type=int, default=None, help="worker count (overrides config)")
    common.add_argument("--seed", type=int, default=None, help="RNG seed, unsigned 64-bit (overrides config)")
    common.add_argument("-v", "--verbose", action="store_true")
    parser = argparse.ArgumentParser(prog="ringform", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {package_version()}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common], help=HELP[name], description=HELP[name])
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config, args.command, args.seed, args.threads)
        out = Output(args.out, cfg, args.command)
        return COMMANDS[args.command](cfg, out)
    except SimulationAbort as exc:
        print(f"simulation aborted: {exc}", file=sys.stderr)
        return EXIT_ABORT
    except ModelError as exc:
        print(f"invalid configuration: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SynthesisError, SearchError, LinAlgError, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
