"""Command-line driver: solve | simulate | analyze | concentration.

Every command writes its files under ``--out`` and finishes with
``manifest.json`` listing the config hash, the seeds used and the SHA-256
of every file written.  Run ``i`` of an agent uses seed ``base_seed ^ i``.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import agents as ag
from . import analysis as an
from .concentration import fit_constants
from .config import ExperimentConfig, load_config
from .errors import ConfigurationError, PreconditionError, TsmdpError
from .families import (
    ParamGrid,
    QueueConfig,
    arrival_curve,
    build_mdp,
    grid_prior,
    make_params,
    pinsker_constant,
)
from .mdp_core import FiniteMdp, induce_chain, optimal_policy, stationary_distribution

log = logging.getLogger("tsmdp_lab")
DEFAULT_PATHS = 1000


def run_seed(base_seed: int, i: int) -> int:
    return int(base_seed) ^ int(i)


def pool_size() -> int:
    raw = os.environ.get("TSMDP_LAB_THREADS")
    if raw is None:
        return os.cpu_count() or 1
    try:
        n = int(raw)
    except ValueError:
        raise ConfigurationError(f"TSMDP_LAB_THREADS={raw!r} is not an integer") from None
    if n < 1:
        raise ConfigurationError("TSMDP_LAB_THREADS must be at least 1")
    return n


@dataclass
class Problem:
    config: ExperimentConfig
    queue: QueueConfig
    true_params: object
    true_mdp: FiniteMdp
    grid: ParamGrid | None
    true_index: int | None


def build_problem(cfg: ExperimentConfig, need_grid: bool = True) -> Problem:
    q = cfg.queue_config()
    params = make_params(cfg.family, cfg.true_parameter, q, cfg.upsilon)
    true_mdp = build_mdp(cfg.family, params, q, cfg.rewards)
    grid = None
    true_index = None
    if cfg.grid_axes is not None and need_grid:
        grid = grid_prior(cfg.family, cfg.grid_axes, q, cfg.rewards, upsilon=cfg.upsilon)
        for i, m in enumerate(grid.mdps):
            if np.array_equal(m.kernel, true_mdp.kernel):
                true_index = i
                break
    return Problem(cfg, q, params, true_mdp, grid, true_index)


class OutputDir:
    """Collects files so the manifest can hash exactly what was written."""

    def __init__(self, root):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.files = {}

    def write_text(self, rel: str, text: str) -> None:
        path = self.root / rel
        path.parent.mkdir(parents=True, exist_ok=True)
        data = text.encode()
        path.write_bytes(data)
        self.files[rel] = hashlib.sha256(data).hexdigest()

    def write_csv(self, rel: str, header, rows) -> None:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
        self.write_text(rel, buf.getvalue())

    def write_json(self, rel: str, obj) -> None:
        self.write_text(rel, json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n")

    def manifest(self, cfg: ExperimentConfig, command: str, seeds, failures=()) -> dict:
        doc = {
            "command": command,
            "config_sha256": cfg.digest(),
            "config": cfg.to_dict(),
            "seeds": seeds,
            "failures": list(failures),
            "files": dict(sorted(self.files.items())),
        }
        path = self.root / "manifest.json"
        path.write_text(json.dumps(doc, indent=2, sort_keys=True, default=_jsonable) + "\n")
        return doc


def _jsonable(x):
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.floating,)):
        return float(x)
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, tuple):
        return list(x)
    raise TypeError(f"cannot serialise {type(x).__name__}")


def _f(x) -> str:
    return repr(float(x))


def cmd_solve(cfg: ExperimentConfig, out) -> dict:
    prob = build_problem(cfg, need_grid=False)
    res = optimal_policy(prob.true_mdp, method=cfg.solver)
    pi = stationary_distribution(induce_chain(prob.true_mdp, res.policy))
    o = OutputDir(out)
    S = prob.true_mdp.n_states
    o.write_csv("policy.csv", ["state", "action"], [(s, res.policy[s] + 1) for s in range(S)])
    o.write_csv("stationary.csv", ["state", "probability"], [(s, _f(pi[s])) for s in range(S)])
    if cfg.family == "queue":
        lam = arrival_curve(prob.true_params, prob.queue)
    elif cfg.family == "two_server":
        lam = np.full(S, prob.true_params.theta)
    else:
        lam = None
    if lam is not None:
        o.write_csv("arrivals.csv", ["state", "arrival_probability"], [(s, _f(lam[s])) for s in range(S)])
    report = {"gain": float(res.gain), "policy": res.policy.label(), "solver": cfg.solver}
    o.write_json("solve.json", report)
    o.manifest(cfg, "solve", [])
    return report


def _checkpoints(cfg: ExperimentConfig) -> list:
    T = cfg.horizon
    if cfg.checkpoints is not None:
        return sorted(int(c) for c in cfg.checkpoints if c <= T)
    return sorted(set(ag.default_checkpoints(T)) | {int(h) for h in cfg.horizons})


def _run_one(prob: Problem, agent, seed, checkpoints, policies, best):
    cfg = prob.config
    if agent.name == "tsmdp":
        return ag.run_tsmdp(
            prob.true_mdp, prob.grid, cfg.prior, cfg.s0, cfg.horizon, seed=seed,
            checkpoints=checkpoints, cycle_cap=cfg.cycle_cap, record_trace=False,
            policies=policies, mu_star=best.gain, cstar=best.policy,
        )
    return ag.run_ucrl2(
        prob.true_mdp, ag.Ucrl2Config(agent.delta), cfg.horizon, seed=seed,
        checkpoints=checkpoints, s0=cfg.s0, mu_star=best.gain, cstar=best.policy,
    )


def cmd_simulate(cfg: ExperimentConfig, out) -> dict:
    needs_grid = any(a.name == "tsmdp" for a in cfg.agents)
    prob = build_problem(cfg, need_grid=needs_grid)
    if needs_grid and prob.grid is None:
        raise ConfigurationError("the tsmdp agent needs grid_axes")
    best = optimal_policy(prob.true_mdp, method=cfg.solver)
    policies = ag.grid_policies(prob.grid, "all", cfg.solver) if needs_grid else None
    if needs_grid:
        ag.recurrence_check(prob.true_mdp, policies, cfg.s0, prob.grid.labels)
    cps = _checkpoints(cfg)
    seeds = [run_seed(cfg.seed, i) for i in range(cfg.n_runs)]
    o = OutputDir(out)
    failures = []
    summary = {}
    agg_rows = []
    jobs = [(agent, i) for agent in cfg.agents for i in range(cfg.n_runs)]

    def task(job):
        agent, i = job
        try:
            return _run_one(prob, agent, seeds[i], cps, policies, best)
        except TsmdpError as exc:
            return exc

    with ThreadPoolExecutor(max_workers=pool_size()) as pool:
        results = list(pool.map(task, jobs))

    for agent in cfg.agents:
        good = []
        for (a, i), res in zip(jobs, results):
            if a is not agent:
                continue
            if isinstance(res, Exception):
                failures.append({"agent": agent.label, "run": i, "error": f"{type(res).__name__}: {res}"})
                continue
            good.append(res)
            rows = [(i, t, _f(c), _f(r), int(s)) for t, c, r, s in res.checkpoints]
            o.write_csv(
                f"runs/{agent.label}/run_{i:04d}.csv",
                ["run_id", "t", "cumulative_reward", "pseudo_regret", "suboptimal_steps"],
                rows,
            )
        if not good:
            log.warning("every run of %s failed", agent.label)
            continue
        if len(good) < cfg.n_runs:
            log.warning("%s: aggregating %d of %d runs", agent.label, len(good), cfg.n_runs)
        table = ag.aggregate_runs(good, (20, 50, 80))
        sub_med = table.suboptimal_percentiles[50]
        for j, t in enumerate(table.t):
            agg_rows.append((
                agent.label, int(t), _f(table.mean_regret[j]), _f(table.percentiles[20][j]),
                _f(table.percentiles[80][j]), _f(table.mean_suboptimal[j]), _f(sub_med[j]),
            ))
        summary[agent.label] = {
            "runs": len(good),
            "final_mean_regret": float(table.mean_regret[-1]),
            "final_p20": float(table.percentiles[20][-1]),
            "final_p80": float(table.percentiles[80][-1]),
            "final_median_suboptimal": float(sub_med[-1]),
        }
    o.write_csv(
        "aggregate.csv",
        ["agent", "t", "mean_regret", "p20", "p80", "mean_suboptimal_steps", "median_suboptimal_steps"],
        agg_rows,
    )
    o.write_json("summary.json", {"mu_star": float(best.gain), "agents": summary})
    o.manifest(cfg, "simulate", seeds, failures)
    return {"mu_star": float(best.gain), "agents": summary, "failures": failures}


def _theorem4_inputs(cfg, prob, regions, profile):
    spec = cfg.analysis.theorem4
    L = regions.policy_count - 1 if spec.L == "all" else int(spec.L)
    if spec.Delta == "pinsker":
        if cfg.family != "two_server":
            raise ConfigurationError("Delta = \"pinsker\" is only defined for the two-server family")
        theta_star = prob.true_params.theta
        subopt = [g for g in range(len(prob.grid)) if regions.region_of[g] != regions.optimal]
        if not subopt:
            raise PreconditionError("no suboptimal grid point")
        delta_star = min((prob.grid.params[g].theta - theta_star) ** 2 for g in subopt)
        delta = pinsker_constant(prob.queue) * delta_star
    else:
        delta = float(spec.Delta)
    return delta, L


def cmd_analyze(cfg: ExperimentConfig, out) -> dict:
    prob = build_problem(cfg)
    if prob.grid is None:
        raise ConfigurationError("analyze needs grid_axes")
    acfg = an.AnalysisConfig(cfg.analysis.epsilon, cfg.analysis.epsilon_prime_value, cfg.analysis.a4)
    policies = ag.grid_policies(prob.grid, "all", cfg.solver)
    regions, profile = an.decision_regions(
        prob.grid, prob.true_index, acfg, policies=policies, true_mdp=prob.true_mdp
    )
    if regions.policy_count < 2:
        raise PreconditionError("the grid realises a single policy; there is nothing to eliminate")
    o = OutputDir(out)
    labels = [c.label() for c in profile.policies]
    dcols = [f"D_{k}" for k in range(len(labels))]

    def dfmt(v):
        return "inf" if math.isinf(v) else _f(v)

    rows = []
    for g, lab in enumerate(prob.grid.labels):
        c = int(regions.region_of[g])
        part = "prime" if g in regions.s_prime[c] else "double_prime"
        rows.append([lab, labels[c], c, part] + [dfmt(v) for v in profile.d[g]])
    o.write_csv("regions.csv", ["grid_label", "optimal_policy", "region", "subset"] + dcols, rows)
    o.write_csv(
        "kl_profile.csv", ["grid_label"] + dcols,
        [[lab] + [dfmt(v) for v in profile.d[g]] for g, lab in enumerate(prob.grid.labels)],
    )
    report = {
        "policies": labels,
        "optimal": regions.optimal,
        "epsilon": acfg.epsilon,
        "epsilon_prime": cfg.analysis.epsilon_prime,
        "a4": acfg.a4,
        "target_K": acfg.target,
        "infinite_entries": profile.infinite,
        "max_log_ratio": an.max_log_ratio(prob.grid, prob.true_mdp),
        "true_on_grid": prob.true_index is not None,
    }
    try:
        report["epsilon_min"] = an.epsilon_min(regions, profile)
    except PreconditionError as exc:
        report["epsilon_min"] = None
        report["epsilon_min_note"] = str(exc)
    try:
        taus = an.policy_return_times(prob.true_mdp, profile.policies, cfg.s0)
    except PreconditionError as exc:
        taus = None
        report["return_time_note"] = str(exc)
    rc = an.regret_constant(regions, profile, acfg, return_times=taus)
    report["regret_constant"] = {
        "value": rc.value,
        "ordering": [labels[c] for c in rc.ordering],
        "witnesses": [prob.grid.labels[g] for g in rc.witnesses],
        "vectors": rc.vectors,
        "staged_sum": rc.staged_sum,
        "held_at_zero": [labels[c] for c in rc.pegged],
        "weighted_value": rc.weighted_value,
        "weighted_ordering": None if rc.weighted_ordering is None else [labels[c] for c in rc.weighted_ordering],
        "return_times": None if taus is None else taus,
        "witness_violations": an.verify_witness(regions, profile, acfg, rc.ordering, rc.vectors),
    }
    if cfg.analysis.theorem4 is not None:
        delta, L = _theorem4_inputs(cfg, prob, regions, profile)
        bound = an.theorem4_bound(profile, regions, acfg, delta, L)
        report["theorem4"] = {"Delta": delta, "L": L, "bound": bound, "dominates": rc.value <= bound}
    o.write_json("analysis.json", report)
    o.manifest(cfg, "analyze", [])
    return report


def cmd_concentration(cfg: ExperimentConfig, out) -> dict:
    prob = build_problem(cfg, need_grid=False)
    spec = cfg.concentration
    n_paths = spec.n_paths
    if n_paths is None:
        log.warning("concentration.n_paths not set; using %d", DEFAULT_PATHS)
        n_paths = DEFAULT_PATHS
    best = optimal_policy(prob.true_mdp, method=cfg.solver)
    fit = fit_constants(
        prob.true_mdp, best.policy, cfg.s0, spec.delta, n_paths, spec.n_cycles, seed=cfg.seed,
        holdout_paths=spec.holdout_paths, n_policies=spec.n_policies, with_reward=spec.with_reward,
        mu_star=best.gain,
    )
    o = OutputDir(out)
    report = {
        "d1": fit.spec.d1,
        "d2": fit.spec.d2,
        "delta": fit.spec.delta,
        "per_quantity_d1": fit.per_quantity,
        "calibration_paths": fit.n_calibration,
        "holdout_paths": fit.n_holdout,
        "calibration_violation_fraction": fit.calibration_violation,
        "holdout_violation_fraction": fit.holdout_violation,
        "with_reward": fit.with_reward,
        "policy": best.policy.label(),
    }
    o.write_json("bound_spec.json", report)
    hs = fit.holdout_statistics
    if hs is not None:
        cols = slice(None) if fit.with_reward else slice(0, -1)
        per_path = hs.recorded[:, :, cols].max(axis=2)  # (paths, ks)
        o.write_csv(
            "per_k.csv", ["k", "max_deviation_over_sqrt_k", "median_deviation_over_sqrt_k"],
            [(int(k), _f(per_path[:, j].max()), _f(np.median(per_path[:, j]))) for j, k in enumerate(hs.record_at)],
        )
    o.manifest(cfg, "concentration", [cfg.seed])
    return report


COMMANDS = {
    "solve": cmd_solve,
    "simulate": cmd_simulate,
    "analyze": cmd_analyze,
    "concentration": cmd_concentration,
}


def apply_overrides(cfg: ExperimentConfig, runs=None, horizon=None, seed=None) -> ExperimentConfig:
    changes = {}
    if runs is not None:
        changes["n_runs"] = runs
    if seed is not None:
        changes["seed"] = seed
    if horizon is not None:
        changes["horizons"] = [h for h in cfg.horizons if h < horizon] + [horizon]
        if cfg.checkpoints is not None:
            changes["checkpoints"] = sorted({c for c in cfg.checkpoints if c < horizon} | {horizon})
    return cfg.replace(**changes) if changes else cfg


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tsmdp-lab", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", required=True, help="JSON file or bundled name (queue, two_server, two_state)")
        s.add_argument("--out", required=True, help="output directory")
        s.add_argument("--runs", type=int, help="override n_runs")
        s.add_argument("--horizon", type=int, help="override the largest horizon")
        s.add_argument("--seed", type=int, help="override the base seed")
        s.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s: %(message)s")
    try:
        cfg = apply_overrides(load_config(args.config), args.runs, args.horizon, args.seed)
        report = COMMANDS[args.command](cfg, args.out)
    except TsmdpError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    print(json.dumps(report, indent=2, sort_keys=True, default=_jsonable))
    return 0


if __name__ == "__main__":
    sys.exit(main())
