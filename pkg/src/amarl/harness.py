"""Pipeline stages and desk-scale reproductions of the experiment tables."""
from __future__ import annotations

import csv
import io
import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import gfc
from . import shield as sh
from .checker import check_chain
from .evaluate import EvalReport, monte_carlo_eval, report_atoms
from .game import MarkovGame, induce_chain, load_game, write_atomic
from .learn import LearnerConfig, Simulator, save_checkpoint, train
from .policy import (ConstraintSet, amg_alphabet, evaluate_all, pareto_filter,
                     sample_policies, select, write_evaluations)
from .quotient import OPTIMAL, SAFE, amg_to_dict, build_amg, quotient

FIXTURES = Path(__file__).parent / "fixtures"
DEFAULT_SEEDS = (0, 1, 2, 3, 4)


class EmptyParetoError(RuntimeError):
    pass


@dataclass
class RunManifest:
    stages: list = field(default_factory=lambda: ["build-amg", "gen-policies", "select", "train", "eval"])
    inputs: dict = field(default_factory=dict)
    seeds: list = field(default_factory=lambda: list(DEFAULT_SEEDS))
    out: str = "out"
    tolerances: dict = field(default_factory=lambda: {"model": 1e-9, "sigma": 3.0})

    def __post_init__(self):
        if len(set(self.seeds)) != len(self.seeds):
            raise ValueError("seeds must be distinct")

    def check_inputs(self) -> None:
        missing = [k for k, p in self.inputs.items() if not Path(p).exists()]
        if missing:
            raise FileNotFoundError(f"missing inputs: {missing}")


def _csv(rows, header) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(x) for x in r])
    return buf.getvalue()


def _fmt(x):
    if isinstance(x, float):
        return "inf" if math.isinf(x) else f"{x:.6g}"
    return x


def write_json(path, data) -> None:
    write_atomic(path, json.dumps(data, indent=1, sort_keys=True) + "\n")


# --- stages ---------------------------------------------------------------------

def load_model(model=None, spec=None):
    """(concrete game or None, grid spec or None) from a model file or spec name/path."""
    if spec is not None:
        s = spec if isinstance(spec, gfc.GridSpec) else gfc.GridSpec.load(spec)
        return None, s
    return load_game(model), None


def build_amgs(game: MarkovGame | None = None, spec: gfc.GridSpec | None = None, method="quotient"):
    """(safe AMG, optimal AMG, concrete game or None, partition or None)."""
    if method == "direct":
        if spec is None:
            raise ValueError("the direct builder needs a grid spec")
        safe, opt = gfc.direct_amg(spec)
        return safe, opt, None, None
    if game is None:
        game = gfc.build_mg(spec)
    part = quotient(game)
    return build_amg(game, part, SAFE), build_amg(game, part, OPTIMAL), game, part


def generate(safe, opt, constraints: ConstraintSet, count: int, seed: int):
    policies = sample_policies(safe, count, seed)
    evals = evaluate_all(policies, safe, opt, constraints)
    return evals, pareto_filter(evals)


def table3(evaluation, constraints: ConstraintSet) -> str:
    """Selected policy's metric and safety values as one CSV row each block."""
    header = [m.text for m in constraints.metrics] + [c.text for c in constraints.safety]
    safety = [r["value"] for r in evaluation.results if r["tag"] == "safety"]
    return _csv([list(evaluation.metrics) + safety], header)


def performance_table(reports: list[EvalReport], extra=None) -> str:
    """Mean (std over seeds) of P(F captured_i), P(F goal_i) and return per agent and 'all'."""
    rows = []
    per = [r.rows() for r in reports]
    for k, (agent, *_rest) in enumerate(per[0]):
        vals = np.array([[p[k][1], p[k][2], p[k][3]] for p in per])
        mean, sd = vals.mean(axis=0), vals.std(axis=0, ddof=1) if len(per) > 1 else np.zeros(3)
        rows.append([agent] + [f"{m:.4f} ({s:.4f})" for m, s in zip(mean, sd)])
    header = ["i", "P(F captured_i)", "P(F goal_i)", "R(F end_i)"]
    if extra:
        header += list(extra)
        for r in rows:
            r += [extra[k] for k in extra]
    return _csv(rows, header)


def random_table(with_shield: EvalReport, without: EvalReport) -> str:
    n = len(with_shield.returns)
    rows = [[f"Agent_{i}", with_shield.reached[f"captured_{i}"], without.reached[f"captured_{i}"]]
            for i in range(1, n + 1)]
    rows.append(["All agents", with_shield.reached["captured_all"], without.reached["captured_all"]])
    return _csv(rows, ["", "P(F captured_i) with shield", "P(F captured_i) without shield"])


# --- reproductions -----------------------------------------------------------

def repro_fig3(out) -> dict:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    left = load_game(FIXTURES / "fig3_left.json")
    right = load_game(FIXTURES / "fig3_right.json")
    part = quotient(left)
    classes = sorted(sorted(left.state_ids[s] for s in b) for b in part.blocks)
    safe = build_amg(left, part, SAFE)
    from .quotient import bisimulation_classes
    joint = bisimulation_classes(left, right, ("L.", "R."))
    data = {"classes": classes, "joint_classes": sorted(sorted(c) for c in joint)}
    write_json(out / "fig3_classes.json", data)
    write_json(out / "fig3_amg.json", amg_to_dict(safe, left))
    return data


def repro_gfc(name: str, out, count=1000, policy_seed=7, seeds=DEFAULT_SEEDS, episodes=20_000,
              eval_episodes=10_000, modes=("shielded", "unshielded-terminate"), log=print) -> dict:
    """Full pipeline on a grid fixture, writing the table analogues as CSV."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    meta = {"started": time.strftime("%Y-%m-%dT%H:%M:%S")}
    spec = gfc.GridSpec.load(name)
    game = gfc.build_mg(spec)
    safe, opt, _, part = build_amgs(game, spec)
    iso = [gfc.amg_isomorphic(a, b)[0] for a, b in zip((safe, opt), gfc.direct_amg(spec))]
    log(f"{name}: {game.n_states} states, {safe.n_states} abstract states, direct builder agrees: {all(iso)}")
    write_json(out / "safe_amg.json", amg_to_dict(safe, game))
    write_json(out / "optimal_amg.json", amg_to_dict(opt, game))
    constraints = ConstraintSet.load(FIXTURES / f"{name}.props", amg_alphabet(safe))
    evals, pareto = generate(safe, opt, constraints, count, policy_seed)
    write_evaluations(out / "evaluations.jsonl", evals, safe)
    write_evaluations(out / "pareto.jsonl", pareto, safe)
    chosen = select(pareto)
    if chosen is None:
        raise EmptyParetoError("no safe policy among the samples")
    write_json(out / "policy.json", chosen.to_dict(safe))
    write_atomic(out / "table3.csv", table3(chosen, constraints))
    log(f"policies: {len(evals)} distinct, {sum(e.admissible for e in evals)} admissible, "
        f"{len(pareto)} Pareto; selected {chosen.id}")
    model = sh.ShieldModel(game, safe, chosen.policy)
    sim = Simulator(game)
    summary = {"policy": chosen.id, "admissible": chosen.admissible, "modes": {}}
    for mode in modes:
        reports, unsafe = [], []
        for seed in seeds:
            cfg = LearnerConfig(episodes=episodes, max_steps=spec.max_steps, seed=seed, mode=mode)
            pol, stats = train(game, model if mode != "vanilla" else None, cfg, sim=sim)
            save_checkpoint(out / f"checkpoint_{mode}_{seed}.json", pol, cfg)
            write_atomic(out / f"stats_{mode}_{seed}.csv", stats.to_csv())
            rep = monte_carlo_eval(game, pol, eval_episodes, seeds=[seed], model=model,
                                   max_steps=spec.max_steps, sim=sim)
            reports.append(rep)
            unsafe.append(stats.unsafe_rate)
            log(f"{mode} seed {seed}: unsafe episodes {stats.unsafe_terminations}, "
                f"P(goal_all)={rep.reached['goal_all']:.4f}")
        extra = {"unsafe episode rate": f"{np.mean(unsafe):.4f}"} if mode != "shielded" else None
        table = {"shielded": "table4.csv", "unshielded-terminate": "table5.csv"}.get(mode, "table_vanilla.csv")
        write_atomic(out / table, performance_table(reports, extra))
        summary["modes"][mode] = {"unsafe_rate": float(np.mean(unsafe)),
                                  "reports": [r.to_dict() for r in reports]}
    on = monte_carlo_eval(game, "random", eval_episodes, seeds=[policy_seed], model=model,
                          shielded=True, max_steps=spec.max_steps, sim=sim)
    off = monte_carlo_eval(game, "random", eval_episodes, seeds=[policy_seed], model=model,
                           shielded=False, max_steps=spec.max_steps, sim=sim)
    write_atomic(out / "table6.csv", random_table(on, off))
    summary["random"] = {"shield": on.to_dict(), "no_shield": off.to_dict()}
    write_json(out / "summary.json", summary)
    meta["finished"] = time.strftime("%Y-%m-%dT%H:%M:%S")
    write_json(out / "meta.json", meta)
    return summary


def optimal_values(opt_amg, policy, atoms) -> dict:
    chain = induce_chain(opt_amg, policy)
    return {a: check_chain(chain, f'P=? [ F "{a}" ]').value for a in atoms}


__all__ = ["RunManifest", "build_amgs", "generate", "repro_fig3", "repro_gfc", "report_atoms",
           "optimal_values", "EmptyParetoError", "asdict"]
