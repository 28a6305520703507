"""Command-line driver: build-amg, gen-policies, select, train, eval, repro."""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import gfc, harness
from . import shield as sh
from .evaluate import monte_carlo_eval
from .game import load_game, write_atomic
from .learn import LearnerConfig, Simulator, load_checkpoint, save_checkpoint, train
from .policy import (ConstraintSet, amg_alphabet, pareto_filter, read_evaluations, read_policy,
                     select, write_evaluations)
from .quotient import amg_from_dict, amg_to_dict

EXIT_OK, EXIT_INVALID, EXIT_INFEASIBLE = 0, 1, 2
MODES = {"shielded": "shielded", "unshielded": "unshielded-terminate",
         "unshielded-terminate": "unshielded-terminate", "vanilla": "vanilla"}


class Infeasible(Exception):
    pass


def _seeds(text) -> list[int]:
    seeds = [int(x) for x in str(text).split(",") if x.strip()]
    if len(set(seeds)) != len(seeds):
        raise ValueError("seeds must be distinct")
    return seeds


def _game(args):
    """Concrete game and spec (if any) from --spec or --model."""
    if args.spec:
        spec = gfc.GridSpec.load(args.spec)
        return gfc.build_mg(spec), spec
    if args.model:
        return load_game(args.model), None
    raise ValueError("one of --spec or --model is required")


def _amg(path):
    return amg_from_dict(json.loads(Path(path).read_text()))


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_build_amg(args):
    out = _out(args)
    if args.method == "direct":
        spec = gfc.GridSpec.load(args.spec)
        safe, opt, game, _ = harness.build_amgs(spec=spec, method="direct")
    else:
        game, spec = _game(args)
        safe, opt, game, _ = harness.build_amgs(game, spec)
    harness.write_json(out / "safe_amg.json", amg_to_dict(safe, game))
    harness.write_json(out / "optimal_amg.json", amg_to_dict(opt, game))
    print(f"{safe.n_states} abstract states written to {out}")


def cmd_gen_policies(args):
    out = _out(args)
    safe, opt = _amg(args.safe), _amg(args.optimal)
    constraints = ConstraintSet.load(args.constraints, amg_alphabet(safe))
    evals, pareto = harness.generate(safe, opt, constraints, args.count, args.seed)
    write_evaluations(out / "evaluations.jsonl", evals, safe)
    write_evaluations(out / "pareto.jsonl", pareto, safe)
    print(f"{len(evals)} policies, {sum(e.safe for e in evals)} safe, "
          f"{sum(e.admissible for e in evals)} admissible, {len(pareto)} on the Pareto front")
    if not pareto:
        raise Infeasible("no sampled policy satisfies the safety constraints")


def cmd_select(args):
    out = _out(args)
    amg = _amg(args.safe) if args.safe else None
    pareto = pareto_filter(read_evaluations(args.pareto, amg))
    order = [int(x) for x in args.order.split(",")] if args.order else None
    chosen = select(pareto, order)
    if chosen is None:
        raise Infeasible("the Pareto set is empty")
    harness.write_json(out / "policy.json", chosen.to_dict(amg))
    print(f"selected {chosen.id} (admissible: {chosen.admissible})")


def _shield_model(args, game):
    if not args.policy:
        return None
    amg = _amg(args.safe)
    return sh.ShieldModel(game, amg, read_policy(args.policy, amg))


def cmd_train(args):
    out = _out(args)
    game, spec = _game(args)
    mode = MODES[args.mode]
    model = _shield_model(args, game) if mode != "vanilla" else None
    sim = Simulator(game)
    max_steps = args.max_steps or (spec.max_steps if spec else 1000)
    audit = [] if args.audit else None
    for seed in _seeds(args.seeds):
        cfg = LearnerConfig(episodes=args.episodes, max_steps=max_steps, seed=seed, mode=mode,
                            alpha=args.alpha, full_state_key=args.full_state_key)
        pol, stats = train(game, model, cfg, audit=audit, sim=sim)
        save_checkpoint(out / f"checkpoint_{seed}.json", pol, cfg)
        write_atomic(out / f"stats_{seed}.csv", stats.to_csv())
        print(f"seed {seed}: {stats.unsafe_terminations} unsafe episodes, "
              f"{int(stats.interventions.sum())} interventions, {stats.wall_time:.1f}s")
    if audit is not None:
        sh.write_audit(out / "audit.jsonl", audit)


def cmd_eval(args):
    out = _out(args)
    game, spec = _game(args)
    max_steps = args.max_steps or (spec.max_steps if spec else 1000)
    sim = Simulator(game)
    seeds = _seeds(args.seeds)
    model = _shield_model(args, game)
    if args.checkpoint:
        reports = {}
        for path in args.checkpoint:
            pol, cfg = load_checkpoint(path, game)
            if pol.tracked and model is None:
                raise ValueError("a tracked checkpoint needs --policy and --safe")
            reports[Path(path).stem] = monte_carlo_eval(game, pol, args.episodes, seeds, model,
                                                        max_steps=max_steps, sim=sim)
    else:
        rep = monte_carlo_eval(game, "random", args.episodes, seeds, model,
                               shielded=args.shield == "on", max_steps=max_steps, sim=sim)
        reports = {f"random_shield_{args.shield}": rep}
    harness.write_json(out / "eval.json", {k: r.to_dict() for k, r in reports.items()})
    for k, r in reports.items():
        print(k, " ".join(f"{a}={v:.4f}" for a, v in r.reached.items()))


def cmd_repro(args):
    out = _out(args)
    if args.fixture == "fig3":
        data = harness.repro_fig3(out)
        print(json.dumps(data["classes"]))
        return
    harness.repro_gfc(args.fixture, out, count=args.count, policy_seed=args.seed,
                      seeds=_seeds(args.seeds), episodes=args.episodes,
                      eval_episodes=args.eval_episodes,
                      modes=tuple(MODES[m] for m in args.modes.split(",")))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="amarl")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, model=True):
        sp.add_argument("--out", default="out")
        if model:
            sp.add_argument("--model", help="concrete game JSON")
            sp.add_argument("--spec", help="grid spec JSON or fixture name")

    sp = sub.add_parser("build-amg", help="model -> safe/optimal abstract games")
    common(sp)
    sp.add_argument("--method", choices=("quotient", "direct"), default="quotient")
    sp.set_defaults(func=cmd_build_amg)

    sp = sub.add_parser("gen-policies", help="sample and verify abstract joint policies")
    common(sp, model=False)
    sp.add_argument("--safe", required=True)
    sp.add_argument("--optimal", required=True)
    sp.add_argument("--constraints", required=True)
    sp.add_argument("--count", type=int, default=1000)
    sp.add_argument("--seed", type=int, default=7)
    sp.set_defaults(func=cmd_gen_policies)

    sp = sub.add_parser("select", help="choose one policy from a Pareto set")
    common(sp, model=False)
    sp.add_argument("--pareto", required=True)
    sp.add_argument("--safe", help="safe AMG, to resolve block names")
    sp.add_argument("--order", help="metric priority as comma-separated indices")
    sp.set_defaults(func=cmd_select)

    for name, func in (("train", cmd_train), ("eval", cmd_eval)):
        sp = sub.add_parser(name)
        common(sp)
        sp.add_argument("--safe", help="safe AMG file the policy refers to")
        sp.add_argument("--policy", help="selected abstract policy JSON")
        sp.add_argument("--episodes", type=int, default=20_000 if name == "train" else 10_000)
        sp.add_argument("--seeds", default="0,1,2,3,4" if name == "train" else "0")
        sp.add_argument("--max-steps", type=int, default=None)
        sp.set_defaults(func=func)
        if name == "train":
            sp.add_argument("--mode", choices=sorted(MODES), default="shielded")
            sp.add_argument("--alpha", type=float, default=0.1)
            sp.add_argument("--full-state-key", action="store_true")
            sp.add_argument("--audit", action="store_true", help="write shield interventions")
        else:
            sp.add_argument("--checkpoint", nargs="*", help="learned policies (default: random)")
            sp.add_argument("--shield", choices=("on", "off"), default="off")

    sp = sub.add_parser("repro", help="run the whole pipeline on a named fixture")
    common(sp, model=False)
    sp.add_argument("fixture", help="fig3 or a grid fixture name such as gfc-mini")
    sp.add_argument("--count", type=int, default=1000)
    sp.add_argument("--seed", type=int, default=7)
    sp.add_argument("--seeds", default="0,1,2,3,4")
    sp.add_argument("--episodes", type=int, default=20_000)
    sp.add_argument("--eval-episodes", type=int, default=10_000)
    sp.add_argument("--modes", default="shielded,unshielded")
    sp.set_defaults(func=cmd_repro)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except (Infeasible, harness.EmptyParetoError) as e:
        print(json.dumps({"error": "infeasible", "detail": str(e)}), file=sys.stderr)
        return EXIT_INFEASIBLE
    except (ValueError, KeyError, FileNotFoundError, json.JSONDecodeError) as e:
        print(json.dumps({"error": type(e).__name__, "detail": str(e)}), file=sys.stderr)
        return EXIT_INVALID
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
