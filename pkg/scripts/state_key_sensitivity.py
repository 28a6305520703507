"""Shielded training on the mini layout with compact and full-state Q-table keys."""
import argparse

import numpy as np

from amarl import gfc, shield as sh
from amarl.evaluate import monte_carlo_eval
from amarl.harness import FIXTURES, build_amgs, generate
from amarl.learn import LearnerConfig, Simulator, train
from amarl.policy import ConstraintSet, amg_alphabet, select

if __name__ == "__main__":
    ap = argparse.ArgumentParser()
    ap.add_argument("--episodes", type=int, default=20_000)
    ap.add_argument("--seeds", default="0,1,2")
    args = ap.parse_args()
    spec = gfc.GridSpec.load("gfc-mini")
    game = gfc.build_mg(spec)
    safe, opt, _, _ = build_amgs(game, spec)
    cs = ConstraintSet.load(FIXTURES / "gfc-mini.props", amg_alphabet(safe))
    chosen = select(generate(safe, opt, cs, 1000, 7)[1])
    model = sh.ShieldModel(game, safe, chosen.policy)
    sim = Simulator(game)
    for full in (False, True):
        goals = []
        for seed in (int(s) for s in args.seeds.split(",")):
            cfg = LearnerConfig(episodes=args.episodes, max_steps=spec.max_steps, seed=seed, full_state_key=full)
            pol, _ = train(game, model, cfg, sim=sim)
            rep = monte_carlo_eval(game, pol, 5000, seeds=[seed], model=model, max_steps=spec.max_steps, sim=sim)
            goals.append(rep.prob("goal_all"))
        print(f"full_state_key={full}: P(goal_all) {np.mean(goals):.3f} +- {np.std(goals):.3f}")
