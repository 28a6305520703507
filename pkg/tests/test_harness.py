import json
import math
import subprocess
import sys

import numpy as np
import pytest

from amarl import cli, gfc
from amarl.checker import check_chain
from amarl.evaluate import monte_carlo_eval, simulate_chain
from amarl.game import MarkovGame, save_game
from amarl.harness import RunManifest, performance_table, repro_fig3
from amarl.learn import Simulator
from amarl.quotient import amg_from_dict
from randmodels import random_chain


def run(*argv):
    return cli.main([str(a) for a in argv])


def test_repro_golden_classes_and_byte_identical(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run("repro", "fig3", "--out", a) == 0
    data = json.loads((a / "fig3_classes.json").read_text())
    assert data["classes"] == [["v0", "v1", "v2"], ["v3"], ["v4"]]
    assert ["L.v3", "R.s1"] in data["joint_classes"]
    repro_fig3(b)
    for name in ("fig3_classes.json", "fig3_amg.json"):
        assert (a / name).read_bytes() == (b / name).read_bytes()


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    out = tmp_path_factory.mktemp("pipe")
    assert run("build-amg", "--spec", "gfc-mini", "--out", out) == 0
    props = cli.harness.FIXTURES / "gfc-mini.props"
    assert run("gen-policies", "--safe", out / "safe_amg.json", "--optimal", out / "optimal_amg.json",
               "--constraints", props, "--count", 300, "--seed", 7, "--out", out / "gen") == 0
    assert run("select", "--pareto", out / "gen" / "pareto.jsonl", "--safe", out / "safe_amg.json",
               "--out", out) == 0
    return out


def test_gen_policies_is_deterministic(pipeline):
    out = pipeline
    props = cli.harness.FIXTURES / "gfc-mini.props"
    assert run("gen-policies", "--safe", out / "safe_amg.json", "--optimal", out / "optimal_amg.json",
               "--constraints", props, "--count", 300, "--seed", 7, "--out", out / "gen2") == 0
    for name in ("evaluations.jsonl", "pareto.jsonl"):
        assert (out / "gen" / name).read_bytes() == (out / "gen2" / name).read_bytes()


def test_direct_build_matches_quotient_build(pipeline, tmp_path):
    assert run("build-amg", "--spec", "gfc-mini", "--method", "direct", "--out", tmp_path) == 0
    for name in ("safe_amg.json", "optimal_amg.json"):
        a = amg_from_dict(json.loads((pipeline / name).read_text()))
        b = amg_from_dict(json.loads((tmp_path / name).read_text()))
        assert gfc.amg_isomorphic(a, b)[0]


def test_train_and_eval_round(pipeline, tmp_path):
    common = ["--spec", "gfc-mini", "--safe", pipeline / "safe_amg.json", "--policy", pipeline / "policy.json"]
    assert run("train", *common, "--episodes", 200, "--seeds", "0,1", "--audit", "--out", tmp_path) == 0
    assert (tmp_path / "checkpoint_0.json").exists() and (tmp_path / "audit.jsonl").exists()
    stats = (tmp_path / "stats_1.csv").read_text().splitlines()
    assert stats[0].startswith("episode,return_1,return_2") and len(stats) == 201
    assert run("eval", *common, "--checkpoint", tmp_path / "checkpoint_0.json", "--episodes", 500,
               "--out", tmp_path / "ev") == 0
    rep = json.loads((tmp_path / "ev" / "eval.json").read_text())["checkpoint_0"]
    assert rep["episodes"] == 500 and rep["unsafe"] == 0.0
    assert run("eval", *common, "--shield", "on", "--episodes", 200, "--out", tmp_path / "ev2") == 0


def test_exit_codes(pipeline, tmp_path, capsys):
    assert run("build-amg", "--spec", "nope", "--out", tmp_path) == 1
    err = json.loads(capsys.readouterr().err)
    assert set(err) == {"error", "detail"}
    assert run("train", "--spec", "gfc-mini", "--mode", "vanilla", "--seeds", "1,1", "--out", tmp_path) == 1
    strict = tmp_path / "strict.props"
    strict.write_text("safety P>=0.99 [ F goal_all ]\n")
    code = run("gen-policies", "--safe", pipeline / "safe_amg.json", "--optimal", pipeline / "optimal_amg.json",
               "--constraints", strict, "--count", 50, "--out", tmp_path)
    assert code == 2
    last = capsys.readouterr().err.strip().splitlines()[-1]
    assert json.loads(last)["error"] == "infeasible"


def test_module_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "amarl.cli", "repro", "fig3", "--out", str(tmp_path)],
                       capture_output=True, text=True)
    assert r.returncode == 0 and "v0" in r.stdout


def test_manifest_rejects_duplicate_seeds(tmp_path):
    with pytest.raises(ValueError):
        RunManifest(seeds=[0, 0])
    with pytest.raises(FileNotFoundError):
        RunManifest(inputs={"spec": tmp_path / "missing.json"}).check_inputs()


def _walk_game(deterministic_goal: bool):
    labels = [{"area_1=A"}, {"area_1=B"}, {"goal_1", "end_1", "goal_all", "end_all"}]
    if not deterministic_goal:
        labels[2] = {"captured_1", "end_1", "captured_all", "end_all"}
    rows = [(0, (0,), {1: 1.0}, None, None), (1, (0,), {2: 1.0}, None, None),
            (2, (1,), {2: 1.0}, None, None)]
    return MarkovGame.from_rows(1, ["a", "b", "end"], [["move", "idle"]], rows, labels,
                                global_atoms={"goal_all", "end_all", "captured_all"})


@pytest.mark.parametrize("goal", [True, False])
def test_deterministic_walk_evaluates_exactly(goal, tmp_path):
    game = _walk_game(goal)
    save_game(game, tmp_path / "walk.json")
    assert run("eval", "--model", tmp_path / "walk.json", "--episodes", 10_000, "--out", tmp_path) == 0
    rep = json.loads((tmp_path / "eval.json").read_text())["random_shield_off"]
    assert rep["episodes"] == 10_000
    assert rep["reached"]["goal_1"] == (1.0 if goal else 0.0)
    assert rep["reached"]["captured_1"] == (0.0 if goal else 1.0)


@pytest.mark.parametrize("seed", range(5))
def test_simulation_agrees_with_checker(seed):
    c = random_chain(500 + seed, 15, density=0.3, absorbing=0.2)
    exact = check_chain(c, "P=? [ F q ]").value
    n = 4000
    est = simulate_chain(c, "q", n, seed)
    sigma = math.sqrt(max(exact * (1 - exact), 1e-12) / n)
    assert abs(est - exact) <= 3 * sigma + 1e-12


def test_performance_table_layout(mini):
    reps = [monte_carlo_eval(mini.game, "random", 200, seeds=[s], model=mini.model, shielded=True,
                             max_steps=mini.spec.max_steps, sim=mini.sim) for s in (0, 1)]
    lines = performance_table(reps).splitlines()
    assert len(lines) == 1 + mini.game.n_agents + 1
    assert lines[-1].startswith("all,")


def test_eval_sample_count_split_over_seeds(mini):
    rep = monte_carlo_eval(mini.game, "random", 1001, seeds=[0, 1, 2], max_steps=10, sim=Simulator(mini.game))
    assert rep.episodes == 1001 and [p["episodes"] for p in rep.per_seed] == [334, 334, 333]
    assert np.isclose(sum(p["episodes"] * p["reached"]["end_all"] for p in rep.per_seed) / 1001,
                      rep.reached["end_all"])
