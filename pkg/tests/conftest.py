from types import SimpleNamespace

import pytest

from amarl import gfc, shield as sh
from amarl.harness import FIXTURES, build_amgs, generate
from amarl.learn import Simulator
from amarl.policy import ConstraintSet, amg_alphabet, select


@pytest.fixture(scope="session")
def mini():
    """The two-agent mini layout taken through generation and selection."""
    spec = gfc.GridSpec.load("gfc-mini")
    game = gfc.build_mg(spec)
    safe, opt, _, part = build_amgs(game, spec)
    cs = ConstraintSet.load(FIXTURES / "gfc-mini.props", amg_alphabet(safe))
    evals, pareto = generate(safe, opt, cs, 1000, 7)
    chosen = select(pareto)
    model = sh.ShieldModel(game, safe, chosen.policy)
    return SimpleNamespace(spec=spec, game=game, safe=safe, opt=opt, part=part, constraints=cs,
                           evals=evals, pareto=pareto, chosen=chosen, model=model, sim=Simulator(game))


_ACCEPTANCE = {}


@pytest.fixture
def acceptance():
    """Record one pass/fail line per acceptance criterion, then assert it."""
    def record(number: int, ok: bool, detail: str):
        _ACCEPTANCE[number] = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        print(_ACCEPTANCE[number])
        assert ok, detail
    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[k])
