import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from smecredit.cli import main  # noqa: E402

# the default trade network is too dense for a 300-company world to hit the target rate
TOY_WORLD = ["n_companies=300", "ft_partners=4", "ft_candidates=12"]
TOY_MODEL = ["mode=bimodal", "strategy=HybridConcatAtt", "hidden=4", "heads=1", "net_a=8,4", "net_b=8,4",
             "fnn=4", "att_dim=4", "att_tokens=2", "epochs=3"]


# one PASS/FAIL line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda l: int(l.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


def pytest_addoption(parser):
    parser.addoption("--regen-golden", action="store_true", default=False,
                     help="rewrite the golden CSVs under tests/golden from the current code")


def run_cli(*args):
    return main([str(a) for a in args])


def overrides(items):
    out = []
    for item in items:
        out += ["--set", item]
    return out


@pytest.fixture(scope="session")
def toy_data(tmp_path_factory):
    out = tmp_path_factory.mktemp("toy") / "data"
    assert run_cli("synth", "--out", out, *overrides(TOY_WORLD)) == 0
    return out


@pytest.fixture(scope="session")
def toy_model(toy_data, tmp_path_factory):
    out = tmp_path_factory.mktemp("toy") / "model"
    assert run_cli("train", "--data", toy_data, "--out", out, *overrides(TOY_MODEL)) == 0
    return out
