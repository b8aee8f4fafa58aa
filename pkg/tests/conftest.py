from pathlib import Path

import pytest

from admarf.checker import check
from admarf.parser import parse_spec

ROOT = Path(__file__).resolve().parent.parent
SPECS = ROOT / "specs"
SCENARIOS = ROOT / "scenarios"
CORPUS = ("self_healing", "self_protection", "self_optimization")


def spec_text(name: str) -> str:
    return (SPECS / f"{name}.assl").read_text()


def parse_ok(src: str, file: str = "<test>"):
    tree, diags = parse_spec(src, file)
    assert tree is not None, [str(d) for d in diags]
    return tree


def checked(src: str):
    report = check(parse_ok(src))
    assert report.passed, [f.format() for f in report.findings]
    return report.model


@pytest.fixture(scope="session")
def corpus():
    return {name: checked(spec_text(name)) for name in CORPUS}


# acceptance verdicts, echoed after the run so they survive output capture
VERDICTS: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in VERDICTS:
            terminalreporter.write_line(line)
