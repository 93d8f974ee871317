from __future__ import annotations

import json
from pathlib import Path

import pytest

from evolver.evaluator import CriteriaSet, Criterion
from evolver.evolution import Hypothesis
from evolver.model import AgentSpec, SystemSpec, TaskSpec, load_spec

ROOT = Path(__file__).resolve().parent.parent
FIXTURES = ROOT / "fixtures"


def fenced(data) -> str:
    return "Here you go.\n```json\n" + json.dumps(data) + "\n```\n"


def judge(score: float, rationale: str = "ok") -> str:
    return fenced({"score": score, "rationale": rationale})


def hypotheses_response(hyps) -> str:
    return fenced([h.to_dict() if isinstance(h, Hypothesis) else h for h in hyps])


def chain_spec(n: int = 3, name: str = "chain") -> SystemSpec:
    agents = (AgentSpec("writer", "Writer", "Write well"),)
    tasks = tuple(
        TaskSpec(f"t{i}", f"Step {i}", f"Result {i}", "writer", (f"t{i - 1}",) if i > 1 else ())
        for i in range(1, n + 1)
    )
    return SystemSpec(name, "Write a short report", agents, tasks)


def three_criteria() -> CriteriaSet:
    return CriteriaSet(
        (Criterion("alignment", "Fits the objective"), Criterion("clarity", "Clear"), Criterion("relevance", "On task")),
    )


@pytest.fixture
def market_spec() -> SystemSpec:
    return load_spec(FIXTURES / "market_research_baseline.json")


@pytest.fixture
def market_hypotheses() -> list[Hypothesis]:
    data = json.loads((FIXTURES / "market_research_hypotheses.json").read_text())
    return [Hypothesis.from_dict(d) for d in data]


@pytest.fixture
def chain() -> SystemSpec:
    return chain_spec()


def redefine(text: str, task_id: str = "t1") -> Hypothesis:
    return Hypothesis("RedefineTask", {"task_id": task_id, "description": text}, f"try {text!r}")


def one_criterion() -> CriteriaSet:
    return CriteriaSet((Criterion("clarity", "Clear"),))


def child_turn(hyp: Hypothesis, score: float, output: str = "child output") -> list[str]:
    """Script for one iteration at B=1 on a 1-task spec judged on one criterion."""
    return [hypotheses_response([hyp]), output, judge(score)]


# Acceptance verdict lines, repeated in the terminal summary so they survive output capture.
ACCEPTANCE_LINES: list[str] = []


def verdict(number: int, title: str, ok: bool, detail: str = "") -> None:
    line = f"acceptance criterion {number}: {'PASS' if ok else 'FAIL'} - {title}" + (f" ({detail})" if detail else "")
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
