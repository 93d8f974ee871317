"""Synthetic scoring landscapes and an exhaustive search oracle.

A landscape scores a spec by which feature predicates it satisfies, so the refinement loop
can be checked against brute-force enumeration without any model in the loop.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Any, Callable, Iterator, Mapping, Sequence

from .evaluator import CriteriaSet, Criterion, EvaluationReport
from .evolution import ApplyError, Hypothesis, HypothesisSet, modify
from .executor import ExecutionResult
from .model import AgentSpec, SystemSpec, TaskSpec, canonicalize

SYNTHETIC_CRITERION = "synthetic"
MAX_DEPTH = 3

FEATURE_KINDS = (
    "agent_role_contains",
    "agent_count_at_least",
    "task_exists",
    "task_depends_on",
    "task_min_dependencies",
    "task_agent",
    "task_has_tool",
    "tool_used",
)


class EnumerationBudgetExceeded(RuntimeError):
    def __init__(self, count: int, budget: int):
        super().__init__(f"enumeration visited {count} specs, budget is {budget}")
        self.count = count


def _check(kind: str, params: Mapping[str, Any], spec: SystemSpec) -> bool:
    tasks = {t.task_id: t for t in spec.tasks}
    if kind == "agent_role_contains":
        needle = params["text"].lower()
        return any(needle in a.role.lower() for a in spec.agents)
    if kind == "agent_count_at_least":
        return len(spec.agents) >= params["count"]
    if kind == "task_exists":
        return params["task_id"] in tasks
    if kind == "task_depends_on":
        t = tasks.get(params["task_id"])
        return t is not None and params["depends_on"] in t.dependencies
    if kind == "task_min_dependencies":
        t = tasks.get(params["task_id"])
        return t is not None and len(set(t.dependencies)) >= params["count"]
    if kind == "task_agent":
        t = tasks.get(params["task_id"])
        return t is not None and t.agent_id == params["agent_id"]
    if kind == "task_has_tool":
        t = tasks.get(params["task_id"])
        return t is not None and params["tool"] in t.tools
    if kind == "tool_used":
        tool = params["tool"]
        return any(tool in a.tools for a in spec.agents) or any(tool in t.tools for t in spec.tasks)
    raise ValueError(f"unknown feature kind {kind!r}")


@dataclass(frozen=True)
class Feature:
    kind: str
    params: Mapping[str, Any]
    reward: Fraction

    def __post_init__(self) -> None:
        if self.kind not in FEATURE_KINDS:
            raise ValueError(f"unknown feature kind {self.kind!r}")
        object.__setattr__(self, "reward", Fraction(str(self.reward)))
        if self.reward <= 0:
            raise ValueError("feature rewards must be positive")

    def holds(self, spec: SystemSpec) -> bool:
        return _check(self.kind, self.params, spec)

    def label(self) -> str:
        args = ", ".join(f"{k}={v}" for k, v in sorted(self.params.items()))
        return f"{self.kind}({args})"

    def to_dict(self) -> dict[str, Any]:
        return {"kind": self.kind, **self.params, "reward": str(self.reward)}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "Feature":
        params = {k: v for k, v in d.items() if k not in ("kind", "reward")}
        return cls(d["kind"], params, Fraction(str(d["reward"])))


@dataclass(frozen=True)
class SyntheticLandscape:
    features: tuple[Feature, ...]
    noise_seed: int = 0
    name: str = "landscape"
    baseline: SystemSpec | None = None
    alphabet: tuple[Hypothesis, ...] = ()
    max_iterations: int = 2

    def __post_init__(self) -> None:
        object.__setattr__(self, "features", tuple(self.features))
        object.__setattr__(self, "alphabet", tuple(self.alphabet))
        if not self.features:
            raise ValueError("a landscape needs at least one feature")

    @property
    def total_reward(self) -> Fraction:
        return sum((f.reward for f in self.features), Fraction(0))

    def to_dict(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "noise_seed": self.noise_seed,
            "max_iterations": self.max_iterations,
            "features": [f.to_dict() for f in self.features],
            "baseline": self.baseline.to_dict() if self.baseline else None,
            "alphabet": [h.to_dict() for h in self.alphabet],
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "SyntheticLandscape":
        return cls(
            features=tuple(Feature.from_dict(f) for f in d["features"]),
            noise_seed=int(d.get("noise_seed", 0)),
            name=d.get("name", "landscape"),
            baseline=SystemSpec.from_dict(d["baseline"]) if d.get("baseline") else None,
            alphabet=tuple(Hypothesis.from_dict(h) for h in d.get("alphabet", ())),
            max_iterations=int(d.get("max_iterations", 2)),
        )

    @classmethod
    def load(cls, path: str | Path) -> "SyntheticLandscape":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def synthetic_score(spec: SystemSpec, landscape: SyntheticLandscape) -> Fraction:
    got = sum((f.reward for f in landscape.features if f.holds(spec)), Fraction(0))
    return got / landscape.total_reward


def synthetic_criteria() -> CriteriaSet:
    return CriteriaSet((Criterion(SYNTHETIC_CRITERION, "Share of landscape reward satisfied."),))


def synthetic_evaluate(spec: SystemSpec, landscape: SyntheticLandscape) -> EvaluationReport:
    score = synthetic_score(spec, landscape)
    satisfied = [f.label() for f in landscape.features if f.holds(spec)]
    rationale = f"{score} of reward; satisfied: {', '.join(satisfied) or 'none'}"
    return EvaluationReport(
        {SYNTHETIC_CRITERION: {"score": float(score), "rationale": rationale}},
        {},
        float(score),
    )


def synthetic_execute(spec: SystemSpec) -> ExecutionResult:
    """Stand-in execution: the 'output' is the canonical spec itself, produced instantly."""
    return ExecutionResult({"spec": canonicalize(spec)}, canonicalize(spec), {"spec": 0.0}, 0.0, 1, 1, True)


def synthetic_hooks(landscape: SyntheticLandscape) -> dict[str, Callable]:
    return {
        "execute": synthetic_execute,
        "evaluate_fn": lambda result, spec: synthetic_evaluate(spec, landscape),
    }


def alphabet_generator(alphabet: Sequence[Hypothesis]):
    """A hypothesis hook that proposes every alphabet entry as its own single-hypothesis set."""
    def hypothesize(report: EvaluationReport, spec: SystemSpec, branching: int) -> list[HypothesisSet]:
        return [HypothesisSet((h,), report) for h in alphabet[:branching]]

    return hypothesize


def children(spec: SystemSpec, alphabet: Sequence[Hypothesis]) -> Iterator[tuple[Hypothesis, SystemSpec]]:
    for h in alphabet:
        try:
            yield h, modify(spec, (h,)).spec
        except ApplyError:
            continue


@dataclass
class OracleResult:
    score: Fraction
    witness: SystemSpec
    path: tuple[Hypothesis, ...] = ()
    visited: int = 0

    def __iter__(self):
        return iter((self.score, self.witness))


def brute_force_best(spec0: SystemSpec, alphabet: Sequence[Hypothesis], depth: int,
                     landscape: SyntheticLandscape, budget: int = 100_000) -> OracleResult:
    """Best score over every spec reachable by at most ``depth`` alphabet applications.

    Breadth-first over distinct canonical specs; the witness is the first maximum found,
    so its path is as short as possible.
    """
    if not 0 <= depth <= MAX_DEPTH:
        raise ValueError(f"depth must be in [0, {MAX_DEPTH}]")
    start = canonicalize(spec0)
    seen = {start}
    best = OracleResult(synthetic_score(spec0, landscape), spec0, (), 1)
    frontier: list[tuple[SystemSpec, tuple[Hypothesis, ...]]] = [(spec0, ())]
    visited = 1
    for _ in range(depth):
        nxt = []
        for spec, path in frontier:
            for h, child in children(spec, alphabet):
                visited += 1
                if visited > budget:
                    raise EnumerationBudgetExceeded(visited, budget)
                text = canonicalize(child)
                if text in seen:
                    continue
                seen.add(text)
                nxt.append((child, path + (h,)))
                score = synthetic_score(child, landscape)
                if score > best.score:
                    best = OracleResult(score, child, path + (h,))
        frontier = nxt
    best.visited = visited
    return best


# -- random landscapes ---------------------------------------------------------

_ROLE_WORDS = ("Analyst", "Researcher", "Validator", "Strategist", "Editor", "Specialist", "Planner", "Critic")
_TOOLS = ("SerperDevTool", "WebsiteSearchTool", "ScrapeWebsiteTool", "FileReadTool", "CodeInterpreterTool")


def random_baseline(rng: random.Random, n_tasks: int = 3) -> SystemSpec:
    agents = (AgentSpec("lead", "Lead Coordinator", "Deliver the final report"),)
    tasks = []
    for i in range(n_tasks):
        tid = f"t{i + 1}"
        deps = (f"t{i}",) if i and rng.random() < 0.5 else ()
        tasks.append(TaskSpec(tid, f"Step {i + 1} of the analysis", f"Findings of step {i + 1}", "lead", deps))
    return SystemSpec("synthetic", "Produce a research report", agents, tuple(tasks))


def random_landscape(seed: int, alphabet_size: int = 6, max_iterations: int = 2) -> SyntheticLandscape:
    """A baseline, an alphabet and one positively rewarded feature per alphabet entry.

    Each hypothesis switches on exactly the feature drawn for it, with integer rewards
    in [1, 9], plus one feature no hypothesis reaches so the maximum stays below 1.
    """
    rng = random.Random(seed)
    spec0 = random_baseline(rng)
    task_ids = sorted(spec0.task_ids)
    alphabet: list[Hypothesis] = []
    features: list[Feature] = []
    used_roles: set[str] = set()
    makers = ["agent", "tool", "dependency", "task", "role"]
    while len(alphabet) < alphabet_size:
        kind = rng.choice(makers)
        reward = rng.randint(1, 9)
        if kind == "agent":
            word = rng.choice([w for w in _ROLE_WORDS if w not in used_roles] or ["Extra"])
            used_roles.add(word)
            aid = word.lower()
            if aid in {h.payload.get("agent", {}).get("agent_id") for h in alphabet}:
                continue
            h = Hypothesis("AddAgent", {"agent": {"agent_id": aid, "role": f"Market {word}",
                                                  "goal": f"Act as {word.lower()}"}},
                           f"A dedicated {word.lower()} should deepen the analysis")
            f = Feature("agent_role_contains", {"text": word}, reward)
        elif kind == "tool":
            tid, tool = rng.choice(task_ids), rng.choice(_TOOLS)
            h = Hypothesis("SetTools", {"target": "task", "id": tid, "tools": [tool]},
                           f"{tool} gives {tid} better evidence")
            f = Feature("task_has_tool", {"task_id": tid, "tool": tool}, reward)
        elif kind == "dependency":
            a, b = rng.sample(task_ids, 2)
            lo, hi = sorted((a, b))
            h = Hypothesis("AddDependency", {"task_id": hi, "depends_on": lo},
                           f"{hi} should build on {lo}")
            f = Feature("task_depends_on", {"task_id": hi, "depends_on": lo}, reward)
        elif kind == "task":
            tid = f"v{len(alphabet) + 1}"
            h = Hypothesis("AddTask", {"task": {"task_id": tid, "description": "Validate the findings",
                                                "expected_output": "A validated report", "agent_id": "lead",
                                                "dependencies": [task_ids[-1]]}},
                           "A validation pass should catch errors")
            f = Feature("task_exists", {"task_id": tid}, reward)
        else:
            word = rng.choice([w for w in _ROLE_WORDS if w not in used_roles] or ["Extra"])
            used_roles.add(word)
            h = Hypothesis("ModifyAgent", {"agent_id": "lead", "role": f"Lead {word}"},
                           f"The lead should act as {word.lower()}")
            f = Feature("agent_role_contains", {"text": word}, reward)
        if any(existing == h for existing in alphabet):
            continue
        if any(g.kind == f.kind and g.params == f.params for g in features):
            continue
        alphabet.append(h)
        features.append(f)
    features.append(Feature("agent_count_at_least", {"count": 99}, rng.randint(1, 9)))
    return SyntheticLandscape(tuple(features), seed, f"random-{seed}", spec0, tuple(alphabet), max_iterations)
