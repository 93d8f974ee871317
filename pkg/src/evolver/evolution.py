"""Hypotheses: parsing LLM proposals and applying them to specs."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from typing import Any, Iterable, Mapping, Sequence

from .evaluator import EvaluationReport
from .gateway import Gateway, GatewayError
from .model import (
    AgentSpec,
    SystemSpec,
    TaskSpec,
    canonicalize,
    normalize_text,
    require_valid,
    validate_spec,
)
from .prompts import load_template, prompt_pair

log = logging.getLogger(__name__)

KINDS = (
    "AddAgent",
    "ModifyAgent",
    "RemoveAgent",
    "AddTask",
    "RedefineTask",
    "ReassignTask",
    "AddDependency",
    "RemoveDependency",
    "SetTools",
)

_AGENT_EDIT_FIELDS = ("role", "goal", "backstory")
_TASK_EDIT_FIELDS = ("description", "expected_output", "agent_id", "dependencies", "tools")


class HypothesisError(ValueError):
    pass


class GenerationError(RuntimeError):
    pass


class ApplyError(RuntimeError):
    """No hypothesis in a set survived, so there is no new variant."""

    def __init__(self, message: str, skipped: Sequence[tuple["Hypothesis", str]] = ()):
        super().__init__(message)
        self.skipped = list(skipped)


def _require(payload: Mapping[str, Any], *keys: str) -> None:
    for k in keys:
        v = payload.get(k)
        if not isinstance(v, str) or not v.strip():
            raise HypothesisError(f"payload needs a nonempty string {k!r}")


def _str_list(value: Any, name: str) -> list[str]:
    if not isinstance(value, (list, tuple)) or not all(isinstance(x, str) for x in value):
        raise HypothesisError(f"{name!r} must be a list of strings")
    return list(value)


def _check_payload(kind: str, p: Mapping[str, Any]) -> None:
    if kind == "AddAgent":
        agent = p.get("agent")
        if not isinstance(agent, Mapping):
            raise HypothesisError("AddAgent payload needs an 'agent' object")
        _require(agent, "agent_id", "role")
        _str_list(agent.get("tools", []), "tools")
    elif kind == "ModifyAgent":
        _require(p, "agent_id")
        if not any(k in p for k in _AGENT_EDIT_FIELDS):
            raise HypothesisError("ModifyAgent needs at least one of role/goal/backstory")
        if "role" in p:
            _require(p, "role")
    elif kind == "RemoveAgent":
        _require(p, "agent_id")
    elif kind == "AddTask":
        task = p.get("task")
        if not isinstance(task, Mapping):
            raise HypothesisError("AddTask payload needs a 'task' object")
        _require(task, "task_id", "agent_id")
        _str_list(task.get("dependencies", []), "dependencies")
        _str_list(task.get("tools", []), "tools")
    elif kind == "RedefineTask":
        _require(p, "task_id")
        if not any(k in p for k in _TASK_EDIT_FIELDS):
            raise HypothesisError("RedefineTask needs at least one field to change")
        if "agent_id" in p:
            _require(p, "agent_id")
        for k in ("dependencies", "tools"):
            if k in p:
                _str_list(p[k], k)
    elif kind == "ReassignTask":
        _require(p, "task_id", "agent_id")
    elif kind in ("AddDependency", "RemoveDependency"):
        _require(p, "task_id", "depends_on")
    elif kind == "SetTools":
        if p.get("target") not in ("agent", "task"):
            raise HypothesisError("SetTools target must be 'agent' or 'task'")
        _require(p, "id")
        _str_list(p.get("tools"), "tools")
    else:
        raise HypothesisError(f"unknown hypothesis kind {kind!r}")


def _freeze(value: Any) -> Any:
    if isinstance(value, Mapping):
        return tuple(sorted((k, _freeze(v)) for k, v in value.items()))
    if isinstance(value, (list, tuple)):
        return tuple(_freeze(v) for v in value)
    return value


@dataclass(frozen=True, eq=False)
class Hypothesis:
    kind: str
    payload: Mapping[str, Any]
    rationale: str

    def __post_init__(self) -> None:
        if not isinstance(self.payload, Mapping):
            raise HypothesisError("payload must be an object")
        if not isinstance(self.rationale, str) or not self.rationale.strip():
            raise HypothesisError("rationale must be nonempty")
        _check_payload(self.kind, self.payload)
        object.__setattr__(self, "payload", json.loads(json.dumps(self.payload)))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Hypothesis):
            return NotImplemented
        return self.to_dict() == other.to_dict()

    def __hash__(self) -> int:
        return hash((self.kind, _freeze(self.payload), self.rationale))

    def to_dict(self) -> dict[str, Any]:
        return {"kind": self.kind, "payload": self.payload, "rationale": self.rationale}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "Hypothesis":
        if not isinstance(d, Mapping):
            raise HypothesisError("hypothesis must be an object")
        return cls(d.get("kind"), d.get("payload"), d.get("rationale"))

    def describe(self) -> str:
        p = self.payload
        if self.kind == "AddAgent":
            a = p["agent"]
            tools = ", ".join(sorted(a.get("tools", []))) or "none"
            return f"Add agent `{a['agent_id']}`: {a['role']} (tools: {tools})"
        if self.kind == "AddTask":
            t = p["task"]
            deps = ", ".join(t.get("dependencies", [])) or "none"
            return f"Add task `{t['task_id']}` for `{t['agent_id']}` (depends on: {deps})"
        if self.kind == "SetTools":
            return f"Set tools of {p['target']} `{p['id']}` to {', '.join(sorted(p['tools'])) or 'none'}"
        if self.kind in ("AddDependency", "RemoveDependency"):
            verb = "depend on" if self.kind == "AddDependency" else "stop depending on"
            return f"Make task `{p['task_id']}` {verb} `{p['depends_on']}`"
        if self.kind == "ReassignTask":
            return f"Reassign task `{p['task_id']}` to `{p['agent_id']}`"
        if self.kind == "RedefineTask":
            fields_ = ", ".join(k for k in _TASK_EDIT_FIELDS if k in p)
            return f"Redefine task `{p['task_id']}` ({fields_})"
        if self.kind == "RemoveAgent":
            return f"Remove agent `{p['agent_id']}`"
        return f"Modify agent `{p['agent_id']}` ({', '.join(k for k in _AGENT_EDIT_FIELDS if k in p)})"


@dataclass(frozen=True)
class HypothesisSet:
    hypotheses: tuple[Hypothesis, ...]
    source_evaluation: EvaluationReport | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "hypotheses", tuple(self.hypotheses))
        if not self.hypotheses:
            raise HypothesisError("a hypothesis set must be nonempty")

    def __len__(self) -> int:
        return len(self.hypotheses)

    def __iter__(self):
        return iter(self.hypotheses)


def parse_hypotheses(records: Iterable[Any]) -> tuple[list[Hypothesis], list[str]]:
    """Validate raw records; invalid ones are dropped and reported as warnings."""
    good, warnings = [], []
    for i, rec in enumerate(records):
        try:
            good.append(Hypothesis.from_dict(rec))
        except (HypothesisError, TypeError) as exc:
            msg = f"dropping hypothesis {i}: {exc}"
            log.warning(msg)
            warnings.append(msg)
    return good, warnings


def hypothesis_prompts(evaluation: EvaluationReport, spec: SystemSpec, prompt_dir=None) -> tuple[str, str]:
    ranked = sorted(evaluation.per_criterion.items(), key=lambda kv: (kv[1]["score"], kv[0]))
    lines = [f"- {name}: {v['score']:.3f}. {v['rationale']}".rstrip() for name, v in ranked]
    return prompt_pair(
        "hypothesize.txt", prompt_dir,
        schema=load_template("hypothesis_schema.md", prompt_dir).strip(),
        spec=canonicalize(spec).strip(),
        evaluation="\n".join(lines),
        aggregate=f"{evaluation.aggregate:.4f}",
    )


def generate_hypotheses(evaluation: EvaluationReport, spec: SystemSpec, gateway: Gateway,
                        branching: int = 1, *, temperature: float | None = None,
                        prompt_dir=None) -> list[HypothesisSet]:
    if branching < 1:
        raise ValueError("branching must be >= 1")
    system, user = hypothesis_prompts(evaluation, spec, prompt_dir)
    if temperature is None:
        temperature = gateway.config.hypothesis_temperature
    sets: list[HypothesisSet] = []
    for i in range(branching):
        try:
            records = gateway.complete_structured(system, user, "hypothesis-list", temperature).data
        except GatewayError as exc:
            log.warning("hypothesis call %d failed: %s", i + 1, exc)
            continue
        hyps, _ = parse_hypotheses(records)
        if hyps:
            sets.append(HypothesisSet(tuple(hyps), evaluation))
        else:
            log.warning("hypothesis call %d produced no valid hypotheses", i + 1)
    if not sets:
        raise GenerationError(f"no usable hypotheses from {branching} call(s)")
    return sets


# -- modification --------------------------------------------------------------

def _agent_from(d: Mapping[str, Any]) -> AgentSpec:
    return AgentSpec.from_dict(d)


def _task_from(d: Mapping[str, Any]) -> TaskSpec:
    return TaskSpec.from_dict({"description": "", "expected_output": "", **d})


def _replace_task(spec: SystemSpec, task_id: str, **changes: Any) -> SystemSpec:
    if task_id not in spec.task_ids:
        raise HypothesisError(f"no task {task_id!r}")
    return replace(spec, tasks=tuple(replace(t, **changes) if t.task_id == task_id else t for t in spec.tasks))


def _replace_agent(spec: SystemSpec, agent_id: str, **changes: Any) -> SystemSpec:
    if agent_id not in spec.agent_ids:
        raise HypothesisError(f"no agent {agent_id!r}")
    return replace(spec, agents=tuple(replace(a, **changes) if a.agent_id == agent_id else a for a in spec.agents))


def apply_one(spec: SystemSpec, h: Hypothesis) -> SystemSpec:
    """Apply a single hypothesis without validating the result."""
    p = h.payload
    k = h.kind
    if k == "AddAgent":
        agent = _agent_from(p["agent"])
        if agent.agent_id in spec.agent_ids:
            raise HypothesisError(f"agent {agent.agent_id!r} already exists")
        return replace(spec, agents=spec.agents + (agent,))
    if k == "ModifyAgent":
        changes = {f: normalize_text(p[f]) for f in _AGENT_EDIT_FIELDS if f in p}
        return _replace_agent(spec, p["agent_id"], **changes)
    if k == "RemoveAgent":
        if p["agent_id"] not in spec.agent_ids:
            raise HypothesisError(f"no agent {p['agent_id']!r}")
        return replace(spec, agents=tuple(a for a in spec.agents if a.agent_id != p["agent_id"]))
    if k == "AddTask":
        task = _task_from(p["task"])
        if task.task_id in spec.task_ids:
            raise HypothesisError(f"task {task.task_id!r} already exists")
        return replace(spec, tasks=spec.tasks + (task,))
    if k == "RedefineTask":
        changes: dict[str, Any] = {}
        for f in ("description", "expected_output"):
            if f in p:
                changes[f] = normalize_text(p[f])
        if "agent_id" in p:
            changes["agent_id"] = p["agent_id"]
        if "dependencies" in p:
            changes["dependencies"] = tuple(p["dependencies"])
        if "tools" in p:
            changes["tools"] = frozenset(p["tools"])
        return _replace_task(spec, p["task_id"], **changes)
    if k == "ReassignTask":
        return _replace_task(spec, p["task_id"], agent_id=p["agent_id"])
    if k in ("AddDependency", "RemoveDependency"):
        if p["task_id"] not in spec.task_ids:
            raise HypothesisError(f"no task {p['task_id']!r}")
        deps = set(spec.task(p["task_id"]).dependencies)
        if k == "AddDependency":
            deps.add(p["depends_on"])
        else:
            deps.discard(p["depends_on"])
        return _replace_task(spec, p["task_id"], dependencies=tuple(sorted(deps)))
    if k == "SetTools":
        tools = frozenset(p["tools"])
        if p["target"] == "agent":
            return _replace_agent(spec, p["id"], tools=tools)
        return _replace_task(spec, p["id"], tools=tools)
    raise HypothesisError(f"unknown kind {k!r}")


@dataclass(frozen=True)
class Modification:
    spec: SystemSpec
    applied: tuple[Hypothesis, ...]
    skipped: tuple[tuple[Hypothesis, str], ...] = field(default=())


def modify(spec: SystemSpec, hset: HypothesisSet | Iterable[Hypothesis]) -> Modification:
    """Apply hypotheses in order, skipping any that would break an invariant or change nothing."""
    require_valid(spec)
    current = spec
    current_text = canonicalize(spec)
    applied: list[Hypothesis] = []
    skipped: list[tuple[Hypothesis, str]] = []
    for h in hset:
        try:
            candidate = apply_one(current, h)
        except HypothesisError as exc:
            reason = str(exc)
        else:
            violations = validate_spec(candidate)
            if violations:
                reason = "; ".join(map(str, violations))
            else:
                text = canonicalize(candidate)
                if text == current_text:
                    reason = "no effect"
                else:
                    current, current_text = candidate, text
                    applied.append(h)
                    continue
        log.warning("skipping %s: %s", h.kind, reason)
        skipped.append((h, reason))
    if not applied or current_text == canonicalize(spec):
        raise ApplyError("no hypothesis survived application", skipped)
    return Modification(current, tuple(applied), tuple(skipped))


def apply(spec: SystemSpec, hset: HypothesisSet | Iterable[Hypothesis]) -> SystemSpec:
    return modify(spec, hset).spec
