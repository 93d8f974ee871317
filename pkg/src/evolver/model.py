"""Variant data model: agent/task specs, validation, canonical JSON and diffing."""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, field, replace
from graphlib import CycleError, TopologicalSorter
from typing import Any, Iterable, Mapping, Sequence, Union

_WS = re.compile(r"\s+")


class SpecError(ValueError):
    """Raised when a spec cannot be parsed or fails validation where validity is required."""

    def __init__(self, message: str, violations: Sequence["Violation"] = ()):
        super().__init__(message)
        self.violations = list(violations)


def normalize_text(text: str | None) -> str:
    return _WS.sub(" ", text or "").strip()


@dataclass(frozen=True)
class AgentSpec:
    agent_id: str
    role: str
    goal: str = ""
    backstory: str = ""
    tools: frozenset[str] = frozenset()

    def __post_init__(self) -> None:
        object.__setattr__(self, "tools", frozenset(self.tools))

    def to_dict(self) -> dict[str, Any]:
        return {
            "agent_id": self.agent_id,
            "role": normalize_text(self.role),
            "goal": normalize_text(self.goal),
            "backstory": normalize_text(self.backstory),
            "tools": sorted(self.tools),
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "AgentSpec":
        return cls(
            agent_id=str(data["agent_id"]),
            role=normalize_text(data.get("role", "")),
            goal=normalize_text(data.get("goal", "")),
            backstory=normalize_text(data.get("backstory", "")),
            tools=frozenset(str(t) for t in data.get("tools") or ()),
        )


@dataclass(frozen=True)
class TaskSpec:
    task_id: str
    description: str
    expected_output: str
    agent_id: str
    dependencies: tuple[str, ...] = ()
    tools: frozenset[str] = frozenset()

    def __post_init__(self) -> None:
        object.__setattr__(self, "dependencies", tuple(dict.fromkeys(self.dependencies)))
        object.__setattr__(self, "tools", frozenset(self.tools))

    def to_dict(self) -> dict[str, Any]:
        return {
            "task_id": self.task_id,
            "description": normalize_text(self.description),
            "expected_output": normalize_text(self.expected_output),
            "agent_id": self.agent_id,
            "dependencies": sorted(set(self.dependencies)),
            "tools": sorted(self.tools),
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "TaskSpec":
        return cls(
            task_id=str(data["task_id"]),
            description=normalize_text(data.get("description", "")),
            expected_output=normalize_text(data.get("expected_output", "")),
            agent_id=str(data["agent_id"]),
            dependencies=tuple(str(d) for d in data.get("dependencies") or ()),
            tools=frozenset(str(t) for t in data.get("tools") or ()),
        )


@dataclass(frozen=True)
class SystemSpec:
    """One configuration of an agent system: agents, a task DAG and metadata."""

    name: str
    objective: str
    agents: tuple[AgentSpec, ...]
    tasks: tuple[TaskSpec, ...]
    metadata: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        object.__setattr__(self, "agents", tuple(self.agents))
        object.__setattr__(self, "tasks", tuple(self.tasks))
        object.__setattr__(self, "metadata", dict(self.metadata))

    def agent(self, agent_id: str) -> AgentSpec:
        for a in self.agents:
            if a.agent_id == agent_id:
                return a
        raise KeyError(agent_id)

    def task(self, task_id: str) -> TaskSpec:
        for t in self.tasks:
            if t.task_id == task_id:
                return t
        raise KeyError(task_id)

    @property
    def agent_ids(self) -> set[str]:
        return {a.agent_id for a in self.agents}

    @property
    def task_ids(self) -> set[str]:
        return {t.task_id for t in self.tasks}

    def to_dict(self) -> dict[str, Any]:
        return {
            "name": normalize_text(self.name),
            "objective": normalize_text(self.objective),
            "agents": [a.to_dict() for a in sorted(self.agents, key=lambda a: a.agent_id)],
            "tasks": [t.to_dict() for t in sorted(self.tasks, key=lambda t: t.task_id)],
            "metadata": {str(k): normalize_text(str(v)) for k, v in sorted(self.metadata.items())},
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "SystemSpec":
        if not isinstance(data, Mapping):
            raise SpecError("spec document must be a JSON object")
        missing = [k for k in ("name", "objective", "agents", "tasks") if k not in data]
        if missing:
            raise SpecError(f"spec document missing keys: {', '.join(missing)}")
        try:
            return cls(
                name=normalize_text(data["name"]),
                objective=normalize_text(data["objective"]),
                agents=tuple(AgentSpec.from_dict(a) for a in data["agents"]),
                tasks=tuple(TaskSpec.from_dict(t) for t in data["tasks"]),
                metadata={str(k): str(v) for k, v in (data.get("metadata") or {}).items()},
            )
        except (KeyError, TypeError, AttributeError) as exc:
            raise SpecError(f"malformed spec document: {exc!r}") from exc


@dataclass(frozen=True)
class Violation:
    rule: str
    subject: str
    detail: str = ""

    def __str__(self) -> str:
        tail = f": {self.detail}" if self.detail else ""
        return f"{self.rule} [{self.subject}]{tail}"


def validate_spec(spec: SystemSpec) -> list[Violation]:
    """Return every broken invariant; an empty list means the spec is valid."""
    out: list[Violation] = []
    if not spec.agents:
        out.append(Violation("no agents", spec.name))
    if not spec.tasks:
        out.append(Violation("no tasks", spec.name))

    seen: set[str] = set()
    for a in spec.agents:
        if not a.agent_id:
            out.append(Violation("empty agent id", "<agent>"))
        elif a.agent_id in seen:
            out.append(Violation("duplicate agent id", a.agent_id))
        seen.add(a.agent_id)
        if not normalize_text(a.role):
            out.append(Violation("empty role", a.agent_id))

    agent_ids = spec.agent_ids
    task_ids: set[str] = set()
    for t in spec.tasks:
        if not t.task_id:
            out.append(Violation("empty task id", "<task>"))
        elif t.task_id in task_ids:
            out.append(Violation("duplicate task id", t.task_id))
        task_ids.add(t.task_id)

    for t in spec.tasks:
        if t.agent_id not in agent_ids:
            out.append(Violation("unresolved agent", t.task_id, t.agent_id))
        for dep in t.dependencies:
            if dep == t.task_id:
                out.append(Violation("self dependency", t.task_id))
            elif dep not in task_ids:
                out.append(Violation("unresolved dependency", t.task_id, dep))

    graph = {
        t.task_id: {d for d in t.dependencies if d in task_ids and d != t.task_id}
        for t in spec.tasks
    }
    try:
        TopologicalSorter(graph).prepare()
    except CycleError as exc:
        cycle = exc.args[1]
        out.append(Violation("cycle", cycle[0], " -> ".join(cycle)))
    return out


def is_valid(spec: SystemSpec) -> bool:
    return not validate_spec(spec)


def require_valid(spec: SystemSpec) -> None:
    violations = validate_spec(spec)
    if violations:
        raise SpecError("invalid spec: " + "; ".join(map(str, violations)), violations)


def canonicalize(spec: SystemSpec) -> str:
    require_valid(spec)
    return json.dumps(spec.to_dict(), indent=2, sort_keys=True, ensure_ascii=False) + "\n"


def parse_spec(text: str) -> SystemSpec:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SpecError(f"spec is not valid JSON: {exc}") from exc
    return SystemSpec.from_dict(data)


def load_spec(path) -> SystemSpec:
    with open(path, encoding="utf-8") as fh:
        return parse_spec(fh.read())


def spec_hash(spec: SystemSpec) -> str:
    return hashlib.sha256(canonicalize(spec).encode("utf-8")).hexdigest()[:16]


def canonically_equal(a: SystemSpec, b: SystemSpec) -> bool:
    return canonicalize(a) == canonicalize(b)


@dataclass(frozen=True)
class Variant:
    variant_id: str
    spec: SystemSpec
    parent_id: str | None = None
    applied_hypotheses: tuple = ()
    iteration: int = 0

    def __post_init__(self) -> None:
        if self.iteration < 0:
            raise ValueError("iteration must be >= 0")
        if (self.iteration == 0) != (self.parent_id is None):
            raise ValueError("iteration 0 iff no parent")

    @classmethod
    def create(cls, spec: SystemSpec, parent_id: str | None = None,
               applied_hypotheses: Iterable = (), iteration: int = 0) -> "Variant":
        return cls(spec_hash(spec), spec, parent_id, tuple(applied_hypotheses), iteration)


# -- structural diff -----------------------------------------------------------

@dataclass(frozen=True)
class AddedAgent:
    agent: AgentSpec


@dataclass(frozen=True)
class RemovedAgent:
    agent_id: str


@dataclass(frozen=True)
class ModifiedAgent:
    agent_id: str
    changes: Mapping[str, tuple[Any, Any]]


@dataclass(frozen=True)
class AddedTask:
    task: TaskSpec


@dataclass(frozen=True)
class RemovedTask:
    task_id: str


@dataclass(frozen=True)
class ModifiedTask:
    """Scalar or tool changes on a task; dependency edges are reported separately."""

    task_id: str
    changes: Mapping[str, tuple[Any, Any]]


@dataclass(frozen=True)
class AddedDependency:
    task_id: str
    depends_on: str


@dataclass(frozen=True)
class RemovedDependency:
    task_id: str
    depends_on: str


@dataclass(frozen=True)
class ModifiedSystem:
    field: str
    old: Any
    new: Any


Change = Union[AddedAgent, RemovedAgent, ModifiedAgent, AddedTask, RemovedTask,
               ModifiedTask, AddedDependency, RemovedDependency, ModifiedSystem]

_AGENT_FIELDS = ("role", "goal", "backstory", "tools")
_TASK_FIELDS = ("description", "expected_output", "agent_id", "tools")


def _field_delta(old: Mapping[str, Any], new: Mapping[str, Any], names: Sequence[str]):
    return {n: (old[n], new[n]) for n in names if old[n] != new[n]}


def diff_specs(a: SystemSpec, b: SystemSpec) -> list[Change]:
    """Structural changes turning ``a`` into ``b``, in a deterministic order."""
    da, db = a.to_dict(), b.to_dict()
    changes: list[Change] = []
    for key in ("name", "objective", "metadata"):
        if da[key] != db[key]:
            changes.append(ModifiedSystem(key, da[key], db[key]))

    agents_a = {x["agent_id"]: x for x in da["agents"]}
    agents_b = {x["agent_id"]: x for x in db["agents"]}
    for aid in sorted(agents_a.keys() - agents_b.keys()):
        changes.append(RemovedAgent(aid))
    for aid in sorted(agents_b.keys() - agents_a.keys()):
        changes.append(AddedAgent(AgentSpec.from_dict(agents_b[aid])))
    for aid in sorted(agents_a.keys() & agents_b.keys()):
        delta = _field_delta(agents_a[aid], agents_b[aid], _AGENT_FIELDS)
        if delta:
            changes.append(ModifiedAgent(aid, delta))

    tasks_a = {x["task_id"]: x for x in da["tasks"]}
    tasks_b = {x["task_id"]: x for x in db["tasks"]}
    for tid in sorted(tasks_a.keys() - tasks_b.keys()):
        changes.append(RemovedTask(tid))
    for tid in sorted(tasks_b.keys() - tasks_a.keys()):
        changes.append(AddedTask(TaskSpec.from_dict(tasks_b[tid])))
    for tid in sorted(tasks_a.keys() & tasks_b.keys()):
        ta, tb = tasks_a[tid], tasks_b[tid]
        delta = _field_delta(ta, tb, _TASK_FIELDS)
        if delta:
            changes.append(ModifiedTask(tid, delta))
        for dep in sorted(set(ta["dependencies"]) - set(tb["dependencies"])):
            changes.append(RemovedDependency(tid, dep))
        for dep in sorted(set(tb["dependencies"]) - set(ta["dependencies"])):
            changes.append(AddedDependency(tid, dep))
    return changes


def apply_changes(spec: SystemSpec, changes: Iterable[Change]) -> SystemSpec:
    """Replay a change list produced by :func:`diff_specs`."""
    doc = spec.to_dict()
    agents = {x["agent_id"]: x for x in doc["agents"]}
    tasks = {x["task_id"]: x for x in doc["tasks"]}
    for ch in changes:
        if isinstance(ch, ModifiedSystem):
            doc[ch.field] = ch.new
        elif isinstance(ch, AddedAgent):
            agents[ch.agent.agent_id] = ch.agent.to_dict()
        elif isinstance(ch, RemovedAgent):
            del agents[ch.agent_id]
        elif isinstance(ch, ModifiedAgent):
            agents[ch.agent_id].update({k: v[1] for k, v in ch.changes.items()})
        elif isinstance(ch, AddedTask):
            tasks[ch.task.task_id] = ch.task.to_dict()
        elif isinstance(ch, RemovedTask):
            del tasks[ch.task_id]
        elif isinstance(ch, ModifiedTask):
            tasks[ch.task_id].update({k: v[1] for k, v in ch.changes.items()})
        elif isinstance(ch, AddedDependency):
            tasks[ch.task_id]["dependencies"] = sorted({*tasks[ch.task_id]["dependencies"], ch.depends_on})
        elif isinstance(ch, RemovedDependency):
            tasks[ch.task_id]["dependencies"] = [
                d for d in tasks[ch.task_id]["dependencies"] if d != ch.depends_on
            ]
        else:
            raise TypeError(f"unknown change {ch!r}")
    doc["agents"] = list(agents.values())
    doc["tasks"] = list(tasks.values())
    return SystemSpec.from_dict(doc)


def describe_change(ch: Change) -> str:
    if isinstance(ch, AddedAgent):
        return f"Added agent `{ch.agent.agent_id}` ({ch.agent.role})"
    if isinstance(ch, RemovedAgent):
        return f"Removed agent `{ch.agent_id}`"
    if isinstance(ch, ModifiedAgent):
        return f"Modified agent `{ch.agent_id}`: " + _describe_fields(ch.changes)
    if isinstance(ch, AddedTask):
        return f"Added task `{ch.task.task_id}` (agent `{ch.task.agent_id}`)"
    if isinstance(ch, RemovedTask):
        return f"Removed task `{ch.task_id}`"
    if isinstance(ch, ModifiedTask):
        return f"Modified task `{ch.task_id}`: " + _describe_fields(ch.changes)
    if isinstance(ch, AddedDependency):
        return f"Task `{ch.task_id}` now depends on `{ch.depends_on}`"
    if isinstance(ch, RemovedDependency):
        return f"Task `{ch.task_id}` no longer depends on `{ch.depends_on}`"
    return f"Changed system {ch.field}"


def _describe_fields(changes: Mapping[str, tuple[Any, Any]]) -> str:
    parts = []
    for name, (old, new) in sorted(changes.items()):
        if isinstance(old, list):
            old, new = ", ".join(old) or "none", ", ".join(new) or "none"
        parts.append(f"{name} `{old}` -> `{new}`")
    return "; ".join(parts)


def with_agents(spec: SystemSpec, agents: Iterable[AgentSpec]) -> SystemSpec:
    return replace(spec, agents=tuple(agents))


def with_tasks(spec: SystemSpec, tasks: Iterable[TaskSpec]) -> SystemSpec:
    return replace(spec, tasks=tuple(tasks))
