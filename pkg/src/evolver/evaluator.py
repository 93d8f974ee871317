"""Criteria derivation, LLM judging and the aggregate score."""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

from .executor import ExecutionResult
from .gateway import Gateway, GatewayError, StructuredOutputError
from .model import SystemSpec, normalize_text
from .prompts import prompt_pair

log = logging.getLogger(__name__)

QUALITATIVE = "qualitative"
QUANTITATIVE = "quantitative"
HIGHER_BETTER = "higher-better"
LOWER_BETTER = "lower-better"
JUDGE_FAILURE = "judge-failure"


@dataclass(frozen=True)
class Criterion:
    name: str
    description: str = ""
    kind: str = QUALITATIVE
    direction: str = HIGHER_BETTER
    weight: float = 1.0

    def __post_init__(self) -> None:
        if not self.name:
            raise ValueError("criterion name must be nonempty")
        if self.kind not in (QUALITATIVE, QUANTITATIVE):
            raise ValueError(f"bad criterion kind {self.kind!r}")
        if self.direction not in (HIGHER_BETTER, LOWER_BETTER):
            raise ValueError(f"bad criterion direction {self.direction!r}")
        if not self.weight > 0:
            raise ValueError("criterion weight must be > 0")

    def to_dict(self) -> dict[str, Any]:
        d = {"name": self.name, "description": self.description, "kind": self.kind, "weight": self.weight}
        if self.kind == QUANTITATIVE:
            d["direction"] = self.direction
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, Any], kind: str | None = None) -> "Criterion":
        return cls(
            name=str(d["name"]).strip(),
            description=normalize_text(d.get("description", "")),
            kind=kind or d.get("kind", QUALITATIVE),
            direction=d.get("direction", HIGHER_BETTER),
            weight=float(d.get("weight", 1.0)),
        )


DEFAULT_QUALITATIVE = (
    Criterion("clarity", "The output is clearly written, well organised and easy to follow."),
    Criterion("relevance", "The output addresses the system's objective and stays on task."),
    Criterion("depth_of_analysis", "The output goes beyond surface observations with specific, supported reasoning."),
    Criterion("actionability", "The output gives concrete next steps or recommendations a reader can act on."),
)
DEFAULT_QUANTITATIVE = (
    Criterion("execution_time", "Wall-clock time to run the workflow, in seconds.", QUANTITATIVE, LOWER_BETTER),
    Criterion("task_completion_rate", "Share of tasks that completed.", QUANTITATIVE, HIGHER_BETTER),
)


@dataclass(frozen=True)
class CriteriaSet:
    qualitative: tuple[Criterion, ...]
    quantitative: tuple[Criterion, ...] = ()
    quant_blend: float = 0.0

    def __post_init__(self) -> None:
        # Stored sorted by name so equality and digest ignore listing order.
        object.__setattr__(self, "qualitative", tuple(sorted(self.qualitative, key=lambda c: c.name)))
        object.__setattr__(self, "quantitative", tuple(sorted(self.quantitative, key=lambda c: c.name)))
        if not self.qualitative:
            raise ValueError("a criteria set needs at least one qualitative criterion")
        if not 0.0 <= self.quant_blend <= 1.0:
            raise ValueError("quant_blend must be in [0, 1]")
        names = [c.name for c in self.all]
        if len(names) != len(set(names)):
            raise ValueError("criterion names must be unique")
        if any(c.kind != QUALITATIVE for c in self.qualitative) or any(
            c.kind != QUANTITATIVE for c in self.quantitative
        ):
            raise ValueError("criterion kind does not match its list")

    @property
    def all(self) -> tuple[Criterion, ...]:
        return self.qualitative + self.quantitative

    @property
    def names(self) -> list[str]:
        return sorted(c.name for c in self.all)

    @classmethod
    def defaults(cls, quant_blend: float = 0.0) -> "CriteriaSet":
        return cls(DEFAULT_QUALITATIVE, DEFAULT_QUANTITATIVE, quant_blend)

    def to_dict(self) -> dict[str, Any]:
        return {
            "qualitative": [c.to_dict() for c in self.qualitative],
            "quantitative": [c.to_dict() for c in self.quantitative],
            "quant_blend": self.quant_blend,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "CriteriaSet":
        return cls(
            qualitative=tuple(Criterion.from_dict(c, QUALITATIVE) for c in d["qualitative"]),
            quantitative=tuple(Criterion.from_dict(c, QUANTITATIVE) for c in d.get("quantitative", ())),
            quant_blend=float(d.get("quant_blend", 0.0)),
        )

    def digest(self) -> str:
        text = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(text.encode()).hexdigest()[:16]


def save_criteria(criteria: CriteriaSet, path: str | Path) -> None:
    Path(path).write_text(json.dumps(criteria.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_criteria(path: str | Path) -> CriteriaSet:
    return CriteriaSet.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


@dataclass(frozen=True)
class EvaluationReport:
    """Per-criterion scores in [0, 1] with rationales, raw measurements, and the aggregate."""

    per_criterion: Mapping[str, Mapping[str, Any]]
    quantitative_raw: Mapping[str, float]
    aggregate: float
    warnings: tuple[str, ...] = ()

    def score(self, name: str) -> float:
        return self.per_criterion[name]["score"]

    def rationale(self, name: str) -> str:
        return self.per_criterion[name]["rationale"]

    def to_dict(self) -> dict[str, Any]:
        return {
            "per_criterion": {k: dict(v) for k, v in sorted(self.per_criterion.items())},
            "quantitative_raw": dict(sorted(self.quantitative_raw.items())),
            "aggregate": self.aggregate,
            "warnings": list(self.warnings),
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "EvaluationReport":
        return cls(
            per_criterion={k: {"score": float(v["score"]), "rationale": v["rationale"]}
                           for k, v in d["per_criterion"].items()},
            quantitative_raw={k: float(v) for k, v in d.get("quantitative_raw", {}).items()},
            aggregate=float(d["aggregate"]),
            warnings=tuple(d.get("warnings", ())),
        )


def _weighted_mean(pairs: Iterable[tuple[float, float]]) -> float:
    pairs = list(pairs)
    return math.fsum(s * w for s, w in pairs) / math.fsum(w for _, w in pairs)


def aggregate(scores: Mapping[str, float], criteria: CriteriaSet) -> float:
    """Blend the weighted qualitative mean with the weighted normalized-quantitative mean.

    ``scores`` maps criterion name to a score in [0, 1]; quantitative entries must already
    be normalized. Missing quantitative scores drop out of their mean.
    """
    qual = _weighted_mean((scores[c.name], c.weight) for c in criteria.qualitative)
    quant_pairs = [(scores[c.name], c.weight) for c in criteria.quantitative if c.name in scores]
    if criteria.quant_blend == 0.0 or not quant_pairs:
        value = qual
    else:
        value = (1.0 - criteria.quant_blend) * qual + criteria.quant_blend * _weighted_mean(quant_pairs)
    return min(1.0, max(0.0, value))


def normalize_quant(name: str, value: float, history: Sequence[float], direction: str = HIGHER_BETTER) -> float:
    """Min-max scale ``value`` against every value seen this run; constant history gives 0.5."""
    observed = [*history, value]
    lo, hi = min(observed), max(observed)
    if hi == lo:
        return 0.5
    scaled = (value - lo) / (hi - lo)
    return 1.0 - scaled if direction == LOWER_BETTER else scaled


def measure(result: ExecutionResult) -> dict[str, float]:
    return {"execution_time": result.total_time, "task_completion_rate": result.completion_rate}


class QuantHistory:
    """Per-metric values observed so far in a run, baseline first."""

    def __init__(self, initial: Mapping[str, Sequence[float]] | None = None):
        self.values: dict[str, list[float]] = {k: list(v) for k, v in (initial or {}).items()}

    def observe(self, raw: Mapping[str, float]) -> None:
        for k, v in raw.items():
            self.values.setdefault(k, []).append(v)

    def get(self, name: str) -> list[float]:
        return self.values.get(name, [])


def _describe_agents(spec: SystemSpec) -> str:
    return "\n".join(
        f"- {a.agent_id}: {a.role}. Goal: {a.goal or '-'}. Tools: {', '.join(sorted(a.tools)) or 'none'}"
        for a in sorted(spec.agents, key=lambda a: a.agent_id)
    )


def _describe_tasks(spec: SystemSpec) -> str:
    return "\n".join(
        f"- {t.task_id} (agent {t.agent_id}; depends on {', '.join(sorted(t.dependencies)) or 'nothing'}): "
        f"{t.description} Expected output: {t.expected_output}"
        for t in sorted(spec.tasks, key=lambda t: t.task_id)
    )


def derive_criteria(spec: SystemSpec, gateway: Gateway, *, quant_blend: float = 0.0,
                    prompt_dir=None) -> CriteriaSet:
    system, user = prompt_pair(
        "derive_criteria.txt", prompt_dir,
        name=spec.name, objective=spec.objective,
        agents=_describe_agents(spec), tasks=_describe_tasks(spec),
    )
    extra: list[Criterion] = []
    try:
        parsed = gateway.complete_structured(system, user, "criteria-set")
        for item in parsed.data:
            try:
                extra.append(Criterion.from_dict(item, QUALITATIVE))
            except (KeyError, TypeError, ValueError) as exc:
                log.warning("dropping proposed criterion %r: %s", item, exc)
    except GatewayError as exc:
        log.warning("criteria derivation failed, using defaults only: %s", exc)

    reserved = {c.name for c in DEFAULT_QUALITATIVE + DEFAULT_QUANTITATIVE}
    qualitative = list(DEFAULT_QUALITATIVE)
    seen = set(reserved)
    for c in extra:
        if c.name not in seen:
            qualitative.append(c)
            seen.add(c.name)
    return CriteriaSet(tuple(qualitative), DEFAULT_QUANTITATIVE, quant_blend)


def judge_prompts(spec_objective: str, criterion: Criterion, output: str, prompt_dir=None) -> tuple[str, str]:
    return prompt_pair(
        "judge.txt", prompt_dir,
        objective=spec_objective or "(unspecified)",
        criterion=criterion.name, description=criterion.description, output=output,
    )


def evaluate(output: ExecutionResult, criteria: CriteriaSet, gateway: Gateway, *,
             objective: str = "", history: QuantHistory | None = None, prompt_dir=None) -> EvaluationReport:
    """Judge the final output once per qualitative criterion and fold in measured metrics."""
    per: dict[str, dict[str, Any]] = {}
    warnings: list[str] = []
    for c in sorted(criteria.qualitative, key=lambda c: c.name):
        system, user = judge_prompts(objective, c, output.final_output, prompt_dir)
        try:
            verdict = gateway.complete_structured(system, user, "evaluation-report").data
        except StructuredOutputError as exc:
            msg = f"{c.name}: judge output unparseable ({exc}); scored 0.0"
            log.warning(msg)
            warnings.append(msg)
            per[c.name] = {"score": 0.0, "rationale": JUDGE_FAILURE}
            continue
        score = verdict["score"]
        if not 0.0 <= score <= 1.0:
            clamped = min(1.0, max(0.0, score))
            msg = f"{c.name}: score {score} outside [0, 1], clamped to {clamped}"
            log.warning(msg)
            warnings.append(msg)
            score = clamped
        per[c.name] = {"score": score, "rationale": verdict["rationale"]}

    raw = measure(output)
    history = history or QuantHistory()
    for c in criteria.quantitative:
        if c.name not in raw:
            continue
        norm = normalize_quant(c.name, raw[c.name], history.get(c.name), c.direction)
        per[c.name] = {"score": norm, "rationale": f"measured {raw[c.name]:.6g} ({c.direction})"}

    scores = {k: v["score"] for k, v in per.items()}
    return EvaluationReport(dict(sorted(per.items())), raw, aggregate(scores, criteria), tuple(warnings))


def report_from_scores(scores: Mapping[str, float], criteria: CriteriaSet,
                       rationales: Mapping[str, str] | None = None,
                       quantitative_raw: Mapping[str, float] | None = None) -> EvaluationReport:
    """Build a report directly from known scores (synthetic judges, fixtures)."""
    rationales = rationales or {}
    per = {k: {"score": float(v), "rationale": rationales.get(k, "")} for k, v in sorted(scores.items())}
    return EvaluationReport(per, dict(quantitative_raw or {}), aggregate(scores, criteria))
