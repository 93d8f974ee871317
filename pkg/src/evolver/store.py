"""Run directory persistence, candidate selection and the stopping rule."""

from __future__ import annotations

import json
import os
import shutil
import tempfile
from dataclasses import asdict, dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Iterator, Mapping, Sequence

from .evaluator import CriteriaSet, EvaluationReport, load_criteria, save_criteria
from .evolution import Hypothesis
from .executor import ExecutionResult
from .model import SystemSpec, Variant, canonicalize, parse_spec

EXECUTOR_MODES = ("workflow", "external")

# Keys whose values depend on wall-clock time; determinism checks ignore them.
TIMING_KEYS = frozenset({"created_at", "total_time", "per_task_latency", "execution_time", "latency"})


class StoreError(RuntimeError):
    pass


@dataclass(frozen=True)
class RunConfig:
    epsilon: float = 0.01
    max_iterations: int = 5
    patience: int = 1
    branching: int = 1
    executor_mode: str = "workflow"
    seed: int = 0
    external_command: str | None = None
    external_timeout: float = 300.0
    parallelism: int = 1

    def __post_init__(self) -> None:
        if not self.epsilon > 0:
            raise ValueError("epsilon must be > 0")
        for name in ("max_iterations", "patience", "branching", "parallelism"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.executor_mode not in EXECUTOR_MODES:
            raise ValueError(f"executor_mode must be one of {EXECUTOR_MODES}")
        if self.executor_mode == "external" and not self.external_command:
            raise ValueError("external executor needs external_command")
        if not self.external_timeout > 0:
            raise ValueError("external_timeout must be > 0")

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "RunConfig":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


@dataclass(frozen=True)
class IterationRecord:
    iteration: int
    candidate_variant_ids: tuple[str, ...]
    evaluations: Mapping[str, EvaluationReport]
    selected_best: str
    previous_best: str
    best_score_before: float
    best_score_after: float
    stopped: bool = False
    stop_reason: str | None = None
    stalled: bool = False
    notes: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "candidate_variant_ids", tuple(self.candidate_variant_ids))
        if self.best_score_after < self.best_score_before:
            raise ValueError("best score decreased")
        if self.selected_best not in (*self.candidate_variant_ids, self.previous_best):
            raise ValueError("selected best is neither a candidate nor the previous best")

    @property
    def improvement(self) -> float:
        return self.best_score_after - self.best_score_before

    def to_dict(self) -> dict[str, Any]:
        return {
            "iteration": self.iteration,
            "candidate_variant_ids": list(self.candidate_variant_ids),
            "evaluations": {k: v.to_dict() for k, v in sorted(self.evaluations.items())},
            "selected_best": self.selected_best,
            "previous_best": self.previous_best,
            "best_score_before": self.best_score_before,
            "best_score_after": self.best_score_after,
            "stopped": self.stopped,
            "stop_reason": self.stop_reason,
            "stalled": self.stalled,
            "notes": list(self.notes),
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "IterationRecord":
        return cls(
            iteration=int(d["iteration"]),
            candidate_variant_ids=tuple(d["candidate_variant_ids"]),
            evaluations={k: EvaluationReport.from_dict(v) for k, v in d["evaluations"].items()},
            selected_best=d["selected_best"],
            previous_best=d["previous_best"],
            best_score_before=float(d["best_score_before"]),
            best_score_after=float(d["best_score_after"]),
            stopped=bool(d.get("stopped", False)),
            stop_reason=d.get("stop_reason"),
            stalled=bool(d.get("stalled", False)),
            notes=tuple(d.get("notes", ())),
        )


# -- selection and stopping ----------------------------------------------------

def _rank_key(entry: tuple[Variant, EvaluationReport]):
    variant, report = entry
    return (-report.aggregate, report.quantitative_raw.get("execution_time", 0.0), variant.variant_id)


def rank_candidates(candidates: Sequence[tuple[Variant, EvaluationReport]]) -> list[tuple[Variant, EvaluationReport]]:
    return sorted(candidates, key=_rank_key)


def compare_and_select(candidates: Sequence[tuple[Variant, EvaluationReport]],
                       incumbent: tuple[Variant, EvaluationReport]) -> tuple[Variant, EvaluationReport]:
    """Top-ranked candidate if it strictly beats the incumbent, else the incumbent."""
    if not candidates:
        return incumbent
    top = rank_candidates(candidates)[0]
    return top if top[1].aggregate > incumbent[1].aggregate else incumbent


@dataclass(frozen=True)
class StopDecision:
    stop: bool
    reason: str | None = None

    def __bool__(self) -> bool:
        return self.stop


CONTINUE = StopDecision(False)


def should_stop(history: Sequence[IterationRecord], config: RunConfig) -> StopDecision:
    if not history:
        raise ValueError("history must be nonempty")
    if len(history) >= config.max_iterations:
        return StopDecision(True, "max_iterations")
    window = history[-config.patience:]
    if len(window) == config.patience and all(r.improvement < config.epsilon for r in window):
        return StopDecision(True, "converged")
    return CONTINUE


# -- run directory -------------------------------------------------------------

def _dump(data: Any) -> str:
    return json.dumps(data, indent=2, sort_keys=True, ensure_ascii=False) + "\n"


def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


class RunStore:
    """The on-disk record of one run.

    Layout::

        <root>/config.json  criteria.json  exchanges.log  best.json
        <root>/variants/<variant_id>/{spec.json,output.txt,evaluation.json,meta.json}
        <root>/iterations/<n>.json
        <root>/reports/
    """

    def __init__(self, root: str | os.PathLike):
        self.root = Path(root)

    @property
    def run_id(self) -> str:
        return self.root.resolve().name

    # paths
    @property
    def config_path(self) -> Path:
        return self.root / "config.json"

    @property
    def criteria_path(self) -> Path:
        return self.root / "criteria.json"

    @property
    def exchanges_path(self) -> Path:
        return self.root / "exchanges.log"

    @property
    def best_path(self) -> Path:
        return self.root / "best.json"

    @property
    def reports_dir(self) -> Path:
        return self.root / "reports"

    def variant_dir(self, variant_id: str) -> Path:
        return self.root / "variants" / variant_id

    def iteration_path(self, n: int) -> Path:
        return self.root / "iterations" / f"{n}.json"

    # lifecycle
    def initialize(self, baseline: SystemSpec, config: Mapping[str, Any] | None = None) -> Variant:
        for sub in ("variants", "iterations", "reports"):
            (self.root / sub).mkdir(parents=True, exist_ok=True)
        self.exchanges_path.touch()
        variant = Variant.create(baseline)
        doc = {"run_id": self.run_id, "baseline_variant_id": variant.variant_id, "run": dict(config or RunConfig().to_dict())}
        _atomic_write(self.config_path, _dump(doc))
        self.write_variant(variant)
        return variant

    def read_config(self) -> dict[str, Any]:
        return json.loads(self._read(self.config_path))

    def write_config(self, doc: Mapping[str, Any]) -> None:
        _atomic_write(self.config_path, _dump(doc))

    def run_config(self) -> RunConfig:
        return RunConfig.from_dict(self.read_config().get("run", {}))

    def baseline(self) -> Variant:
        return self.load_variant(self.read_config()["baseline_variant_id"])

    def write_criteria(self, criteria: CriteriaSet) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        save_criteria(criteria, self.criteria_path)

    def read_criteria(self) -> CriteriaSet:
        if not self.criteria_path.exists():
            raise StoreError(f"missing {self.criteria_path}")
        return load_criteria(self.criteria_path)

    def reset_run(self) -> None:
        """Drop everything a previous ``run`` produced, keeping the baseline spec."""
        baseline_id = self.read_config()["baseline_variant_id"]
        for d in (self.root / "variants").iterdir():
            if d.name != baseline_id:
                shutil.rmtree(d)
            else:
                for name in ("output.txt", "evaluation.json"):
                    (d / name).unlink(missing_ok=True)
        for sub in ("iterations", "reports"):
            for f in (self.root / sub).iterdir():
                shutil.rmtree(f) if f.is_dir() else f.unlink()
        self.best_path.unlink(missing_ok=True)
        if self.exchanges_path.exists():
            kept = [ln for ln in self.exchanges_path.read_text(encoding="utf-8").splitlines()
                    if ln.strip() and json.loads(ln).get("phase") != "run"]
            self.exchanges_path.write_text("".join(ln + "\n" for ln in kept), encoding="utf-8")

    # variants
    def write_variant(self, variant: Variant, result: ExecutionResult | None = None) -> None:
        d = self.variant_dir(variant.variant_id)
        d.mkdir(parents=True, exist_ok=True)
        _atomic_write(d / "spec.json", canonicalize(variant.spec))
        meta = {
            "variant_id": variant.variant_id,
            "parent_id": variant.parent_id,
            "iteration": variant.iteration,
            "applied_hypotheses": [h.to_dict() for h in variant.applied_hypotheses],
            "created_at": _now(),
        }
        if result is not None:
            meta["execution"] = result.to_dict()
        _atomic_write(d / "meta.json", _dump(meta))

    def persist(self, variant: Variant, result: ExecutionResult, evaluation: EvaluationReport,
                best: bool = False) -> list[Path]:
        try:
            self.write_variant(variant, result)
            d = self.variant_dir(variant.variant_id)
            _atomic_write(d / "output.txt", result.final_output)
            _atomic_write(d / "evaluation.json", _dump(evaluation.to_dict()))
            if best:
                self.mark_best(variant, evaluation)
        except OSError as exc:
            raise StoreError(f"could not persist variant {variant.variant_id}: {exc}") from exc
        d = self.variant_dir(variant.variant_id)
        return [d / n for n in ("spec.json", "output.txt", "evaluation.json", "meta.json")]

    def mark_best(self, variant: Variant, evaluation: EvaluationReport) -> None:
        _atomic_write(self.best_path, _dump({"variant_id": variant.variant_id, "aggregate": evaluation.aggregate}))

    def best(self) -> dict[str, Any]:
        return json.loads(self._read(self.best_path))

    def has_variant(self, variant_id: str) -> bool:
        return (self.variant_dir(variant_id) / "evaluation.json").exists()

    def load_variant(self, variant_id: str) -> Variant:
        d = self.variant_dir(variant_id)
        spec = parse_spec(self._read(d / "spec.json"))
        meta = json.loads(self._read(d / "meta.json"))
        hyps = tuple(Hypothesis.from_dict(h) for h in meta.get("applied_hypotheses", ()))
        return Variant(variant_id, spec, meta.get("parent_id"), hyps, int(meta.get("iteration", 0)))

    def load_meta(self, variant_id: str) -> dict[str, Any]:
        return json.loads(self._read(self.variant_dir(variant_id) / "meta.json"))

    def load_output(self, variant_id: str) -> str:
        return self._read(self.variant_dir(variant_id) / "output.txt")

    def load_evaluation(self, variant_id: str) -> EvaluationReport:
        return EvaluationReport.from_dict(json.loads(self._read(self.variant_dir(variant_id) / "evaluation.json")))

    def load_execution(self, variant_id: str) -> ExecutionResult | None:
        execution = self.load_meta(variant_id).get("execution")
        return ExecutionResult.from_dict(execution) if execution else None

    def variant_ids(self) -> list[str]:
        base = self.root / "variants"
        return sorted(p.name for p in base.iterdir() if p.is_dir()) if base.exists() else []

    def evaluated_variants(self) -> Iterator[tuple[str, EvaluationReport]]:
        for vid in self.variant_ids():
            if self.has_variant(vid):
                yield vid, self.load_evaluation(vid)

    def lineage(self, variant_id: str) -> list[str]:
        chain = [variant_id]
        seen = {variant_id}
        while True:
            parent = self.load_meta(chain[-1]).get("parent_id")
            if parent is None:
                return chain
            if parent in seen:
                raise StoreError(f"lineage loop at {parent}")
            chain.append(parent)
            seen.add(parent)

    # iterations
    def write_iteration(self, record: IterationRecord) -> Path:
        path = self.iteration_path(record.iteration)
        try:
            _atomic_write(path, _dump(record.to_dict()))
        except OSError as exc:
            raise StoreError(f"could not write {path}: {exc}") from exc
        return path

    def load_iteration(self, n: int) -> IterationRecord:
        return IterationRecord.from_dict(json.loads(self._read(self.iteration_path(n))))

    def iterations(self) -> list[IterationRecord]:
        base = self.root / "iterations"
        if not base.exists():
            return []
        ns = sorted(int(p.stem) for p in base.glob("*.json"))
        return [self.load_iteration(n) for n in ns]

    def write_report(self, name: str, text: str) -> Path:
        path = self.reports_dir / name
        _atomic_write(path, text)
        return path

    def _read(self, path: Path) -> str:
        try:
            return path.read_text(encoding="utf-8")
        except FileNotFoundError:
            raise StoreError(f"missing artifact: {path}") from None


def strip_timing(data: Any) -> Any:
    """Drop wall-clock dependent fields, recursively."""
    if isinstance(data, dict):
        return {k: strip_timing(v) for k, v in data.items() if k not in TIMING_KEYS}
    if isinstance(data, list):
        return [strip_timing(v) for v in data]
    return data


def snapshot(root: str | os.PathLike) -> dict[str, Any]:
    """Every file under a run directory, JSON parsed and timing-stripped, keyed by relative path."""
    root = Path(root)
    out: dict[str, Any] = {}
    for p in sorted(root.rglob("*")):
        if not p.is_file() or p.name.startswith("."):
            continue
        rel = p.relative_to(root).as_posix()
        text = p.read_text(encoding="utf-8")
        if p.suffix == ".json":
            out[rel] = strip_timing(json.loads(text))
        elif p.name == "exchanges.log":
            out[rel] = [strip_timing(json.loads(ln)) for ln in text.splitlines() if ln.strip()]
        else:
            out[rel] = text
    return out
