"""The refinement loop: execute, judge, hypothesize, modify, select, persist, repeat."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, replace
from typing import Callable, Sequence

from .evaluator import CriteriaSet, EvaluationReport, QuantHistory, evaluate
from .evolution import ApplyError, GenerationError, HypothesisSet, generate_hypotheses, modify
from .executor import ExecutionResult, execute_external, execute_workflow
from .gateway import Gateway
from .model import SystemSpec, Variant, require_valid
from .store import IterationRecord, RunConfig, RunStore, compare_and_select, rank_candidates, should_stop

log = logging.getLogger(__name__)

ExecuteFn = Callable[[SystemSpec], ExecutionResult]
EvaluateFn = Callable[[ExecutionResult, SystemSpec], EvaluationReport]
HypothesizeFn = Callable[[EvaluationReport, SystemSpec, int], Sequence[HypothesisSet]]
ReportFn = Callable[[IterationRecord, RunStore], None]


class RunAborted(RuntimeError):
    pass


@dataclass(frozen=True)
class RunSummary:
    run_id: str
    baseline_score: float
    best_score: float
    best_variant_id: str
    iterations_executed: int
    stop_reason: str

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d) -> "RunSummary":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__})


def default_hooks(gateway: Gateway, criteria: CriteriaSet, config: RunConfig, objective: str,
                  history: QuantHistory, prompt_dir=None) -> tuple[ExecuteFn, EvaluateFn, HypothesizeFn]:
    if config.executor_mode == "external":
        def execute(spec: SystemSpec) -> ExecutionResult:
            return execute_external(config.external_command, spec, config.external_timeout)
    else:
        def execute(spec: SystemSpec) -> ExecutionResult:
            return execute_workflow(spec, gateway, parallelism=config.parallelism, prompt_dir=prompt_dir)

    def judge(result: ExecutionResult, spec: SystemSpec) -> EvaluationReport:
        return evaluate(result, criteria, gateway, objective=objective, history=history, prompt_dir=prompt_dir)

    def hypothesize(report: EvaluationReport, spec: SystemSpec, branching: int) -> list[HypothesisSet]:
        return generate_hypotheses(report, spec, gateway, branching, prompt_dir=prompt_dir)

    return execute, judge, hypothesize


def run_refinement(spec0: SystemSpec, criteria: CriteriaSet, config: RunConfig, gateway: Gateway | None,
                   store: RunStore, *, execute: ExecuteFn | None = None, evaluate_fn: EvaluateFn | None = None,
                   hypothesize: HypothesizeFn | None = None, on_iteration: ReportFn | None = None,
                   prompt_dir=None) -> RunSummary:
    """Hill-climb from ``spec0``; a child replaces the best only on a strictly higher aggregate.

    ``execute``, ``evaluate_fn`` and ``hypothesize`` default to the gateway-backed
    implementations; tests swap them for synthetic ones.
    """
    require_valid(spec0)
    history = QuantHistory()
    if execute is None or evaluate_fn is None or hypothesize is None:
        if gateway is None:
            raise ValueError("a gateway is required unless all hooks are supplied")
        d_exec, d_eval, d_hyp = default_hooks(gateway, criteria, config, spec0.objective, history, prompt_dir)
        execute, evaluate_fn, hypothesize = execute or d_exec, evaluate_fn or d_eval, hypothesize or d_hyp
    if on_iteration is None:
        from .reporting import write_iteration_report as on_iteration

    cache: dict[tuple[str, str], EvaluationReport] = {}
    crit_key = criteria.digest()

    baseline = Variant.create(spec0)
    result0 = execute(spec0)
    if not result0.success:
        raise RunAborted("baseline execution failed: " + "; ".join(result0.error_log))
    eval0 = evaluate_fn(result0, spec0)
    history.observe(eval0.quantitative_raw)
    store.persist(baseline, result0, eval0, best=True)
    cache[(baseline.variant_id, crit_key)] = eval0

    best, best_eval = baseline, eval0
    records: list[IterationRecord] = []
    stop_reason = "max_iterations"
    for iteration in range(1, config.max_iterations + 1):
        before = best_eval.aggregate
        incumbent_id = best.variant_id
        notes: list[str] = []
        candidates: list[tuple[Variant, EvaluationReport]] = []
        stalled = False
        try:
            hsets = list(hypothesize(best_eval, best.spec, config.branching))
        except GenerationError as exc:
            notes.append(f"hypothesis generation failed: {exc}")
            log.warning("iteration %d stalled: %s", iteration, exc)
            hsets, stalled = [], True

        seen: set[str] = set()
        for i, hset in enumerate(hsets):
            try:
                mod = modify(best.spec, hset)
            except ApplyError as exc:
                notes.append(f"set {i + 1}: {exc} ({len(exc.skipped)} skipped)")
                continue
            notes.extend(f"set {i + 1}: skipped {h.kind}: {why}" for h, why in mod.skipped)
            child = Variant.create(mod.spec, best.variant_id, mod.applied, iteration)
            if child.variant_id in seen:
                continue
            seen.add(child.variant_id)
            key = (child.variant_id, crit_key)
            if key in cache:
                # Reached before through another path; keep its original record.
                candidates.append((child, cache[key]))
                continue
            result = execute(child.spec)
            if not result.success:
                notes.append(f"child {child.variant_id} execution incomplete: {'; '.join(result.error_log)}")
            report = evaluate_fn(result, child.spec)
            history.observe(report.quantitative_raw)
            cache[key] = report
            store.persist(child, result, report)
            candidates.append((child, report))
        if not candidates and not stalled:
            stalled = True

        winner, winner_eval = compare_and_select(candidates, (best, best_eval))
        if winner.variant_id != best.variant_id:
            best, best_eval = winner, winner_eval
            store.mark_best(best, best_eval)

        ranked = rank_candidates(candidates)
        record = IterationRecord(
            iteration=iteration,
            candidate_variant_ids=tuple(v.variant_id for v, _ in ranked),
            evaluations={v.variant_id: e for v, e in ranked},
            selected_best=best.variant_id,
            previous_best=incumbent_id,
            best_score_before=before,
            best_score_after=best_eval.aggregate,
            stalled=stalled,
            notes=tuple(notes),
        )
        decision = should_stop([*records, record], config)
        if decision:
            record = replace(record, stopped=True, stop_reason=decision.reason)
        records.append(record)
        store.write_iteration(record)
        on_iteration(record, store)
        if decision:
            stop_reason = decision.reason
            break

    summary = RunSummary(
        run_id=store.run_id,
        baseline_score=eval0.aggregate,
        best_score=best_eval.aggregate,
        best_variant_id=best.variant_id,
        iterations_executed=len(records),
        stop_reason=stop_reason,
    )
    from .reporting import run_scores_export

    store.write_report("scores.csv", run_scores_export(store))
    store.write_report("summary.json", json.dumps(summary.to_dict(), indent=2, sort_keys=True) + "\n")
    return summary
