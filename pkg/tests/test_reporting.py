from __future__ import annotations

import csv
import io

import pytest

from evolver.evaluator import CriteriaSet, Criterion, report_from_scores
from evolver.evolution import Hypothesis, modify
from evolver.executor import ExecutionResult
from evolver.model import Variant
from evolver.reporting import (
    GROUPS,
    SAVED_STATEMENT,
    ReportError,
    comparison_report,
    iteration_report,
    render_hypotheses,
    run_scores_export,
)
from evolver.store import IterationRecord, RunStore

CRITERIA = CriteriaSet((Criterion("clarity"), Criterion("relevance")))
HEADINGS = [h for h, _ in GROUPS]


def ev(clarity, relevance):
    return report_from_scores({"clarity": clarity, "relevance": relevance}, CRITERIA)


def _result(text):
    return ExecutionResult({"t": text}, text, {"t": 0.0}, 0.0, 1, 1, True)


def build_iteration(tmp_path, spec, hyps, new_scores=(0.9, 0.9), base_scores=(0.6, 0.6)):
    store = RunStore(tmp_path / "run")
    base = store.initialize(spec)
    base_eval = ev(*base_scores)
    store.persist(base, _result("old"), base_eval, best=True)
    mod = modify(spec, hyps)
    child = Variant.create(mod.spec, base.variant_id, mod.applied, 1)
    child_eval = ev(*new_scores)
    store.persist(child, _result("new"), child_eval)
    winner = child if child_eval.aggregate > base_eval.aggregate else base
    record = IterationRecord(1, (child.variant_id,), {child.variant_id: child_eval}, winner.variant_id,
                             base.variant_id, base_eval.aggregate, max(base_eval.aggregate, child_eval.aggregate))
    store.write_iteration(record)
    return store, record


def test_market_revision_headings(tmp_path, market_spec, market_hypotheses):
    store, record = build_iteration(tmp_path, market_spec, market_hypotheses)
    text = iteration_report(record, store)
    for heading in HEADINGS:
        assert f"### {heading}" in text
    assert "### Evaluation of New Output vs. Best-Known Output" in text
    assert "saved as the best-known variant" in text
    assert "## Revised Workflow" in text
    assert text.index("market_identification`") < text.index("performs `market_confirmation`")


def test_only_nonempty_groups(tmp_path, chain):
    hyp = Hypothesis("SetTools", {"target": "agent", "id": "writer", "tools": ["FileReadTool"]}, "needs files")
    store, record = build_iteration(tmp_path, chain, [hyp])
    text = iteration_report(record, store)
    assert "### Tool Integration" in text
    for heading in HEADINGS:
        if heading != "Tool Integration":
            assert heading not in text


def test_render_empty():
    assert "No hypotheses were applied." in render_hypotheses([])


def test_report_is_deterministic(tmp_path, market_spec, market_hypotheses):
    store, record = build_iteration(tmp_path, market_spec, market_hypotheses)
    assert iteration_report(record, store) == iteration_report(record, store)


def test_missing_artifact_fails(tmp_path, market_spec, market_hypotheses):
    store, record = build_iteration(tmp_path, market_spec, market_hypotheses)
    (store.variant_dir(record.previous_best) / "evaluation.json").unlink()
    with pytest.raises(ReportError, match="evaluation.json"):
        iteration_report(record, store)


def test_comparison_new_wins():
    rows, conclusion = comparison_report(ev(0.9, 0.9), ev(0.6, 0.6))
    assert rows[-1].dimension == "overall" and rows[-1].winner == "new"
    assert "saved as the best-known variant" in conclusion
    assert conclusion.endswith(SAVED_STATEMENT)


def test_comparison_identical_is_all_ties():
    rows, conclusion = comparison_report(ev(0.7, 0.7), ev(0.7, 0.7))
    assert {r.winner for r in rows} == {"tie"}
    assert "saved" not in conclusion


def test_row_and_overall_independent():
    rows, _ = comparison_report(ev(0.5, 1.0), ev(0.6, 0.6))
    by_name = {r.dimension: r.winner for r in rows}
    assert by_name == {"clarity": "best", "relevance": "new", "overall": "new"}


def test_mismatched_criteria():
    other = report_from_scores({"depth": 0.5}, CriteriaSet((Criterion("depth"),)))
    with pytest.raises(ReportError):
        comparison_report(ev(0.5, 0.5), other)


def test_scores_export(tmp_path, chain):
    hyps = [Hypothesis("RedefineTask", {"task_id": "t1", "description": "v2"}, "r")]
    store, _ = build_iteration(tmp_path, chain, hyps, new_scores=(0.8, 0.7))
    more = modify(chain, [Hypothesis("RedefineTask", {"task_id": "t2", "description": "v3"}, "r")])
    second = Variant.create(more.spec, store.baseline().variant_id, more.applied, 1)
    store.persist(second, _result("x"), ev(0.5, 0.5))
    text = run_scores_export(store)
    rows = list(csv.reader(io.StringIO(text)))
    assert rows[0] == ["iteration", "variant_id", "clarity", "relevance", "aggregate"]
    assert len(rows) == 4
    assert [r[0] for r in rows[1:]] == ["0", "1", "1"]
    assert run_scores_export(store) == text
