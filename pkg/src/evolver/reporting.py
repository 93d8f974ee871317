"""Markdown iteration reports, new-vs-best comparisons and the per-run score table."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Sequence

from .evaluator import EvaluationReport
from .evolution import Hypothesis
from .executor import topo_order
from .model import SystemSpec, describe_change, diff_specs
from .store import IterationRecord, RunStore, StoreError, rank_candidates

NEW, BEST, TIE = "new", "best", "tie"
OVERALL = "overall"
SAVED_STATEMENT = "Thus, the new variant (its configuration and output) has been saved as the best-known variant."

# Report group per hypothesis kind, in rendering order.
GROUPS = (
    ("Introducing Specialized Agents", ("AddAgent", "ModifyAgent", "RemoveAgent")),
    ("Tool Integration", ("SetTools",)),
    ("Redefining Existing Tasks", ("RedefineTask", "ReassignTask", "AddDependency", "RemoveDependency")),
    ("Creating a New Task for Comprehensive Validation", ("AddTask",)),
)


class ReportError(RuntimeError):
    pass


@dataclass(frozen=True)
class ComparisonVerdict:
    dimension: str
    best_known: str
    new: str
    evaluation: str
    winner: str


def _winner(new: float, best: float) -> str:
    if new > best:
        return NEW
    if best > new:
        return BEST
    return TIE


def comparison_report(new_eval: EvaluationReport, best_eval: EvaluationReport) -> tuple[list[ComparisonVerdict], str]:
    if set(new_eval.per_criterion) != set(best_eval.per_criterion):
        raise ReportError("evaluations were made against different criteria sets")
    rows: list[ComparisonVerdict] = []
    for name in sorted(new_eval.per_criterion):
        n, b = new_eval.score(name), best_eval.score(name)
        w = _winner(n, b)
        rows.append(ComparisonVerdict(
            dimension=name,
            best_known=f"{b:.3f}: {best_eval.rationale(name)}".rstrip(": "),
            new=f"{n:.3f}: {new_eval.rationale(name)}".rstrip(": "),
            evaluation={NEW: "The new output scores higher.", BEST: "The best-known output scores higher.",
                        TIE: "Both outputs score the same."}[w],
            winner=w,
        ))
    overall = _winner(new_eval.aggregate, best_eval.aggregate)
    rows.append(ComparisonVerdict(
        dimension=OVERALL,
        best_known=f"{best_eval.aggregate:.4f}",
        new=f"{new_eval.aggregate:.4f}",
        evaluation={NEW: "The new variant has the higher aggregate score.",
                    BEST: "The best-known variant keeps the higher aggregate score.",
                    TIE: "Aggregate scores are equal; the best-known variant is kept."}[overall],
        winner=overall,
    ))
    return rows, _conclusion(rows, overall)


def _conclusion(rows: Sequence[ComparisonVerdict], overall: str) -> str:
    criteria_rows = [r for r in rows if r.dimension != OVERALL]
    if overall == NEW:
        won = [r.dimension for r in criteria_rows if r.winner == NEW]
        lines = ["The new output is superior to the best-known output."]
        if won:
            lines.append("It scores higher on:")
            lines.extend(f"{i}. {name}" for i, name in enumerate(won, 1))
        lines.append("")
        lines.append(SAVED_STATEMENT)
        return "\n".join(lines)
    if overall == BEST:
        held = [r.dimension for r in criteria_rows if r.winner == BEST]
        tail = f" It remains stronger on: {', '.join(held)}." if held else ""
        return "The best-known output remains superior; the new variant is not adopted." + tail
    return "The new output is not better than the best-known output; the best-known variant is kept."


def render_comparison(new_eval: EvaluationReport, best_eval: EvaluationReport) -> str:
    rows, conclusion = comparison_report(new_eval, best_eval)
    out = ["## Comprehensive Comparison Report", "", "### Evaluation of New Output vs. Best-Known Output", ""]
    for r in rows:
        out += [
            f"- **{r.dimension}**",
            f"  - Best-Known Output: {r.best_known}",
            f"  - New Output: {r.new}",
            f"  - Evaluation: {r.evaluation}",
            f"  - Winner: {r.winner}",
        ]
    out += ["", f"**Conclusion:** {conclusion}", ""]
    return "\n".join(out)


def render_hypotheses(hypotheses: Sequence[Hypothesis]) -> str:
    out = ["## Hypotheses and Justifications", ""]
    for heading, kinds in GROUPS:
        group = [h for h in hypotheses if h.kind in kinds]
        if not group:
            continue
        out += [f"### {heading}", ""]
        for h in group:
            out.append(f"- **{h.describe()}**")
            out.append(f"  - Rationale: {h.rationale}")
        out.append("")
    if len(out) == 2:
        out += ["No hypotheses were applied.", ""]
    return "\n".join(out)


def render_workflow(old: SystemSpec | None, new: SystemSpec) -> str:
    out = ["## Revised Workflow", ""]
    for i, tid in enumerate(topo_order(new), 1):
        task = new.task(tid)
        agent = new.agent(task.agent_id)
        deps = sorted(task.dependencies)
        after = f" after {', '.join(f'`{d}`' for d in deps)}" if deps else ""
        out.append(f"{i}. **{agent.role}** (`{agent.agent_id}`) performs `{tid}`{after}: {task.description}")
    if old is not None:
        changes = diff_specs(old, new)
        out += ["", "Structural changes:", ""]
        out += [f"- {describe_change(c)}" for c in changes] or ["- none"]
    out.append("")
    return "\n".join(out)


def iteration_report(record: IterationRecord, store: RunStore) -> str:
    """Markdown for one iteration: hypotheses of the top candidate, its workflow, and the comparison."""
    try:
        incumbent = store.load_variant(record.previous_best)
        incumbent_eval = store.load_evaluation(record.previous_best)
        featured = None
        if record.candidate_variant_ids:
            ranked = rank_candidates([(store.load_variant(v), record.evaluations[v]) for v in record.candidate_variant_ids])
            featured = ranked[0]
    except StoreError as exc:
        raise ReportError(f"cannot render iteration {record.iteration}: {exc}") from exc

    out = [f"# Report for Refinement Iteration {record.iteration}", ""]
    out.append(f"- Best-known variant before: `{record.previous_best}` ({record.best_score_before:.4f})")
    out.append(f"- Best-known variant after: `{record.selected_best}` ({record.best_score_after:.4f})")
    out.append(f"- Candidates evaluated: {len(record.candidate_variant_ids)}")
    if record.stopped:
        out.append(f"- Stopped: {record.stop_reason}")
    out.append("")
    if featured is None:
        out += ["No candidate variant was produced in this iteration.", ""]
        out += [f"- {n}" for n in record.notes]
        return "\n".join(out).rstrip("\n") + "\n"

    variant, evaluation = featured
    out.append(f"Featured candidate: `{variant.variant_id}`")
    out.append("")
    out.append(render_hypotheses(variant.applied_hypotheses))
    out.append(render_workflow(incumbent.spec, variant.spec))
    out.append(render_comparison(evaluation, incumbent_eval))
    if len(record.candidate_variant_ids) > 1:
        out += ["## Candidate Ranking", ""]
        for i, vid in enumerate(record.candidate_variant_ids, 1):
            out.append(f"{i}. `{vid}`: {record.evaluations[vid].aggregate:.4f}")
        out.append("")
    return "\n".join(out).rstrip("\n") + "\n"


def write_iteration_report(record: IterationRecord, store: RunStore):
    return store.write_report(f"iteration-{record.iteration}.md", iteration_report(record, store))


def run_scores_export(store: RunStore) -> str:
    """CSV with one row per evaluated variant, ordered by iteration then variant id."""
    rows = []
    names: set[str] = set()
    for vid, ev in store.evaluated_variants():
        meta = store.load_meta(vid)
        rows.append((int(meta.get("iteration", 0)), vid, ev))
        names.update(ev.per_criterion)
    rows.sort(key=lambda r: (r[0], r[1]))
    columns = sorted(names)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["iteration", "variant_id", *columns, "aggregate"])
    for it, vid, ev in rows:
        writer.writerow([it, vid, *(_fmt(ev.per_criterion[c]["score"]) if c in ev.per_criterion else "" for c in columns),
                         _fmt(ev.aggregate)])
    return buf.getvalue()


def _fmt(x: float) -> str:
    return repr(float(x))


def write_run_reports(store: RunStore) -> list:
    paths = [write_iteration_report(r, store) for r in store.iterations()]
    paths.append(store.write_report("scores.csv", run_scores_export(store)))
    return paths
