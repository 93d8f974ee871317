"""Acceptance suite: one verdict line per criterion (run with ``-s`` or read the terminal summary)."""

from __future__ import annotations

import filecmp
import json
import logging
import random
import time

import pytest

from evolver.cli import main
from evolver.evaluator import DEFAULT_QUALITATIVE, CriteriaSet, Criterion, aggregate
from evolver.evolution import ApplyError, Hypothesis, modify
from evolver.gateway import Gateway
from evolver.model import validate_spec
from evolver.orchestrator import run_refinement
from evolver.reporting import GROUPS, comparison_report
from evolver.sim import (
    SyntheticLandscape,
    alphabet_generator,
    brute_force_best,
    random_landscape,
    synthetic_criteria,
    synthetic_hooks,
    synthetic_score,
)
from evolver.store import RunConfig, RunStore, should_stop, snapshot

from .conftest import FIXTURES, chain_spec, fenced, hypotheses_response, judge, one_criterion, redefine, verdict
from .generators import random_hypothesis_set, random_spec

pytestmark = pytest.mark.acceptance

LANDSCAPES = sorted((FIXTURES / "landscapes").glob("*.json"))


# -- helpers -------------------------------------------------------------------

def scripted_run(root, scores, *, branching=1, spec=None, criteria=None, **config):
    """Gateway-backed run of a 1-task spec judged on one criterion.

    ``scores[0]`` is the baseline; then one list of ``branching`` child scores per iteration.
    """
    spec = spec or chain_spec(1)
    criteria = criteria or one_criterion()
    script = ["baseline output", judge(scores[0])]
    for it, child_scores in enumerate(scores[1:], 1):
        script += [hypotheses_response([redefine(f"variant {it}.{b}")]) for b in range(branching)]
        for b, s in enumerate(child_scores):
            script += [f"output {it}.{b}", judge(s)]
    store = RunStore(root)
    store.initialize(spec)
    gateway = Gateway.scripted(script, log_path=store.exchanges_path)
    summary = run_refinement(spec, criteria, RunConfig(branching=branching, **config), gateway, store)
    return summary, store


def synthetic_run(root, landscape, **config):
    store = RunStore(root)
    store.initialize(landscape.baseline)
    b = len(landscape.alphabet)
    cfg = RunConfig(**{"max_iterations": landscape.max_iterations, "branching": b, **config})
    summary = run_refinement(landscape.baseline, synthetic_criteria(), cfg, None, store,
                             hypothesize=alphabet_generator(landscape.alphabet), **synthetic_hooks(landscape))
    return summary, store


def monotone(store) -> bool:
    records = store.iterations()
    afters = [r.best_score_after for r in records]
    chained = all(a.best_score_after == b.best_score_before for a, b in zip(records, records[1:]))
    return afters == sorted(afters) and chained and all(r.best_score_after >= r.best_score_before for r in records)


# -- 1 -------------------------------------------------------------------------

def test_monotone_best_score(tmp_path):
    rng = random.Random(1)
    runs, slowest, bad = 0, 0.0, []
    fixtures = [("scripted-improving", lambda root: scripted_run(root, [0.6, [0.9], [0.9]], max_iterations=5))]
    for seed in range(20):
        b = rng.randint(1, 3)
        scores = [round(rng.random(), 3)] + [[round(rng.random(), 3) for _ in range(b)] for _ in range(4)]
        fixtures.append((f"scripted-random-{seed}",
                         lambda root, s=scores, b=b: scripted_run(root, s, branching=b, max_iterations=4, patience=4)))
    for path in LANDSCAPES:
        fixtures.append((path.stem, lambda root, p=path: synthetic_run(root, SyntheticLandscape.load(p), epsilon=1e-9)))
    for seed in range(10):
        fixtures.append((f"random-landscape-{seed}",
                         lambda root, s=seed: synthetic_run(root, random_landscape(s, max_iterations=3),
                                                            epsilon=1e-9, patience=3)))
    for name, make in fixtures:
        start = time.perf_counter()
        _, store = make(tmp_path / name)
        elapsed = time.perf_counter() - start
        slowest = max(slowest, elapsed)
        runs += 1
        if not monotone(store) or elapsed >= 5.0:
            bad.append(name)
    verdict(1, "best_score_after is non-decreasing in every run, each under 5 s", not bad,
            f"{runs} runs, slowest {slowest:.2f}s" + (f", failing: {bad}" if bad else ""))


# -- 2 -------------------------------------------------------------------------

def gateway_alphabet_run(root, landscape):
    """Hypotheses come from a scripted gateway emitting one alphabet entry per call, B = |alphabet|."""
    alphabet = landscape.alphabet
    script = [hypotheses_response([h]) for _ in range(landscape.max_iterations) for h in alphabet]
    store = RunStore(root)
    store.initialize(landscape.baseline)
    cfg = RunConfig(max_iterations=landscape.max_iterations, branching=len(alphabet), epsilon=1e-9, patience=1)
    summary = run_refinement(landscape.baseline, synthetic_criteria(), cfg, Gateway.scripted(script), store,
                             **synthetic_hooks(landscape))
    return summary, store


def test_oracle_equivalence(tmp_path):
    start = time.perf_counter()
    results = []
    for path in LANDSCAPES:
        landscape = SyntheticLandscape.load(path)
        oracle = brute_force_best(landscape.baseline, landscape.alphabet, landscape.max_iterations, landscape)
        summary, store = gateway_alphabet_run(tmp_path / path.stem, landscape)
        found = synthetic_score(store.load_variant(summary.best_variant_id).spec, landscape)
        results.append((path.stem, found, oracle.score, found == oracle.score and summary.best_score == float(oracle.score)))
    elapsed = time.perf_counter() - start
    ok = len(results) >= 3 and all(r[3] for r in results) and elapsed < 30.0
    detail = ", ".join(f"{n}: {f} vs oracle {o}" for n, f, o, _ in results) + f"; {elapsed:.2f}s"
    verdict(2, "run_refinement best equals brute_force_best on every landscape", ok, detail)


# -- 3 -------------------------------------------------------------------------

def test_stopping_semantics(tmp_path):
    checks = []
    for p in (1, 2, 3):
        s, store = scripted_run(tmp_path / f"flat-{p}", [0.6] + [[0.6]] * p, patience=p, epsilon=0.01, max_iterations=10)
        checks.append((f"flat patience {p}", (s.iterations_executed, s.stop_reason) == (p, "converged")))

    s, _ = scripted_run(tmp_path / "small-1", [0.6, [0.605]], patience=1, epsilon=0.01, max_iterations=10)
    checks.append(("0.005 < eps stops at patience 1",
                   (s.iterations_executed, s.stop_reason, s.best_score) == (1, "converged", 0.605)))
    s, _ = scripted_run(tmp_path / "small-2", [0.6, [0.605], [0.61]], patience=2, epsilon=0.01, max_iterations=10)
    checks.append(("two 0.005 steps fill patience 2", (s.iterations_executed, s.stop_reason) == (2, "converged")))
    s, _ = scripted_run(tmp_path / "small-3", [0.6, [0.605], [0.7], [0.705], [0.71]], patience=2,
                        epsilon=0.01, max_iterations=10)
    checks.append(("a large step resets the window", (s.iterations_executed, s.stop_reason) == (4, "converged")))
    s, store = scripted_run(tmp_path / "cap", [0.1, [0.3], [0.5], [0.7]], max_iterations=2, epsilon=0.01)
    checks.append(("max_iterations cap", (s.iterations_executed, s.stop_reason) == (2, "max_iterations")
                   and store.iterations()[-1].stop_reason == "max_iterations"))
    failing = [name for name, ok in checks if not ok]
    verdict(3, "flat/patience, sub-epsilon improvement and max_iterations stop exactly", not failing,
            f"{len(checks)} fixtures" + (f", failing: {failing}" if failing else ""))


# -- 4 -------------------------------------------------------------------------

def random_criteria(rng):
    qual = tuple(Criterion(f"q{i}", weight=rng.uniform(0.1, 5)) for i in range(rng.randint(1, 6)))
    quant = tuple(Criterion(f"m{i}", kind="quantitative", weight=rng.uniform(0.1, 5)) for i in range(rng.randint(0, 3)))
    return CriteriaSet(qual, quant, rng.choice([0.0, rng.random()]))


def test_aggregate_function():
    pair = CriteriaSet((Criterion("communication_clarity"), Criterion("relevance")))
    value = aggregate({"communication_clarity": 0.90, "relevance": 0.91}, pair)
    exact = abs(value - 0.905) <= 1e-12

    rng = random.Random(4)
    monotone_ok = scale_ok = True
    for _ in range(10_000):
        criteria = random_criteria(rng)
        scores = {c.name: rng.random() for c in criteria.all}
        base = aggregate(scores, criteria)
        name = rng.choice(criteria.names)
        raised = dict(scores, **{name: min(1.0, scores[name] + rng.uniform(0, 0.5))})
        if aggregate(raised, criteria) < base - 1e-12:
            monotone_ok = False
        k = rng.uniform(0.01, 100)
        scaled = CriteriaSet(
            tuple(Criterion(c.name, weight=c.weight * k) for c in criteria.qualitative),
            tuple(Criterion(c.name, kind="quantitative", weight=c.weight * k) for c in criteria.quantitative),
            criteria.quant_blend,
        )
        if abs(aggregate(scores, scaled) - base) > 1e-12:
            scale_ok = False
    verdict(4, "{0.91, 0.90} -> 0.905; monotone and weight-scale invariant over 10^4 reports",
            exact and monotone_ok and scale_ok, f"0.905 error {abs(value - 0.905):.1e}, monotone {monotone_ok}, scale {scale_ok}")


# -- 5 -------------------------------------------------------------------------

def test_mutation_closure(caplog):
    rng = random.Random(5)
    invalid = cycles = dangling = applied_sets = 0
    with caplog.at_level(logging.WARNING, logger="evolver.evolution"):
        for i in range(10_000):
            spec = random_spec(rng)
            hyps = random_hypothesis_set(rng)
            if i % 10 == 0:
                # Explicit injections: a back-edge onto the first task and a reference to a missing agent.
                first = min(spec.task_ids)
                last = max(t.task_id for t in spec.tasks)
                hyps.append(Hypothesis("AddDependency", {"task_id": first, "depends_on": last}, "inject cycle"))
                hyps.append(Hypothesis("ReassignTask", {"task_id": first, "agent_id": "nobody"}, "inject dangling"))
            try:
                mod = modify(spec, hyps)
            except ApplyError as exc:
                skipped = exc.skipped
            else:
                applied_sets += 1
                if validate_spec(mod.spec):
                    invalid += 1
                skipped = mod.skipped
            for _, reason in skipped:
                cycles += "cycle" in reason or "self dependency" in reason
                dangling += "unresolved" in reason or "no agent" in reason or "no task" in reason
    warned = "skipping" in caplog.text
    ok = invalid == 0 and cycles > 0 and dangling > 0 and warned
    verdict(5, "apply never yields an invalid spec over 10^4 random pairs", ok,
            f"{applied_sets} applied, {invalid} invalid, {cycles} cycle skips, {dangling} dangling skips")


# -- 6 -------------------------------------------------------------------------

def test_market_revision_replay(tmp_path, market_spec, market_hypotheses):
    criteria = CriteriaSet(DEFAULT_QUALITATIVE)
    n = len(criteria.qualitative)
    script = ["markets: A, B", "needs: X, Y"] + [judge(0.6, "thin")] * n
    script += [hypotheses_response(market_hypotheses)]
    script += ["markets: A, B, C (searched)", "needs: X, Y, Z (scraped)", "validated: A-X, B-Y, C-Z"]
    script += [judge(0.9, "specific and validated")] * n
    store = RunStore(tmp_path / "market-revision")
    store.initialize(market_spec)
    summary = run_refinement(market_spec, criteria, RunConfig(max_iterations=1),
                             Gateway.scripted(script, log_path=store.exchanges_path), store)
    best = store.load_variant(summary.best_variant_id).spec
    roles = {a.role for a in best.agents}
    workflow_ok = (
        roles == {"Market Research Agent", "Market Identification Specialist", "Consumer Needs Analyst"}
        and len(best.tasks) == 3
        and set(best.task("market_confirmation").dependencies) == {"market_identification", "consumer_needs_analysis"}
    )
    report = (store.reports_dir / "iteration-1.md").read_text()
    headings_ok = all(f"### {h}" in report for h, _ in GROUPS)
    comparison_ok = "### Evaluation of New Output vs. Best-Known Output" in report
    rows, conclusion = comparison_report(store.load_evaluation(summary.best_variant_id),
                                         store.load_evaluation(store.baseline().variant_id))
    new_wins = rows[-1].winner == "new" and "saved as the best-known variant" in conclusion
    verdict(6, "hypothesis set reproduces the revised 3-agent, 3-task workflow and its report",
            workflow_ok and headings_ok and comparison_ok and new_wins,
            f"workflow {workflow_ok}, headings {headings_ok}, comparison {comparison_ok}, new wins {new_wins}")


# -- 7 -------------------------------------------------------------------------

def cli_run(run_dir, spec_path, script_path, criteria_script, *extra):
    assert main(["init", str(spec_path), str(run_dir)]) == 0
    assert main(["derive-criteria", str(run_dir), "--llm-script", str(criteria_script)]) == 0
    return main(["run", str(run_dir), "--llm-script", str(script_path), "--seed", "42", *extra])


def tree_differences(a, b):
    """Relative paths whose bytes differ; only timing-bearing metadata may differ."""
    out = []
    files = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    other = sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file())
    if files != other:
        return ["file sets differ"]
    for rel in files:
        if not filecmp.cmp(a / rel, b / rel, shallow=False):
            out.append(str(rel))
    return out


def test_determinism_and_replay(tmp_path, market_spec):
    spec_path = tmp_path / "spec.json"
    spec_path.write_text(json.dumps(market_spec.to_dict()))
    criteria_script = tmp_path / "criteria.json"
    criteria_script.write_text(json.dumps([{"response": fenced({"criteria": [{"name": "alignment"}]})}]))
    n = len(DEFAULT_QUALITATIVE) + 1
    entries = ["m1", "n1"] + [judge(0.6)] * n
    entries += [hypotheses_response([redefine("focus on EU markets", "market_identification")]),
                hypotheses_response([redefine("segment consumers", "consumer_needs_analysis")])]
    entries += ["m2", "n2"] + [judge(0.7)] * n + ["m3", "n3"] + [judge(0.65)] * n
    entries += [hypotheses_response([redefine("add pricing", "market_identification")])] * 2
    entries += ["m4", "n4"] + [judge(0.7)] * n
    script_path = tmp_path / "script.json"
    script_path.write_text(json.dumps([{"response": e, "latency": 0.25} for e in entries]))

    codes = [cli_run(tmp_path / side / "run", spec_path, script_path, criteria_script, "--branching", "2",
                     "--max-iterations", "2") for side in ("a", "b")]
    a, b = tmp_path / "a" / "run", tmp_path / "b" / "run"
    differing = tree_differences(a, b)
    only_timestamps = all(d.endswith("meta.json") for d in differing) and snapshot(a) == snapshot(b)

    # Replay every scripted run built through the CLI, including a flat one.
    flat = tmp_path / "flat.json"
    flat.write_text(json.dumps([{"response": e} for e in ["m", "n"] + [judge(0.5)] * n
                                + [hypotheses_response([redefine("x", "market_identification")]), "m'", "n'"]
                                + [judge(0.5)] * n]))
    codes.append(cli_run(tmp_path / "c" / "run", spec_path, flat, criteria_script))
    replays = [main(["replay", str(d)]) for d in (a, b, tmp_path / "c" / "run")]
    ok = codes == [0, 0, 0] and only_timestamps and replays == [0, 0, 0]
    verdict(7, "identical scripted runs give identical stores (timestamps aside); replay exits 0", ok,
            f"run exits {codes}, differing files {differing or 'none'}, replay exits {replays}")


# -- 8 -------------------------------------------------------------------------

def test_degradation_safety(tmp_path):
    scores = [0.8, [0.5, 0.7], [0.3, 0.79], [0.1, 0.6]]
    summary, store = scripted_run(tmp_path / "degrade", scores, branching=2, max_iterations=3, patience=3)
    baseline_id = store.baseline().variant_id
    children = [v for v in store.variant_ids() if v != baseline_id]
    records = store.iterations()
    ok = (
        summary.best_variant_id == baseline_id
        and summary.best_score == 0.8
        and store.best()["variant_id"] == baseline_id
        and len(children) == 6
        and all(store.has_variant(c) for c in children)
        and all(r.selected_best == baseline_id for r in records)
        and should_stop(records, RunConfig(max_iterations=3)).reason == "max_iterations"
    )
    verdict(8, "children all below baseline leave the baseline best and are still stored", ok,
            f"best {summary.best_variant_id == baseline_id}, {len(children)} rejected children stored")
