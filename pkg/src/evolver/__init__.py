"""Autonomous refinement of declarative multi-agent workflows."""

from .evaluator import CriteriaSet, Criterion, EvaluationReport, aggregate, derive_criteria, evaluate
from .evolution import Hypothesis, HypothesisSet, apply, generate_hypotheses, modify
from .executor import ExecutionResult, execute_external, execute_workflow, topo_order
from .gateway import Gateway, HttpBackend, ProviderConfig, ScriptedBackend
from .model import AgentSpec, SystemSpec, TaskSpec, Variant, canonicalize, diff_specs, parse_spec, validate_spec
from .orchestrator import RunSummary, run_refinement
from .store import IterationRecord, RunConfig, RunStore, compare_and_select, should_stop

__all__ = [
    "AgentSpec", "CriteriaSet", "Criterion", "EvaluationReport", "ExecutionResult", "Gateway",
    "HttpBackend", "Hypothesis", "HypothesisSet", "IterationRecord", "ProviderConfig", "RunConfig",
    "RunStore", "RunSummary", "ScriptedBackend", "SystemSpec", "TaskSpec", "Variant", "aggregate",
    "apply", "canonicalize", "compare_and_select", "derive_criteria", "diff_specs", "evaluate",
    "execute_external", "execute_workflow", "generate_hypotheses", "modify", "parse_spec",
    "run_refinement", "should_stop", "topo_order", "validate_spec",
]
