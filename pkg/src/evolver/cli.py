"""Command line entry point: ``evolver {init,derive-criteria,run,report,compare,replay}``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
import tempfile
from contextlib import contextmanager
from pathlib import Path
from typing import Iterator, Sequence

from .evaluator import derive_criteria
from .gateway import (
    Gateway,
    GatewayError,
    HttpBackend,
    ProviderConfig,
    ScriptedBackend,
    ScriptExhausted,
    ScriptMismatch,
    load_exchanges,
    script_from_exchanges,
)
from .model import SpecError, load_spec, validate_spec
from .orchestrator import RunAborted, RunSummary, run_refinement
from .reporting import ReportError, render_comparison, write_run_reports
from .store import RunConfig, RunStore, StoreError, snapshot

EXIT_OK, EXIT_INVALID, EXIT_ABORTED = 0, 1, 2

log = logging.getLogger("evolver")


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_INVALID):
        super().__init__(message)
        self.code = code


def _err(msg: str) -> None:
    print(f"evolver: {msg}", file=sys.stderr)


def _require_initialized(run_dir: Path) -> RunStore:
    store = RunStore(run_dir)
    if not store.config_path.exists():
        raise CliError(f"{run_dir} is not an initialized run directory (run `evolver init` first)", EXIT_ABORTED)
    return store


def _gateway(store: RunStore, script: str | None, seed: int | None, phase: str) -> Gateway:
    if script:
        backend = ScriptedBackend.from_file(script)
        return Gateway(backend, ProviderConfig(seed=seed), log_path=store.exchanges_path, phase=phase)
    config = ProviderConfig.from_env(seed=seed)
    return Gateway(HttpBackend(config), config, log_path=store.exchanges_path, phase=phase)


@contextmanager
def _run_lock(store: RunStore) -> Iterator[None]:
    path = store.root / ".lock"
    try:
        fd = os.open(path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise CliError(f"another run holds {path}", EXIT_INVALID) from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        path.unlink(missing_ok=True)


# -- commands ------------------------------------------------------------------

def cmd_init(args: argparse.Namespace) -> int:
    try:
        spec = load_spec(args.spec)
    except (OSError, SpecError) as exc:
        raise CliError(f"cannot read spec: {exc}")
    violations = validate_spec(spec)
    if violations:
        for v in violations:
            _err(f"violation: {v}")
        raise CliError(f"{args.spec} is not a valid spec ({len(violations)} violations)")
    run_dir = Path(args.run_dir)
    if run_dir.exists() and any(run_dir.iterdir()):
        if not args.force:
            raise CliError(f"{run_dir} is not empty; pass --force to overwrite")
        shutil.rmtree(run_dir)
    store = RunStore(run_dir)
    baseline = store.initialize(spec)
    print(f"initialized {run_dir} with baseline variant {baseline.variant_id}")
    return EXIT_OK


def cmd_derive_criteria(args: argparse.Namespace) -> int:
    store = _require_initialized(Path(args.run_dir))
    if store.criteria_path.exists() and not args.force:
        raise CliError(f"{store.criteria_path} exists; pass --force to overwrite")
    spec = store.baseline().spec
    gateway = _gateway(store, args.llm_script, None, "derive-criteria")
    criteria = derive_criteria(spec, gateway, quant_blend=args.quant_blend)
    store.write_criteria(criteria)
    print(f"wrote {len(criteria.all)} criteria to {store.criteria_path}")
    if args.edit:
        print(f"edit {store.criteria_path.resolve()} now, then continue with `evolver run {args.run_dir}`")
    return EXIT_OK


def _run_config(store: RunStore, args: argparse.Namespace) -> RunConfig:
    stored = store.run_config().to_dict()
    overrides = {
        "epsilon": args.epsilon,
        "max_iterations": args.max_iterations,
        "patience": args.patience,
        "branching": args.branching,
        "executor_mode": args.executor,
        "seed": args.seed,
        "external_command": args.external_command,
        "external_timeout": args.timeout,
        "parallelism": args.parallelism,
    }
    stored.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return RunConfig.from_dict(stored)
    except ValueError as exc:
        raise CliError(str(exc)) from exc


def cmd_run(args: argparse.Namespace) -> int:
    store = _require_initialized(Path(args.run_dir))
    if not store.criteria_path.exists():
        raise CliError(f"no criteria.json in {args.run_dir}; run `evolver derive-criteria {args.run_dir}` first",
                       EXIT_ABORTED)
    criteria = store.read_criteria()
    config = _run_config(store, args)
    if args.llm_script and not Path(args.llm_script).exists():
        raise CliError(f"script {args.llm_script} not found")
    if (store.reports_dir / "summary.json").exists() or store.best_path.exists():
        if not args.force:
            raise CliError(f"{args.run_dir} already holds a run; pass --force to start over")
    with _run_lock(store):
        store.reset_run()
        doc = store.read_config()
        doc["run"] = config.to_dict()
        store.write_config(doc)
        gateway = _gateway(store, args.llm_script, config.seed, "run")
        try:
            summary = run_refinement(store.baseline().spec, criteria, config, gateway, store)
        except (RunAborted, StoreError) as exc:
            raise CliError(f"run aborted: {exc}", EXIT_ABORTED) from exc
        except GatewayError as exc:
            raise CliError(f"run aborted: model call failed: {exc}", EXIT_ABORTED) from exc
    _print_summary(summary)
    return EXIT_OK


def _print_summary(summary: RunSummary) -> None:
    print(f"run {summary.run_id}: {summary.stop_reason} after {summary.iterations_executed} iteration(s)")
    print(f"baseline score {summary.baseline_score:.4f} -> best score {summary.best_score:.4f} "
          f"(variant {summary.best_variant_id})")
    print(summary.to_json())


def cmd_report(args: argparse.Namespace) -> int:
    store = _require_initialized(Path(args.run_dir))
    try:
        paths = write_run_reports(store)
    except (ReportError, StoreError) as exc:
        raise CliError(str(exc)) from exc
    for p in paths:
        print(p)
    return EXIT_OK


def cmd_compare(args: argparse.Namespace) -> int:
    store = _require_initialized(Path(args.run_dir))
    best_id = args.best or store.best()["variant_id"]
    try:
        print(render_comparison(store.load_evaluation(args.new), store.load_evaluation(best_id)), end="")
    except (ReportError, StoreError) as exc:
        raise CliError(str(exc)) from exc
    return EXIT_OK


# Files whose content must be reproduced by a replay.
_REPLAY_CHECKED = ("spec.json", "output.txt", "evaluation.json", "meta.json")


def replay_run(run_dir: str | Path) -> tuple[RunSummary, list[str]]:
    """Re-run a finished run against its own exchange log; return the summary and any divergences."""
    store = _require_initialized(Path(run_dir))
    summary_path = store.reports_dir / "summary.json"
    if not summary_path.exists():
        raise CliError(f"{run_dir} has no finished run to replay")
    stored = RunSummary.from_dict(json.loads(summary_path.read_text(encoding="utf-8")))
    exchanges = load_exchanges(store.exchanges_path, phase="run")
    backend = ScriptedBackend(script_from_exchanges(exchanges))
    config = store.run_config()
    criteria = store.read_criteria()

    with tempfile.TemporaryDirectory(prefix="evolver-replay-") as tmp:
        shadow = RunStore(Path(tmp) / store.run_id)
        shadow.initialize(store.baseline().spec, config.to_dict())
        shutil.copy(store.criteria_path, shadow.criteria_path)
        gateway = Gateway(backend, ProviderConfig(seed=config.seed), log_path=shadow.exchanges_path)
        try:
            summary = run_refinement(store.baseline().spec, criteria, config, gateway, shadow)
        except (ScriptMismatch, ScriptExhausted) as exc:
            return stored, [f"diverged at exchange {exc.index}: {exc}"]
        except (RunAborted, GatewayError) as exc:
            return stored, [f"replay aborted: {exc}"]
        problems = []
        if backend.remaining:
            problems.append(f"diverged at exchange {backend.position}: replay made fewer model calls than logged")
        if summary != stored:
            problems.append(f"summary differs: stored {stored.to_json()} replayed {summary.to_json()}")
        original, replayed = snapshot(store.root), snapshot(shadow.root)
        for rel in sorted(original.keys() | replayed.keys()):
            checked = rel.startswith("iterations/") or rel.split("/")[-1] in _REPLAY_CHECKED or rel == "best.json"
            if checked and original.get(rel) != replayed.get(rel):
                problems.append(f"artifact differs: {rel}")
                break
    return summary, problems


def cmd_replay(args: argparse.Namespace) -> int:
    summary, problems = replay_run(args.run_dir)
    if problems:
        for p in problems:
            _err(p)
        return EXIT_INVALID
    print(f"replay matches: {summary.to_json()}")
    return EXIT_OK


# -- parser --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="evolver", description="Iteratively refine a multi-agent workflow spec.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("init", help="create a run directory from a baseline spec")
    p.add_argument("spec")
    p.add_argument("run_dir")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_init)

    p = sub.add_parser("derive-criteria", help="derive evaluation criteria for the baseline")
    p.add_argument("run_dir")
    p.add_argument("--edit", action="store_true", help="stop so the criteria can be revised by hand")
    p.add_argument("--force", action="store_true")
    p.add_argument("--llm-script")
    p.add_argument("--quant-blend", type=float, default=0.0)
    p.set_defaults(func=cmd_derive_criteria)

    p = sub.add_parser("run", help="run the refinement loop")
    p.add_argument("run_dir")
    p.add_argument("--epsilon", type=float)
    p.add_argument("--max-iterations", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--branching", type=int)
    p.add_argument("--executor", choices=["workflow", "external"])
    p.add_argument("--external-command")
    p.add_argument("--timeout", type=float, help="external executor timeout in seconds")
    p.add_argument("--parallelism", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--llm-script")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("report", help="regenerate iteration reports and scores.csv")
    p.add_argument("run_dir")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("compare", help="compare a variant against the best-known one")
    p.add_argument("run_dir")
    p.add_argument("new")
    p.add_argument("best", nargs="?")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("replay", help="re-run a finished run from its exchange log")
    p.add_argument("run_dir")
    p.set_defaults(func=cmd_replay)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        _err(str(exc))
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
