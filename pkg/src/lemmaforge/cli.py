"""Command-line entry point.

Exit codes: 0 success, 1 operational failure (backend outage, failed
verification), 2 usage or configuration error. `--mock-llm` / `--mock-lean`
swap in scripted backends so every command runs with zero network access.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path
from typing import Any, Callable, TypeVar

from . import bench, lean, llm
from .config import ConfigError, RunConfig, load_config
from .model import Stage, StageName, now_iso
from .pipeline import Pipeline, load_default_templates
from .store import ArtifactStore

logger = logging.getLogger(__name__)


class JsonLinesHandler(logging.FileHandler):
    """Line-delimited JSON log records for machine-readable audit trails."""

    def emit(self, record: logging.LogRecord) -> None:
        try:
            payload = {
                "ts": time.strftime("%Y-%m-%dT%H:%M:%S%z", time.localtime(record.created)),
                "level": record.levelname,
                "logger": record.name,
                "message": record.getMessage(),
            }
            if self.stream is None:
                self.stream = self._open()
            self.stream.write(json.dumps(payload, ensure_ascii=False) + self.terminator)
            self.flush()
        except Exception:
            self.handleError(record)


def _setup_logging(workdir: Path | None, verbose: bool) -> None:
    root = logging.getLogger("lemmaforge")
    root.setLevel(logging.DEBUG if verbose else logging.INFO)
    console = logging.StreamHandler(sys.stderr)
    console.setLevel(logging.DEBUG if verbose else logging.INFO)
    console.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    root.handlers = [console]
    if workdir is not None:
        logs = workdir / "logs"
        logs.mkdir(parents=True, exist_ok=True)
        file_handler = JsonLinesHandler(logs / "run.jsonl", encoding="utf-8")
        file_handler.setLevel(logging.DEBUG)
        root.addHandler(file_handler)


# ---------------------------------------------------------------------------
# Wiring
# ---------------------------------------------------------------------------

_T = TypeVar("_T")


def _load_input(path: str, reader: Callable[[str], _T]) -> _T:
    """Read a user-supplied input file, mapping failures to usage errors."""
    try:
        return reader(path)
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror or exc}") from exc
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def _make_backends(cfg: RunConfig, args: argparse.Namespace) -> dict[StageName, llm.LlmBackend]:
    if args.mock_llm:
        scripted = _load_input(args.mock_llm, llm.ScriptedBackend.from_file)
        return {stage: scripted for stage in StageName}
    backends: dict[StageName, llm.LlmBackend] = {}
    for stage in StageName:
        name = cfg.stage_endpoints.get(stage, "")
        if not name:
            raise ConfigError(
                f"stages.{stage.value}.endpoint: required unless --mock-llm is given"
            )
        profile = cfg.llm_endpoints[name]
        backends[stage] = llm.HttpBackend(profile.url, secret=profile.secret())
    return backends


def _make_verifier(cfg: RunConfig, args: argparse.Namespace) -> lean.Verifier:
    if args.mock_lean:
        return _load_input(args.mock_lean, lean.ScriptedVerifier.from_file)
    if not cfg.lean_server.url:
        raise ConfigError("lean_server.url: required unless --mock-lean is given")
    return lean.HttpVerifier(cfg.lean_server.url, timeout_s=cfg.lean_server.timeout_s)


def _apply_overrides(cfg: RunConfig, args: argparse.Namespace) -> None:
    import dataclasses

    for stage in StageName:
        value = getattr(args, f"concurrency_{stage.value}", None)
        if value is not None:
            cfg.stage_configs[stage] = dataclasses.replace(cfg.stage_configs[stage], concurrency=value)
    if args.workdir:
        cfg.workdir = args.workdir


def _pipeline(cfg: RunConfig, args: argparse.Namespace, store: ArtifactStore) -> Pipeline:
    return Pipeline(
        store,
        _make_backends(cfg, args),
        _make_verifier(cfg, args),
        cfg.stage_configs,
        lean_timeout_s=cfg.lean_server.timeout_s,
        lease_s=cfg.lease_s,
        templates=load_default_templates(),
        run_meta={
            "schema_version": bench.SCHEMA_VERSION,
            "config_hash": cfg.config_hash,
            "toolchain": cfg.lean_server.toolchain,
            "prng_seed": cfg.prng_seed,
            "started_at": now_iso(),
        },
    )


def _require_config(args: argparse.Namespace) -> RunConfig:
    if not args.config:
        raise ConfigError("--config is required for this command")
    cfg = load_config(args.config)
    _apply_overrides(cfg, args)
    return cfg


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def _cmd_stage(args: argparse.Namespace) -> int:
    cfg = _require_config(args)
    _setup_logging(Path(cfg.workdir), args.verbose)
    store = ArtifactStore(cfg.workdir)
    pipe = _pipeline(cfg, args, store)
    command = args.command
    if command == "discover":
        ok = pipe.run_discovery(cfg.load_seeds())
    elif command == "judge":
        ok = pipe.run_stage(
            Stage.RAW, pipe.judge_candidate, cfg.stage_configs[StageName.JUDGE].concurrency
        )
    elif command == "formalize":
        ok = pipe.run_stage(
            Stage.JUDGED,
            pipe.formalize_candidate,
            cfg.stage_configs[StageName.FORMALIZE].concurrency,
        )
    elif command == "prove":
        ok = pipe.run_stage(
            Stage.COMPILABLE, pipe.prove_candidate, cfg.stage_configs[StageName.PROVE].concurrency
        )
    else:  # run
        summary = pipe.run_all(cfg.load_seeds())
        print(bench.render_funnel(bench.funnel_stats(store)))
        return 0 if summary.completed else 1
    return 0 if ok else 1


def _cmd_export_bench(args: argparse.Namespace) -> int:
    cfg = _require_config(args)
    _setup_logging(Path(cfg.workdir), args.verbose)
    store = ArtifactStore(cfg.workdir)
    verifier = _make_verifier(cfg, args)
    injection = cfg.stage_configs[StageName.FORMALIZE].injection_preamble
    count = bench.export_bench(
        store, args.out, verifier, injection, cfg.lean_server.timeout_s
    )
    print(f"exported {count} instances to {args.out}")
    return 0


def _cmd_eval(args: argparse.Namespace) -> int:
    cfg = _require_config(args)
    _setup_logging(Path(cfg.workdir), args.verbose)
    instances = _load_input(args.bench, bench.load_bench)
    profile_name = args.profile
    if args.mock_llm:
        backend: llm.LlmBackend = _load_input(args.mock_llm, llm.ScriptedBackend.from_file)
        stage_cfg = cfg.stage_configs[StageName.PROVE]
        if profile_name:
            import dataclasses

            stage_cfg = dataclasses.replace(stage_cfg, model=profile_name)
    else:
        if not profile_name or profile_name not in cfg.llm_endpoints:
            raise ConfigError(f"--profile: unknown endpoint profile {profile_name!r}")
        profile = cfg.llm_endpoints[profile_name]
        backend = llm.HttpBackend(profile.url, secret=profile.secret())
        from .config import build_stage_config

        stage_cfg = build_stage_config(
            StageName.PROVE, {}, profile, k_repairs=cfg.k_repairs, t_repair=cfg.t_repair
        )
    verifier = _make_verifier(cfg, args)
    records = bench.evaluate_model(
        instances,
        stage_cfg,
        backend,
        verifier,
        args.records,
        k_repairs=cfg.k_repairs,
        timeout_s=cfg.lean_server.timeout_s,
    )
    report = bench.build_report(records, instances, budgets=tuple(range(cfg.k_repairs + 1)))
    print(bench.render_report(report))
    if args.report:
        Path(args.report).parent.mkdir(parents=True, exist_ok=True)
        Path(args.report).write_text(json.dumps(report.to_dict(), indent=2) + "\n")
    if args.plot_dir:
        bench.plot_success(report, args.plot_dir)
    return 0


def _cmd_stats(args: argparse.Namespace) -> int:
    if args.table == "funnel":
        if args.counts:
            rows = _load_input(
                args.counts,
                lambda p: bench.funnel_from_counts(json.loads(Path(p).read_text(encoding="utf-8"))),
            )
        else:
            cfg = _require_config(args)
            rows = bench.funnel_stats(ArtifactStore(cfg.workdir))
        print(bench.render_funnel(rows))
        if args.json_out:
            payload: dict[str, Any] = {
                "schema_version": bench.SCHEMA_VERSION,
                "rows": [row.to_dict() for row in rows],
            }
            Path(args.json_out).write_text(json.dumps(payload, indent=2) + "\n")
        return 0
    # success table
    if not args.records or not args.bench:
        raise ConfigError("stats --table success requires --records and --bench")
    records = _load_input(args.records, bench.load_records)
    instances = _load_input(args.bench, bench.load_bench)
    try:
        report = bench.build_report(records, instances)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    print(bench.render_report(report))
    if args.json_out:
        Path(args.json_out).write_text(json.dumps(report.to_dict(), indent=2) + "\n")
    if args.plot_dir:
        bench.plot_success(report, args.plot_dir)
    return 0


def _cmd_audit_sample(args: argparse.Namespace) -> int:
    if args.per_seed < 0:
        raise ConfigError("--per-seed must be >= 0")
    cfg = _require_config(args)
    _setup_logging(Path(cfg.workdir), args.verbose)
    store = ArtifactStore(cfg.workdir)
    solved_ids = None
    if args.records:
        solved_ids = {
            rec.instance_id
            for rec in _load_input(args.records, bench.load_records)
            if rec.solved_at is not None
        }
    sample = bench.audit_sample(
        store,
        per_seed=args.per_seed,
        scope=args.scope,
        rng_seed=args.rng_seed if args.rng_seed is not None else cfg.prng_seed,
        solved_ids=solved_ids,
    )
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            for inst in sample.instances:
                fh.write(json.dumps(inst.to_dict(), sort_keys=True) + "\n")
    rows = [
        (domain, count, None)
        for domain, count in sorted(sample.tally.items(), key=lambda kv: bench._domain_sort_key(kv[0]))
    ]
    print(bench.render_audit_table(rows))
    for seed_id, available in sample.shortfalls:
        print(f"note: seed {seed_id} had only {available} eligible instance(s)")
    return 0


def _cmd_verify(args: argparse.Namespace) -> int:
    cfg = _require_config(args)
    _setup_logging(None, args.verbose)
    verifier = _make_verifier(cfg, args)
    code = _load_input(args.file, lambda p: Path(p).read_text(encoding="utf-8"))
    mode = args.mode
    if mode == "auto":
        mode = "statement" if lean.contains_sorry_token(code) else "proof"
    if mode == "statement":
        result = verifier.check(lean.VerificationRequest(code, cfg.lean_server.timeout_s))
        accepted = lean.statement_accepted(result, code)
    else:
        result, accepted = lean.check_proof(code, verifier, cfg.lean_server.timeout_s)
    for diag in result.diagnostics:
        where = f"{diag.line}:{diag.col} " if diag.line is not None else ""
        print(f"{where}[{diag.severity.value}] {diag.message}")
    print(f"{mode}: {'accepted' if accepted else 'rejected'}")
    return 0 if accepted else 1


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lemmaforge",
        description="Mine, vet, formalize, and prove candidate Lean lemmas.",
    )
    parser.add_argument("--config", help="path to the run config JSON")
    parser.add_argument("--workdir", help="override the config workdir")
    parser.add_argument("--mock-llm", help="scripted chat-completions responses (JSON file)")
    parser.add_argument("--mock-lean", help="scripted verifier diagnostics (JSON file)")
    parser.add_argument("--verbose", action="store_true", help="debug logging")
    for stage in StageName:
        parser.add_argument(
            f"--concurrency-{stage.value}",
            dest=f"concurrency_{stage.value}",
            type=int,
            help=f"worker count for the {stage.value} stage",
        )
    sub = parser.add_subparsers(dest="command", required=True)

    for name, text in (
        ("discover", "run discovery on the configured seeds"),
        ("judge", "drain the raw queue through the judge"),
        ("formalize", "drain the judged queue through repair"),
        ("prove", "drain the compilable queue through the prover"),
        ("run", "all four stages in sequence"),
    ):
        sp = sub.add_parser(name, help=text)
        sp.set_defaults(func=_cmd_stage)

    sp = sub.add_parser("export-bench", help="write the benchmark JSONL")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=_cmd_export_bench)

    sp = sub.add_parser("eval", help="evaluate a prover profile on a bench file")
    sp.add_argument("--bench", required=True)
    sp.add_argument("--records", required=True, help="JSONL evaluation records (appended)")
    sp.add_argument("--profile", help="endpoint profile name (model id with --mock-llm)")
    sp.add_argument("--report", help="write the report JSON here")
    sp.add_argument("--plot-dir", help="write Success@t bar charts here")
    sp.set_defaults(func=_cmd_eval)

    sp = sub.add_parser("stats", help="funnel or success tables")
    sp.add_argument("--table", choices=("funnel", "success"), required=True)
    sp.add_argument("--counts", help="funnel counts fixture JSON (skips the workdir)")
    sp.add_argument("--records", help="evaluation records JSONL")
    sp.add_argument("--bench", help="bench instances JSONL")
    sp.add_argument("--json-out", dest="json_out", help="also write the table as JSON")
    sp.add_argument("--plot-dir", help="write charts here (success table only)")
    sp.set_defaults(func=_cmd_stats)

    sp = sub.add_parser("audit-sample", help="draw a stratified manual-audit sample")
    sp.add_argument("--per-seed", type=int, default=2)
    sp.add_argument("--scope", choices=("unproved", "all"), default="unproved")
    sp.add_argument("--records", help="evaluation records JSONL defining 'solved'")
    sp.add_argument("--rng-seed", type=int, default=None)
    sp.add_argument("--out", help="write sampled instances as JSONL")
    sp.set_defaults(func=_cmd_audit_sample)

    sp = sub.add_parser("verify", help="check one Lean file")
    sp.add_argument("--file", required=True)
    sp.add_argument("--mode", choices=("statement", "proof", "auto"), default="auto")
    sp.set_defaults(func=_cmd_verify)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (llm.BackendUnavailable, llm.ProtocolError, lean.VerifierProtocolError) as exc:
        print(f"backend failure: {exc}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        print("interrupted; queues are intact and leases will expire", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
