"""Benchmark export, funnel statistics, Success@t evaluation, and audit
sampling.

Metrics are pure functions over records so they can be checked against
brute-force oracles; rendering keeps the published table shapes (one decimal
for funnel percentages, two for success rates, integers for audit rates).
"""

from __future__ import annotations

import json
import logging
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

from . import lean, llm
from .model import Candidate, Domain, Stage, StageConfig
from .pipeline import PromptTemplate, StageName, load_default_templates, prove_loop
from .store import ArtifactStore

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1

DOMAIN_ORDER = [d.value for d in Domain]


def _domain_sort_key(name: str) -> tuple[int, str]:
    try:
        return (DOMAIN_ORDER.index(name), name)
    except ValueError:
        return (len(DOMAIN_ORDER), name)


# ---------------------------------------------------------------------------
# Bench instances and evaluation records
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BenchInstance:
    id: str
    domain: Domain
    topic: str
    context: str
    statement: str
    trivial: bool = False

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "domain": self.domain.value,
            "topic": self.topic,
            "context": self.context,
            "statement": self.statement,
            "trivial": self.trivial,
        }

    @classmethod
    def from_dict(cls, raw: Mapping[str, Any]) -> "BenchInstance":
        return cls(
            id=raw["id"],
            domain=Domain(raw["domain"]),
            topic=raw.get("topic", ""),
            context=raw.get("context", ""),
            statement=raw["statement"],
            trivial=bool(raw.get("trivial", False)),
        )


@dataclass(frozen=True)
class EvalRecord:
    instance_id: str
    model: str
    solved_at: int | None
    proof: str | None = None

    def __post_init__(self) -> None:
        if self.solved_at is not None and not self.proof:
            raise ValueError("a solved record must carry its proof")

    def to_dict(self) -> dict[str, Any]:
        return {
            "instance_id": self.instance_id,
            "model": self.model,
            "solved_at": self.solved_at,
            "proof": self.proof,
        }

    @classmethod
    def from_dict(cls, raw: Mapping[str, Any]) -> "EvalRecord":
        return cls(
            instance_id=raw["instance_id"],
            model=raw["model"],
            solved_at=raw.get("solved_at"),
            proof=raw.get("proof"),
        )


def load_bench(path: str | Path) -> list[BenchInstance]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                out.append(BenchInstance.from_dict(json.loads(line)))
    return out


def load_records(path: str | Path) -> list[EvalRecord]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                out.append(EvalRecord.from_dict(json.loads(line)))
    return out


def export_bench(
    store: ArtifactStore,
    out_path: str | Path,
    verifier: lean.Verifier,
    injection: Sequence[str] = (),
    timeout_s: int = lean.DEFAULT_TIMEOUT_S,
) -> int:
    """Write every candidate that reached Compilable as one JSONL line,
    re-verifying each statement first; instances that no longer type-check
    are skipped with a warning. Lines are sorted by id for stable diffs."""
    instances = []
    for cand in store.reached_compilable():
        _, accepted = lean.check_statement(
            cand.preamble, cand.statement, verifier, injection, timeout_s
        )
        if not accepted:
            logger.warning("export: %s no longer type-checks; skipped", cand.candidate_id)
            continue
        instances.append(
            BenchInstance(
                id=cand.candidate_id,
                domain=cand.domain,
                topic=cand.topic,
                context=cand.preamble,
                statement=cand.statement,
                trivial=cand.stage is Stage.TRIVIAL,
            )
        )
    instances.sort(key=lambda inst: inst.id)
    path = Path(out_path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for inst in instances:
            fh.write(json.dumps(inst.to_dict(), sort_keys=True) + "\n")
    return len(instances)


# ---------------------------------------------------------------------------
# Funnel statistics
# ---------------------------------------------------------------------------


def pct(numerator: int, denominator: int) -> float | None:
    """Percentage, or None on a zero denominator (rendered as absent)."""
    if denominator == 0:
        return None
    return 100.0 * numerator / denominator


def fmt_pct(value: float | None, decimals: int = 1) -> str:
    return "-" if value is None else f"{value:.{decimals}f}%"


@dataclass(frozen=True)
class FunnelRow:
    domain: str
    proposed: int
    correct: int
    compilable: int
    trivial: int | None = None

    @property
    def correct_pct(self) -> float | None:
        return pct(self.correct, self.proposed)

    @property
    def compilable_pct(self) -> float | None:
        return pct(self.compilable, self.correct)

    @property
    def trivial_pct(self) -> float | None:
        if self.trivial is None:
            return None
        return pct(self.trivial, self.compilable)

    def to_dict(self) -> dict[str, Any]:
        return {
            "domain": self.domain,
            "proposed": self.proposed,
            "correct": self.correct,
            "correct_pct": self.correct_pct,
            "compilable": self.compilable,
            "compilable_pct": self.compilable_pct,
            "trivial": self.trivial,
            "trivial_pct": self.trivial_pct,
        }


def funnel_stats(store: ArtifactStore) -> list[FunnelRow]:
    """Reconstruct the funnel from stage directory counts.

    Counts are derived by summation because an acked candidate lives only in
    its latest stage directory: compilable = pending-compilable + trivial +
    proved + unproved, correct adds pending-judged and rejected-formalize,
    proposed adds pending-raw and rejected-judge. On a completed run the
    pending terms are zero and the partitions are exact.
    """
    rows = []
    for domain, counts in sorted(
        store.counts_by_domain().items(), key=lambda kv: _domain_sort_key(kv[0])
    ):
        compilable = (
            counts[Stage.COMPILABLE]
            + counts[Stage.TRIVIAL]
            + counts[Stage.PROVED]
            + counts[Stage.UNPROVED]
        )
        correct = counts[Stage.JUDGED] + compilable + counts[Stage.REJECTED_FORMALIZE]
        proposed = counts[Stage.RAW] + correct + counts[Stage.REJECTED_JUDGE]
        rows.append(
            FunnelRow(
                domain=domain,
                proposed=proposed,
                correct=correct,
                compilable=compilable,
                trivial=counts[Stage.TRIVIAL],
            )
        )
    return rows


def funnel_from_counts(counts: Mapping[str, Mapping[str, int]]) -> list[FunnelRow]:
    """Build funnel rows straight from published per-domain counts."""
    rows = []
    for domain, row in sorted(counts.items(), key=lambda kv: _domain_sort_key(kv[0])):
        rows.append(
            FunnelRow(
                domain=domain,
                proposed=int(row["proposed"]),
                correct=int(row["correct"]),
                compilable=int(row["compilable"]),
                trivial=int(row["trivial"]) if "trivial" in row else None,
            )
        )
    return rows


def render_funnel(rows: Sequence[FunnelRow]) -> str:
    lines = [
        f"{'Domain':<14}{'Proposed':>10}{'Correct':>10}{'(%)':>9}{'Compilable':>12}{'(%)':>9}{'Trivial':>9}{'(%)':>9}"
    ]
    for row in rows:
        lines.append(
            f"{row.domain:<14}{row.proposed:>10}{row.correct:>10}{fmt_pct(row.correct_pct):>9}"
            f"{row.compilable:>12}{fmt_pct(row.compilable_pct):>9}"
            f"{row.trivial if row.trivial is not None else '-':>9}{fmt_pct(row.trivial_pct):>9}"
        )
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# Success@t and union rates
# ---------------------------------------------------------------------------


def _eligible_by_domain(instances: Sequence[BenchInstance]) -> dict[str, list[BenchInstance]]:
    by_domain: dict[str, list[BenchInstance]] = {}
    for inst in instances:
        if inst.trivial:
            continue
        by_domain.setdefault(inst.domain.value, []).append(inst)
    return by_domain


def _records_by_model(
    records: Sequence[EvalRecord],
) -> dict[str, dict[str, EvalRecord]]:
    by_model: dict[str, dict[str, EvalRecord]] = {}
    for rec in records:
        per = by_model.setdefault(rec.model, {})
        if rec.instance_id in per:
            raise ValueError(f"duplicate record for ({rec.model}, {rec.instance_id})")
        per[rec.instance_id] = rec
    return by_model


def success_at(
    records: Sequence[EvalRecord],
    instances: Sequence[BenchInstance],
    t: int,
) -> dict[tuple[str, str], float | None]:
    """Cumulative fraction of non-trivial instances solved with at most t
    repair rounds, per (model, domain). Instances without a record count as
    unsolved; a duplicate (model, instance) pair is an input error."""
    by_domain = _eligible_by_domain(instances)
    by_model = _records_by_model(records)
    out: dict[tuple[str, str], float | None] = {}
    for model, per in by_model.items():
        for domain, insts in by_domain.items():
            solved = 0
            for inst in insts:
                rec = per.get(inst.id)
                if rec is not None and rec.solved_at is not None and rec.solved_at <= t:
                    solved += 1
            out[(model, domain)] = pct(solved, len(insts))
    return out


def union_rate(
    records: Sequence[EvalRecord],
    instances: Sequence[BenchInstance],
    t: int | None = None,
) -> dict[str, float | None]:
    """Fraction solved by at least one model (within t repairs when given),
    per domain plus a Total row."""
    by_domain = _eligible_by_domain(instances)
    _records_by_model(records)  # raises on duplicates
    solved_ids = {
        rec.instance_id
        for rec in records
        if rec.solved_at is not None and (t is None or rec.solved_at <= t)
    }
    out: dict[str, float | None] = {}
    total_solved, total_count = 0, 0
    for domain, insts in sorted(by_domain.items(), key=lambda kv: _domain_sort_key(kv[0])):
        solved = sum(1 for inst in insts if inst.id in solved_ids)
        out[domain] = pct(solved, len(insts))
        total_solved += solved
        total_count += len(insts)
    out["Total"] = pct(total_solved, total_count)
    return out


@dataclass(frozen=True)
class EvalReport:
    """Success@t per model and domain, the union row, and denominators."""

    models: tuple[str, ...]
    domains: tuple[str, ...]
    budgets: tuple[int, ...]
    success: Mapping[str, Mapping[str, tuple[float | None, ...]]]
    union: Mapping[str, float | None]
    denominators: Mapping[str, int]

    def to_dict(self) -> dict[str, Any]:
        return {
            "schema_version": SCHEMA_VERSION,
            "budgets": list(self.budgets),
            "denominators": dict(self.denominators),
            "models": {
                model: {domain: list(values) for domain, values in rows.items()}
                for model, rows in self.success.items()
            },
            "union": dict(self.union),
        }


def build_report(
    records: Sequence[EvalRecord],
    instances: Sequence[BenchInstance],
    budgets: Sequence[int] = (0, 1, 2),
) -> EvalReport:
    by_domain = _eligible_by_domain(instances)
    domains = sorted(by_domain, key=_domain_sort_key)
    models = sorted({rec.model for rec in records})
    per_budget = {t: success_at(records, instances, t) for t in budgets}
    success: dict[str, dict[str, tuple[float | None, ...]]] = {}
    eligible = [inst for insts in by_domain.values() for inst in insts]
    by_model = _records_by_model(records)
    for model in models:
        rows: dict[str, tuple[float | None, ...]] = {}
        for domain in domains:
            rows[domain] = tuple(per_budget[t][(model, domain)] for t in budgets)
        per = by_model[model]
        totals = []
        for t in budgets:
            solved = sum(
                1
                for inst in eligible
                if (rec := per.get(inst.id)) is not None
                and rec.solved_at is not None
                and rec.solved_at <= t
            )
            totals.append(pct(solved, len(eligible)))
        rows["Total"] = tuple(totals)
        success[model] = rows
    denominators = {domain: len(by_domain[domain]) for domain in domains}
    denominators["Total"] = len(eligible)
    return EvalReport(
        models=tuple(models),
        domains=tuple(domains),
        budgets=tuple(budgets),
        success=success,
        union=union_rate(records, instances),
        denominators=denominators,
    )


def render_report(report: EvalReport) -> str:
    columns = list(report.domains) + ["Total"]
    t_max = report.budgets[-1] if report.budgets else 0
    width = max([len(m) for m in report.models] + [10]) + 2
    lines = [f"Success@{t_max} (cumulative, {'/'.join(str(t) for t in report.budgets)} repairs)"]
    lines.append(f"{'Model':<{width}}" + "".join(f"{c:>14}" for c in columns))
    for model in report.models:
        cells = []
        for domain in columns:
            values = report.success[model].get(domain)
            cells.append(fmt_pct(values[-1] if values else None, 2))
        lines.append(f"{model:<{width}}" + "".join(f"{c:>14}" for c in cells))
    union_cells = [fmt_pct(report.union.get(c), 2) for c in columns]
    lines.append(f"{'Union':<{width}}" + "".join(f"{c:>14}" for c in union_cells))
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# Model evaluation over an exported bench
# ---------------------------------------------------------------------------


def evaluate_model(
    instances: Sequence[BenchInstance],
    cfg: StageConfig,
    backend: llm.LlmBackend,
    verifier: lean.Verifier,
    records_path: str | Path,
    *,
    k_repairs: int | None = None,
    timeout_s: int = lean.DEFAULT_TIMEOUT_S,
    template: PromptTemplate | None = None,
) -> list[EvalRecord]:
    """Closed-book prover evaluation: each non-trivial instance gets up to
    k_repairs + 1 attempts. Records append to `records_path` as they finish,
    so an interrupted evaluation resumes where it stopped."""
    if k_repairs is None:
        k_repairs = cfg.trial_budget
    if template is None:
        template = load_default_templates()[StageName.PROVE]
    path = Path(records_path)
    path.parent.mkdir(parents=True, exist_ok=True)
    done: set[str] = set()
    records: list[EvalRecord] = []
    if path.exists():
        for rec in load_records(path):
            if rec.model == cfg.model:
                done.add(rec.instance_id)
                records.append(rec)
    todo = [inst for inst in sorted(instances, key=lambda i: i.id) if not inst.trivial and inst.id not in done]
    write_lock = threading.Lock()
    stop = threading.Event()

    def worker(inst: BenchInstance) -> None:
        if stop.is_set():
            return
        try:
            solved_at, proof, _ = prove_loop(
                inst.context,
                inst.statement,
                inst.id,
                cfg,
                backend,
                verifier,
                template,
                k_repairs,
                timeout_s,
            )
        except llm.BackendUnavailable as exc:
            logger.error("eval: backend unavailable (%s); partial records kept", exc)
            stop.set()
            return
        rec = EvalRecord(inst.id, cfg.model, solved_at, proof)
        with write_lock:
            with open(path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(rec.to_dict(), sort_keys=True) + "\n")
            records.append(rec)

    with ThreadPoolExecutor(max_workers=cfg.concurrency) as pool:
        list(pool.map(worker, todo))
    return records


# ---------------------------------------------------------------------------
# Audit sampling
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AuditSample:
    instances: tuple[BenchInstance, ...]
    tally: Mapping[str, int]
    shortfalls: tuple[tuple[str, int], ...]


def audit_sample(
    store: ArtifactStore,
    per_seed: int,
    scope: str = "unproved",
    rng_seed: int = 0,
    solved_ids: set[str] | None = None,
) -> AuditSample:
    """Stratified manual-audit sample: up to `per_seed` instances drawn
    uniformly per seed with a seeded PRNG.

    scope="unproved" keeps instances not solved by any evaluated model
    (`solved_ids` from evaluation records; the pipeline's own unproved stage
    when none are given); scope="all" keeps everything that reached
    Compilable. Seeds with fewer eligible instances than requested contribute
    what they have and are reported in `shortfalls`.
    """
    import random

    if scope not in ("unproved", "all"):
        raise ValueError(f"unknown audit scope: {scope!r}")
    eligible: list[Candidate] = []
    if scope == "all":
        eligible = list(store.reached_compilable())
    elif solved_ids is not None:
        eligible = [
            c
            for c in store.reached_compilable()
            if c.candidate_id not in solved_ids and c.stage is not Stage.TRIVIAL
        ]
    else:
        eligible = list(store.candidates_in(Stage.UNPROVED))

    by_seed: dict[str, list[Candidate]] = {}
    for cand in eligible:
        by_seed.setdefault(cand.seed_id, []).append(cand)

    rng = random.Random(rng_seed)
    sampled: list[BenchInstance] = []
    tally: dict[str, int] = {}
    shortfalls: list[tuple[str, int]] = []
    for seed_id in sorted(by_seed):
        group = sorted(by_seed[seed_id], key=lambda c: c.candidate_id)
        if len(group) <= per_seed:
            chosen = group
            if len(group) < per_seed:
                shortfalls.append((seed_id, len(group)))
        else:
            chosen = rng.sample(group, per_seed)
            chosen.sort(key=lambda c: c.candidate_id)
        for cand in chosen:
            sampled.append(
                BenchInstance(
                    id=cand.candidate_id,
                    domain=cand.domain,
                    topic=cand.topic,
                    context=cand.preamble,
                    statement=cand.statement,
                    trivial=cand.stage is Stage.TRIVIAL,
                )
            )
            tally[cand.domain.value] = tally.get(cand.domain.value, 0) + 1
    return AuditSample(tuple(sampled), tally, tuple(shortfalls))


def render_audit_table(rows: Sequence[tuple[str, int, int | None]]) -> str:
    """Audit tally with integer-precision rates. Rows are (domain, sampled,
    human_proved); proved may be None while the audit is still open."""
    lines = [f"{'Domain':<14}{'Sampled':>9}{'Proved':>8}{'Rate':>7}"]
    total_sampled, total_proved, any_proved = 0, 0, False
    for domain, sampled, proved in rows:
        total_sampled += sampled
        rate = "-"
        shown = "-"
        if proved is not None:
            any_proved = True
            total_proved += proved
            shown = str(proved)
            rate = f"{round(100.0 * proved / sampled)}%" if sampled else "-"
        lines.append(f"{domain:<14}{sampled:>9}{shown:>8}{rate:>7}")
    total_rate = (
        f"{round(100.0 * total_proved / total_sampled)}%" if any_proved and total_sampled else "-"
    )
    lines.append(
        f"{'Total':<14}{total_sampled:>9}{total_proved if any_proved else '-':>8}{total_rate:>7}"
    )
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# Plots
# ---------------------------------------------------------------------------


def plot_success(report: EvalReport, out_dir: str | Path) -> list[Path]:
    """One bar chart per domain column: Success@t per model across budgets."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    columns = list(report.domains) + ["Total"]
    for column in columns:
        fig, ax = plt.subplots(figsize=(7, 4))
        n_budgets = len(report.budgets)
        width = 0.8 / max(len(report.models), 1)
        for m_idx, model in enumerate(report.models):
            values = report.success[model].get(column, tuple([None] * n_budgets))
            xs = [t + m_idx * width for t in range(n_budgets)]
            ys = [v if v is not None else 0.0 for v in values]
            ax.bar(xs, ys, width=width, label=model)
        ax.set_xticks([t + 0.4 - width / 2 for t in range(n_budgets)])
        ax.set_xticklabels([f"@{t}" for t in report.budgets])
        ax.set_ylabel("solved (%)")
        ax.set_title(f"Success@t, {column}")
        ax.legend(fontsize=8)
        target = out / f"success_{column.lower()}.png"
        fig.savefig(target, dpi=120, bbox_inches="tight")
        plt.close(fig)
        written.append(target)
    return written
