"""Stage orchestration: prompt rendering, the four stage handlers, and the
worker loops that drain the queues.

The generate-verify-repair loops live here. Each handler takes a candidate
and returns the advanced candidate; persistence and lease bookkeeping stay in
the store so handlers remain pure enough to golden-test.
"""

from __future__ import annotations

import logging
import re
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from importlib import resources
from typing import Iterable, Mapping, Sequence

from . import extract, lean, llm
from .model import (
    Candidate,
    Diagnostic,
    LifecycleEvent,
    RawGeneration,
    SeedContext,
    Severity,
    Stage,
    StageConfig,
    StageName,
    Transcript,
    TranscriptEntry,
    advance_stage,
    candidate_id,
)
from .store import ArtifactStore

logger = logging.getLogger(__name__)


class TemplateError(Exception):
    """A template placeholder was left without a value."""


PLACEHOLDERS = ("LEAN_FILE", "LEAN_STATEMENT", "HISTORY", "LEMMA_WITH_SORRY", "MARKER")
_PLACEHOLDER_RE = re.compile(r"\{(" + "|".join(PLACEHOLDERS) + r")\}")


@dataclass(frozen=True)
class PromptTemplate:
    stage: StageName
    body: str

    def render(self, **values: str) -> str:
        """Substitute placeholders in one pass.

        Values are never re-scanned, so code containing a literal placeholder
        string cannot recurse. A placeholder present in the body but missing
        from `values` raises TemplateError.
        """

        def _sub(match: re.Match[str]) -> str:
            name = match.group(1)
            if name not in values:
                raise TemplateError(f"{self.stage.value} template: no value for {{{name}}}")
            return values[name]

        return _PLACEHOLDER_RE.sub(_sub, self.body)


def load_default_templates() -> dict[StageName, PromptTemplate]:
    out = {}
    for stage in StageName:
        body = resources.files("lemmaforge.prompts").joinpath(f"{stage.value}.txt").read_text(
            encoding="utf-8"
        )
        out[stage] = PromptTemplate(stage, body)
    return out


def render_history(entries: Sequence[TranscriptEntry]) -> str:
    """Render failed attempts for a repair prompt.

    Blocks are append-only: the rendering of n entries is a byte prefix of
    the rendering of n+1, so a model always sees its earlier feedback
    verbatim.
    """
    parts = []
    for i, entry in enumerate(entries, start=1):
        lines = [f"--- attempt {i} code ---", entry.code, "--- errors ---"]
        for diag in entry.diagnostics:
            if diag.line is not None:
                where = f"line {diag.line}, col {diag.col if diag.col is not None else 0}: "
            else:
                where = ""
            lines.append(f"{where}[{diag.severity.value}] {diag.message}")
        parts.append("\n".join(lines) + "\n")
    return "".join(parts)


# ---------------------------------------------------------------------------
# Helpers shared by the repair loops
# ---------------------------------------------------------------------------


def _snippet(preamble: str, statement: str) -> str:
    return f"{preamble}\n\n{statement}" if preamble else statement


def _synthetic(message: str) -> tuple[Diagnostic, ...]:
    return (Diagnostic(Severity.ERROR, message),)


def _context_and_declaration(snippet: str) -> tuple[str, str]:
    """Split an extracted snippet into leading context lines and the
    declaration block (first column-0 lemma/theorem or attribute line to the
    end). Returns ("", "") when no declaration is present."""
    lines = snippet.split("\n")
    context: list[str] = []
    start = None
    for i, line in enumerate(lines):
        token = line.split(None, 1)[0] if line.split() else ""
        column0 = bool(line) and not line[0].isspace()
        if column0 and (token in ("lemma", "theorem") or line.lstrip().startswith("@[")):
            start = i
            break
        if token in ("import", "open", "set_option", "variable", "universe"):
            context.append(line.strip())
    if start is None:
        return "", ""
    declaration = "\n".join(lines[start:]).rstrip()
    return "\n".join(context), declaration


def _merge_preamble(current: str, extracted_context: str) -> str:
    """Working preamble for the next repair round: keep current import lines
    (the model is told not to add imports), adopt the extracted context."""
    if not extracted_context:
        return current
    keep = [
        line.strip()
        for line in current.split("\n")
        if line.strip() and line.split()[0] == "import"
    ]
    merged: list[str] = []
    for line in keep + [l for l in extracted_context.split("\n") if l.strip()]:
        if line not in merged:
            merged.append(line)
    return "\n".join(merged)


def prove_loop(
    preamble: str,
    statement: str,
    key: str,
    cfg: StageConfig,
    backend: llm.LlmBackend,
    verifier: lean.Verifier,
    template: PromptTemplate,
    k_repairs: int,
    timeout_s: int = lean.DEFAULT_TIMEOUT_S,
) -> tuple[int | None, str | None, list[TranscriptEntry]]:
    """Generate-verify-repair on one statement.

    Returns (repairs_used, proof, failed_entries); repairs_used is None when
    all k_repairs + 1 attempts failed. The accepted proof must restate the
    statement verbatim up to its sorry tail and contain exactly one
    declaration; violations burn the attempt with a synthetic diagnostic.
    """
    lemma_block = _snippet(preamble, statement)
    prefix = lean.statement_prefix(statement)
    entries: list[TranscriptEntry] = []
    for attempt in range(k_repairs + 1):
        prompt = template.render(
            LEMMA_WITH_SORRY=lemma_block,
            HISTORY=render_history(entries),
            MARKER=cfg.marker,
        )
        route = llm.CallRoute(StageName.PROVE.value, key, attempt)
        try:
            response = backend.complete(llm.stage_request(cfg, prompt), route)
            text = extract.strip_reasoning_markup(response.content)
            snippet = extract.extract_after_marker(text, extract.ExtractionRules(cfg.marker))
        except extract.MarkerMissing:
            entries.append(TranscriptEntry("", _synthetic("extraction: marker missing")))
            continue
        except llm.Truncated:
            entries.append(TranscriptEntry("", _synthetic("llm: response truncated")))
            continue
        norm = snippet.replace("\r\n", "\n")
        if prefix not in norm:
            entries.append(
                TranscriptEntry(snippet, _synthetic("proof does not restate the statement"))
            )
            continue
        context, declaration = _context_and_declaration(norm)
        if not declaration:
            entries.append(
                TranscriptEntry(snippet, _synthetic("extraction: no declaration found"))
            )
            continue
        try:
            code = lean.build_file(context or preamble, declaration, cfg.injection_preamble)
        except lean.InvalidDeclaration as exc:
            entries.append(TranscriptEntry(snippet, _synthetic(f"proof rejected: {exc}")))
            continue
        result, accepted = lean.check_proof(code, verifier, timeout_s)
        if accepted:
            return attempt, snippet, entries
        entries.append(TranscriptEntry(snippet, result.diagnostics))
    return None, None, entries


# ---------------------------------------------------------------------------
# Pipeline
# ---------------------------------------------------------------------------


@dataclass
class RunSummary:
    counts_by_domain: dict[str, dict[Stage, int]] = field(default_factory=dict)
    completed: bool = True

    def total(self, stage: Stage) -> int:
        return sum(row.get(stage, 0) for row in self.counts_by_domain.values())


class Pipeline:
    """Wires the store, backends, and verifier into the four stage loops."""

    def __init__(
        self,
        store: ArtifactStore,
        backends: Mapping[StageName, llm.LlmBackend],
        verifier: lean.Verifier,
        stage_configs: Mapping[StageName, StageConfig],
        *,
        lean_timeout_s: int = lean.DEFAULT_TIMEOUT_S,
        lease_s: float | None = None,
        templates: Mapping[StageName, PromptTemplate] | None = None,
        run_meta: dict | None = None,
    ) -> None:
        self.store = store
        self.backends = backends
        self.verifier = verifier
        self.configs = stage_configs
        self.lean_timeout_s = lean_timeout_s
        self.lease_s = lease_s if lease_s is not None else 2.0 * lean_timeout_s
        self.templates = dict(templates or load_default_templates())
        self.run_meta = run_meta or {}
        self.abort = threading.Event()

    # -- discovery -------------------------------------------------------------

    def discover_seed(self, seed: SeedContext) -> int:
        """Run discovery on one seed and enqueue the split candidates.

        Idempotent per seed: a persisted discovery record short-circuits, and
        candidate ids make re-ingestion a no-op.
        """
        if self.store.has_discovery_record(seed.seed_id):
            logger.info("discovery: seed %s already processed", seed.seed_id)
            return 0
        cfg = self.configs[StageName.DISCOVERY]
        prompt = self.templates[StageName.DISCOVERY].render(
            LEAN_FILE=seed.content, MARKER=cfg.marker
        )
        route = llm.CallRoute(StageName.DISCOVERY.value, seed.seed_id, 0)
        response = self.backends[StageName.DISCOVERY].complete(llm.stage_request(cfg, prompt), route)
        text = extract.strip_reasoning_markup(response.content)
        try:
            snippet = extract.extract_after_marker(text, extract.ExtractionRules(cfg.marker))
        except extract.MarkerMissing:
            logger.warning("discovery: seed %s response has no marker; zero candidates", seed.seed_id)
            self.store.write_discovery_record(
                RawGeneration(seed.seed_id, response.content, None).to_dict()
            )
            return 0
        stats = extract.SplitStats()
        pairs = extract.split_candidates(snippet, stats)
        if stats.discarded_lines:
            logger.info(
                "discovery: seed %s dropped %d non-lemma lines", seed.seed_id, stats.discarded_lines
            )
        enqueued = 0
        for preamble, statement in pairs:
            cid = candidate_id(seed.seed_id, preamble, statement)
            cand = Candidate(
                candidate_id=cid,
                seed_id=seed.seed_id,
                domain=seed.domain,
                topic=seed.topic,
                preamble=preamble,
                statement=statement,
                stage=Stage.RAW,
            )
            if self.store.enqueue(Stage.RAW, cand):
                enqueued += 1
        self.store.write_discovery_record(
            RawGeneration(seed.seed_id, response.content, snippet).to_dict()
        )
        logger.info("discovery: seed %s yielded %d candidates", seed.seed_id, enqueued)
        return enqueued

    # -- judge -------------------------------------------------------------------

    def judge_candidate(self, cand: Candidate) -> Candidate:
        cfg = self.configs[StageName.JUDGE]
        prompt = self.templates[StageName.JUDGE].render(
            LEAN_STATEMENT=_snippet(cand.preamble, cand.statement)
        )
        route = llm.CallRoute(StageName.JUDGE.value, cand.candidate_id, 0)
        try:
            response = self.backends[StageName.JUDGE].complete(llm.stage_request(cfg, prompt), route)
            verdict = extract.parse_verdict(extract.strip_reasoning_markup(response.content))
        except llm.Truncated:
            verdict = extract.ParsedVerdict.UNPARSEABLE
        if verdict is extract.ParsedVerdict.CORRECT:
            return advance_stage(cand, LifecycleEvent.JUDGE_ACCEPT)
        rejected = advance_stage(cand, LifecycleEvent.JUDGE_REJECT)
        if verdict is extract.ParsedVerdict.UNPARSEABLE:
            rejected = rejected.with_flag("judge_unparseable", True)
        return rejected

    # -- formalize ------------------------------------------------------------------

    def formalize_candidate(self, cand: Candidate) -> Candidate:
        """Trial 0 verifies the statement as-is; each repair round feeds the
        compiler transcript back to the model. Duplicate declarations reject
        immediately at any trial."""
        cfg = self.configs[StageName.FORMALIZE]
        budget = cfg.trial_budget
        rules = extract.ExtractionRules(cfg.marker)
        template = self.templates[StageName.FORMALIZE]
        backend = self.backends[StageName.FORMALIZE]
        preamble, statement = cand.preamble, cand.statement
        entries: list[TranscriptEntry] = []
        calls = 0

        result, accepted = lean.check_statement(
            preamble, statement, self.verifier, cfg.injection_preamble, self.lean_timeout_s
        )
        duplicate = lean.has_duplicate_declaration(result.diagnostics)
        while not accepted and not duplicate and calls < budget:
            entries.append(TranscriptEntry(_snippet(preamble, statement), result.diagnostics))
            route = llm.CallRoute(StageName.FORMALIZE.value, cand.candidate_id, calls)
            calls += 1
            prompt = template.render(HISTORY=render_history(entries), MARKER=cfg.marker)
            try:
                response = backend.complete(llm.stage_request(cfg, prompt), route)
                text = extract.strip_reasoning_markup(response.content)
                snippet = extract.extract_after_marker(text, rules)
            except extract.MarkerMissing:
                result = lean.VerificationResult(
                    _synthetic("extraction: marker missing"), 0.0, True
                )
                continue
            except llm.Truncated:
                result = lean.VerificationResult(_synthetic("llm: response truncated"), 0.0, True)
                continue
            context, declaration = _context_and_declaration(snippet.replace("\r\n", "\n"))
            if not declaration:
                result = lean.VerificationResult(
                    _synthetic("extraction: no declaration found"), 0.0, True
                )
                continue
            preamble = _merge_preamble(preamble, context)
            statement = declaration
            result, accepted = lean.check_statement(
                preamble, statement, self.verifier, cfg.injection_preamble, self.lean_timeout_s
            )
            duplicate = lean.has_duplicate_declaration(result.diagnostics)

        if not accepted:
            entries.append(TranscriptEntry(_snippet(preamble, statement), result.diagnostics))
        updated = replace(
            cand,
            preamble=preamble,
            statement=statement,
            formalize_trials=calls,
            transcript=cand.transcript.extend(entries),
        )
        if accepted:
            return advance_stage(updated, LifecycleEvent.COMPILE_OK)
        rejected = advance_stage(updated, LifecycleEvent.COMPILE_FAIL)
        if duplicate:
            rejected = rejected.with_flag("duplicate_declaration", True)
        return rejected

    # -- prove ---------------------------------------------------------------------

    def prove_candidate(self, cand: Candidate) -> Candidate:
        cfg = self.configs[StageName.PROVE]
        try:
            trivial = lean.triviality_check(
                cand.preamble,
                cand.statement,
                self.verifier,
                cfg.injection_preamble,
                self.lean_timeout_s,
            )
        except lean.NotCheckable:
            logger.warning("prove: %s has no sorry tail to probe", cand.candidate_id)
            cand = cand.with_flag("triviality_uncheckable", True)
            trivial = False
        if trivial:
            return advance_stage(cand, LifecycleEvent.TRIVIAL_HIT)
        repairs, proof, entries = prove_loop(
            cand.preamble,
            cand.statement,
            cand.candidate_id,
            cfg,
            self.backends[StageName.PROVE],
            self.verifier,
            self.templates[StageName.PROVE],
            cfg.trial_budget,
            self.lean_timeout_s,
        )
        updated = replace(cand, transcript=cand.transcript.extend(entries))
        if repairs is not None:
            updated = replace(updated, proof=proof, prove_trials=repairs)
            return advance_stage(updated, LifecycleEvent.PROOF_OK)
        updated = replace(updated, prove_trials=cfg.trial_budget + 1)
        return advance_stage(updated, LifecycleEvent.PROOF_FAIL)

    # -- worker loops -----------------------------------------------------------------

    def run_discovery(self, seeds: Iterable[SeedContext]) -> bool:
        cfg = self.configs[StageName.DISCOVERY]
        pending = [s for s in seeds if not self.store.has_discovery_record(s.seed_id)]

        def worker(seed: SeedContext) -> None:
            if self.abort.is_set():
                return
            try:
                self.discover_seed(seed)
            except llm.BackendUnavailable as exc:
                logger.error("discovery: backend unavailable (%s); seed %s kept", exc, seed.seed_id)
                self.abort.set()

        with ThreadPoolExecutor(max_workers=cfg.concurrency) as pool:
            list(pool.map(worker, pending))
        return not self.abort.is_set()

    def run_stage(self, input_stage: Stage, handler, concurrency: int) -> bool:
        """Drain one queue with a pool of lease-ack workers. Returns False
        when a backend outage forced a clean early stop (queue left intact)."""

        def worker(index: int) -> None:
            worker_id = f"{input_stage.value}-w{index}"
            while not self.abort.is_set():
                leased = self.store.lease(input_stage, worker_id, self.lease_s)
                if leased is None:
                    return
                cid = leased.candidate.candidate_id
                try:
                    updated = handler(leased.candidate)
                except llm.BackendUnavailable as exc:
                    logger.error("%s: backend unavailable (%s); stopping", input_stage.value, exc)
                    self.store.release(input_stage, cid, worker_id)
                    self.abort.set()
                    return
                self.store.ack(input_stage, updated, worker_id)

        with ThreadPoolExecutor(max_workers=concurrency) as pool:
            futures = [pool.submit(worker, i) for i in range(concurrency)]
            for future in futures:
                future.result()
        return not self.abort.is_set()

    def run_all(self, seeds: Sequence[SeedContext]) -> RunSummary:
        """Discovery, judge, formalize, prove, in waves; resumable at any
        point because every unit of progress is a persisted queue move."""
        if self.run_meta:
            self.store.write_run_meta(self.run_meta)
        ok = self.run_discovery(seeds)
        if ok:
            ok = self.run_stage(
                Stage.RAW, self.judge_candidate, self.configs[StageName.JUDGE].concurrency
            )
        if ok:
            ok = self.run_stage(
                Stage.JUDGED,
                self.formalize_candidate,
                self.configs[StageName.FORMALIZE].concurrency,
            )
        if ok:
            ok = self.run_stage(
                Stage.COMPILABLE, self.prove_candidate, self.configs[StageName.PROVE].concurrency
            )
        return RunSummary(self.store.counts_by_domain(), completed=ok)
