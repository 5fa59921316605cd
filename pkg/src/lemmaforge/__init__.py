"""Agentic mining of Lean lemma candidates with kernel-checked gates.

Four stages feed a crash-safe filesystem queue: discovery drafts candidate
lemmas from seed files, a judge screens them for mathematical soundness, a
formalizer repairs them until the statement compiles, and a prover searches
for a kernel-accepted proof. Everything downstream of the queue is derived:
funnel tables, the exported benchmark, Success@t reports, and audit samples.
"""

from __future__ import annotations

from .bench import (
    BenchInstance,
    EvalRecord,
    EvalReport,
    audit_sample,
    build_report,
    export_bench,
    funnel_from_counts,
    funnel_stats,
    render_funnel,
    render_report,
    success_at,
    union_rate,
)
from .config import ConfigError, EndpointProfile, LeanServerConfig, RunConfig, load_config
from .extract import (
    ExtractionRules,
    MarkerMissing,
    ParsedVerdict,
    extract_after_marker,
    last_code_block,
    parse_verdict,
    split_candidates,
    strip_reasoning_markup,
)
from .lean import (
    HttpVerifier,
    ScriptedVerifier,
    VerificationRequest,
    VerificationResult,
    build_file,
    check_proof,
    check_statement,
    contains_sorry_token,
    proof_accepted,
    statement_accepted,
    triviality_check,
)
from .llm import (
    BackendUnavailable,
    CallRoute,
    ChatRequest,
    ChatResponse,
    HttpBackend,
    ProtocolError,
    RetryPolicy,
    ScriptedBackend,
    Truncated,
)
from .model import (
    Candidate,
    Diagnostic,
    Domain,
    LifecycleEvent,
    SeedContext,
    Severity,
    Stage,
    StageConfig,
    StageName,
    Transcript,
    TranscriptEntry,
    Verdict,
    advance_stage,
    candidate_id,
)
from .pipeline import Pipeline, PromptTemplate, RunSummary, load_default_templates, render_history
from .store import ArtifactStore, StageMismatch, StaleLease

__version__ = "0.1.0"

__all__ = [
    "ArtifactStore",
    "BackendUnavailable",
    "BenchInstance",
    "CallRoute",
    "Candidate",
    "ChatRequest",
    "ChatResponse",
    "ConfigError",
    "Diagnostic",
    "Domain",
    "EndpointProfile",
    "EvalRecord",
    "EvalReport",
    "ExtractionRules",
    "HttpBackend",
    "HttpVerifier",
    "LeanServerConfig",
    "LifecycleEvent",
    "MarkerMissing",
    "ParsedVerdict",
    "Pipeline",
    "PromptTemplate",
    "ProtocolError",
    "RetryPolicy",
    "RunConfig",
    "RunSummary",
    "ScriptedBackend",
    "ScriptedVerifier",
    "SeedContext",
    "Severity",
    "Stage",
    "StageConfig",
    "StageMismatch",
    "StageName",
    "StaleLease",
    "Transcript",
    "TranscriptEntry",
    "Truncated",
    "VerificationRequest",
    "VerificationResult",
    "Verdict",
    "advance_stage",
    "audit_sample",
    "build_file",
    "build_report",
    "candidate_id",
    "check_proof",
    "check_statement",
    "contains_sorry_token",
    "export_bench",
    "extract_after_marker",
    "funnel_from_counts",
    "funnel_stats",
    "last_code_block",
    "load_config",
    "load_default_templates",
    "parse_verdict",
    "proof_accepted",
    "render_funnel",
    "render_history",
    "render_report",
    "split_candidates",
    "statement_accepted",
    "strip_reasoning_markup",
    "success_at",
    "triviality_check",
    "union_rate",
    "__version__",
]
