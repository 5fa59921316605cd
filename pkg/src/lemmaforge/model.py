"""Core domain types for the lemma mining pipeline.

The candidate lifecycle is a small state machine:

    Raw -> Judged | RejectedJudge
    Judged -> Compilable | RejectedFormalize
    Compilable -> Trivial | Proved | Unproved

Everything here is an immutable value object. Stage advancement returns a new
record instead of mutating shared state, so records can be handed freely
between worker threads and serialized at any point.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from enum import Enum
from typing import Any, Mapping


class StateMachineError(Exception):
    """Raised on an illegal lifecycle transition or stage mismatch."""


class InvalidCandidateError(ValueError):
    """Raised when a candidate or seed violates a construction precondition."""


def now_iso() -> str:
    return datetime.now(timezone.utc).isoformat()


# ---------------------------------------------------------------------------
# Enums
# ---------------------------------------------------------------------------


class Domain(str, Enum):
    FOUNDATIONAL = "Foundational"
    APPLIED = "Applied"
    ABSTRACT = "Abstract"


class Stage(str, Enum):
    RAW = "raw"
    JUDGED = "judged"
    COMPILABLE = "compilable"
    PROVED = "proved"
    REJECTED_JUDGE = "rejected_judge"
    REJECTED_FORMALIZE = "rejected_formalize"
    UNPROVED = "unproved"
    TRIVIAL = "trivial"


TERMINAL_STAGES = frozenset(
    {
        Stage.PROVED,
        Stage.REJECTED_JUDGE,
        Stage.REJECTED_FORMALIZE,
        Stage.UNPROVED,
        Stage.TRIVIAL,
    }
)


class LifecycleEvent(str, Enum):
    JUDGE_ACCEPT = "judge_accept"
    JUDGE_REJECT = "judge_reject"
    COMPILE_OK = "compile_ok"
    COMPILE_FAIL = "compile_fail"
    PROOF_OK = "proof_ok"
    PROOF_FAIL = "proof_fail"
    TRIVIAL_HIT = "trivial_hit"


class Verdict(str, Enum):
    CORRECT = "correct"
    WRONG = "wrong"


class Severity(str, Enum):
    ERROR = "error"
    WARNING = "warning"
    INFO = "info"

    @classmethod
    def from_wire(cls, raw: str) -> "Severity":
        # Unknown severities must surface as decode errors, never be coerced.
        try:
            return cls(raw.lower())
        except ValueError:
            raise ValueError(f"unknown diagnostic severity: {raw!r}") from None


class StageName(str, Enum):
    """The four model-facing pipeline stages."""

    DISCOVERY = "discovery"
    JUDGE = "judge"
    FORMALIZE = "formalize"
    PROVE = "prove"


# ---------------------------------------------------------------------------
# Value objects
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SeedContext:
    """One seed source file handed to the discovery stage."""

    seed_id: str
    path: str
    domain: Domain
    topic: str
    content: str

    def __post_init__(self) -> None:
        if not self.seed_id:
            raise InvalidCandidateError("seed_id must be non-empty")
        if not self.content:
            raise InvalidCandidateError(f"seed {self.seed_id}: content must be non-empty")


@dataclass(frozen=True)
class RawGeneration:
    """The unparsed discovery response kept for audit, plus what was extracted."""

    seed_id: str
    text: str
    extracted: str | None = None

    def to_dict(self) -> dict[str, Any]:
        return {"seed_id": self.seed_id, "text": self.text, "extracted": self.extracted}

    @classmethod
    def from_dict(cls, raw: Mapping[str, Any]) -> "RawGeneration":
        return cls(seed_id=raw["seed_id"], text=raw["text"], extracted=raw.get("extracted"))


@dataclass(frozen=True)
class Diagnostic:
    severity: Severity
    message: str
    line: int | None = None
    col: int | None = None

    def to_dict(self) -> dict[str, Any]:
        return {
            "severity": self.severity.value,
            "message": self.message,
            "line": self.line,
            "col": self.col,
        }

    @classmethod
    def from_dict(cls, raw: Mapping[str, Any]) -> "Diagnostic":
        return cls(
            severity=Severity.from_wire(raw["severity"]),
            message=raw["message"],
            line=raw.get("line"),
            col=raw.get("col"),
        )


@dataclass(frozen=True)
class TranscriptEntry:
    """One failed attempt: the code that was tried and what the compiler said."""

    code: str
    diagnostics: tuple[Diagnostic, ...] = ()

    def to_dict(self) -> dict[str, Any]:
        return {"code": self.code, "diagnostics": [d.to_dict() for d in self.diagnostics]}

    @classmethod
    def from_dict(cls, raw: Mapping[str, Any]) -> "TranscriptEntry":
        return cls(
            code=raw["code"],
            diagnostics=tuple(Diagnostic.from_dict(d) for d in raw.get("diagnostics", [])),
        )


@dataclass(frozen=True)
class Transcript:
    """Append-only attempt history; `append` returns a new transcript."""

    entries: tuple[TranscriptEntry, ...] = ()

    def append(self, entry: TranscriptEntry) -> "Transcript":
        return Transcript(self.entries + (entry,))

    def extend(self, entries: tuple[TranscriptEntry, ...] | list[TranscriptEntry]) -> "Transcript":
        return Transcript(self.entries + tuple(entries))

    def __len__(self) -> int:
        return len(self.entries)

    def to_list(self) -> list[dict[str, Any]]:
        return [e.to_dict() for e in self.entries]

    @classmethod
    def from_list(cls, raw: list[Mapping[str, Any]]) -> "Transcript":
        return cls(tuple(TranscriptEntry.from_dict(e) for e in raw))


@dataclass(frozen=True)
class StageConfig:
    """Sampling and budget knobs for one model-facing stage."""

    stage: StageName
    model: str
    temperature: float = 1.0
    top_p: float = 1.0
    max_completion_tokens: int = 50_000
    reasoning_effort: str | None = None
    marker: str = ""
    trial_budget: int = 0
    concurrency: int = 1
    injection_preamble: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if self.stage is StageName.JUDGE:
            if self.marker:
                raise InvalidCandidateError("judge stage takes no extraction marker")
        elif not self.marker:
            raise InvalidCandidateError(f"{self.stage.value} stage requires a non-empty marker")
        if self.temperature < 0:
            raise InvalidCandidateError("temperature must be >= 0")
        if not 0 < self.top_p <= 1:
            raise InvalidCandidateError("top_p must be in (0, 1]")
        if self.max_completion_tokens <= 0:
            raise InvalidCandidateError("max_completion_tokens must be positive")
        if self.trial_budget < 0:
            raise InvalidCandidateError("trial_budget must be >= 0")
        if self.concurrency < 1:
            raise InvalidCandidateError("concurrency must be >= 1")
        if self.reasoning_effort is not None and self.reasoning_effort not in (
            "none",
            "low",
            "medium",
            "high",
        ):
            raise InvalidCandidateError(f"unknown reasoning_effort: {self.reasoning_effort!r}")


_CANDIDATE_FIELDS = (
    "candidate_id",
    "seed_id",
    "domain",
    "topic",
    "preamble",
    "statement",
    "proof",
    "stage",
    "formalize_trials",
    "prove_trials",
    "verdict",
    "transcript",
    "created_at",
    "updated_at",
)


@dataclass(frozen=True)
class Candidate:
    """One lemma candidate moving through the lifecycle.

    `extra` carries fields this version does not know about so that records
    written by a newer tool round-trip without loss.
    """

    candidate_id: str
    seed_id: str
    domain: Domain
    topic: str
    preamble: str
    statement: str
    stage: Stage
    proof: str | None = None
    formalize_trials: int = 0
    prove_trials: int = 0
    verdict: Verdict | None = None
    transcript: Transcript = field(default_factory=Transcript)
    created_at: str = field(default_factory=now_iso)
    updated_at: str = field(default_factory=now_iso)
    extra: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.statement.strip():
            raise InvalidCandidateError("candidate statement must be non-empty")
        if self.stage is Stage.PROVED and not self.proof:
            raise InvalidCandidateError("proved candidate must carry a proof")

    def with_flag(self, key: str, value: Any) -> "Candidate":
        merged = dict(self.extra)
        merged[key] = value
        return replace(self, extra=merged)

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = dict(self.extra)
        out.update(
            {
                "candidate_id": self.candidate_id,
                "seed_id": self.seed_id,
                "domain": self.domain.value,
                "topic": self.topic,
                "preamble": self.preamble,
                "statement": self.statement,
                "proof": self.proof,
                "stage": self.stage.value,
                "formalize_trials": self.formalize_trials,
                "prove_trials": self.prove_trials,
                "verdict": self.verdict.value if self.verdict else None,
                "transcript": self.transcript.to_list(),
                "created_at": self.created_at,
                "updated_at": self.updated_at,
            }
        )
        return out

    @classmethod
    def from_dict(cls, raw: Mapping[str, Any]) -> "Candidate":
        extra = {k: v for k, v in raw.items() if k not in _CANDIDATE_FIELDS}
        verdict = raw.get("verdict")
        return cls(
            candidate_id=raw["candidate_id"],
            seed_id=raw["seed_id"],
            domain=Domain(raw["domain"]),
            topic=raw.get("topic", ""),
            preamble=raw.get("preamble", ""),
            statement=raw["statement"],
            proof=raw.get("proof"),
            stage=Stage(raw["stage"]),
            formalize_trials=raw.get("formalize_trials", 0),
            prove_trials=raw.get("prove_trials", 0),
            verdict=Verdict(verdict) if verdict else None,
            transcript=Transcript.from_list(raw.get("transcript", [])),
            created_at=raw.get("created_at", ""),
            updated_at=raw.get("updated_at", ""),
            extra=extra,
        )


# ---------------------------------------------------------------------------
# Identity and lifecycle operations
# ---------------------------------------------------------------------------


def _canonical(text: str) -> str:
    # Normalize line endings to LF and strip trailing whitespace per line so
    # cosmetic differences never produce distinct candidate ids.
    norm = text.replace("\r\n", "\n").replace("\r", "\n")
    return "\n".join(line.rstrip() for line in norm.split("\n"))


def candidate_id(seed_id: str, preamble: str, statement: str) -> str:
    """Deterministic content digest identifying a candidate.

    The digest covers (seed_id, preamble, statement) after canonicalization,
    so the same snippet ingested twice maps onto one stored candidate.
    """
    if not statement.strip():
        raise InvalidCandidateError("statement must be non-empty")
    payload = json.dumps([_canonical(seed_id), _canonical(preamble), _canonical(statement)])
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


_TRANSITIONS: dict[tuple[Stage, LifecycleEvent], Stage] = {
    (Stage.RAW, LifecycleEvent.JUDGE_ACCEPT): Stage.JUDGED,
    (Stage.RAW, LifecycleEvent.JUDGE_REJECT): Stage.REJECTED_JUDGE,
    (Stage.JUDGED, LifecycleEvent.COMPILE_OK): Stage.COMPILABLE,
    (Stage.JUDGED, LifecycleEvent.COMPILE_FAIL): Stage.REJECTED_FORMALIZE,
    (Stage.COMPILABLE, LifecycleEvent.TRIVIAL_HIT): Stage.TRIVIAL,
    (Stage.COMPILABLE, LifecycleEvent.PROOF_OK): Stage.PROVED,
    (Stage.COMPILABLE, LifecycleEvent.PROOF_FAIL): Stage.UNPROVED,
}


def legal_events(stage: Stage) -> frozenset[LifecycleEvent]:
    return frozenset(ev for (st, ev) in _TRANSITIONS if st is stage)


def advance_stage(candidate: Candidate, event: LifecycleEvent) -> Candidate:
    """Apply one lifecycle event, returning the advanced candidate.

    Judge events also record the verdict: any stage past Raw implies the
    candidate was judged Correct.
    """
    target = _TRANSITIONS.get((candidate.stage, event))
    if target is None:
        raise StateMachineError(
            f"illegal transition: {candidate.stage.value} + {event.value}"
        )
    verdict = candidate.verdict
    if event is LifecycleEvent.JUDGE_ACCEPT:
        verdict = Verdict.CORRECT
    elif event is LifecycleEvent.JUDGE_REJECT:
        verdict = Verdict.WRONG
    return replace(candidate, stage=target, verdict=verdict, updated_at=now_iso())
