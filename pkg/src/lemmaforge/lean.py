"""Lean verification: file assembly, acceptance rules, and server clients.

Each check ships one self-contained file to a stateless check endpoint and
interprets the diagnostics it returns. Acceptance rules are pure functions of
(result, code) so they can be tested against fixture corpora without a
server.
"""

from __future__ import annotations

import hashlib
import json
import logging
import re
import threading
import time
from dataclasses import dataclass, field
from typing import Any, Mapping, Protocol, Sequence

import requests

from .model import Diagnostic, Severity

logger = logging.getLogger(__name__)

DEFAULT_TIMEOUT_S = 6000
DUPLICATE_DECLARATION_MARKER = "has already been declared"


class InvalidDeclaration(Exception):
    """The declaration block cannot be checked as a single unit."""


class NotCheckable(Exception):
    """The statement has no `:= [by] sorry` tail to rewrite for a triviality
    probe; the candidate is kept but flagged."""


class VerifierProtocolError(Exception):
    """The check endpoint answered with an undecodable or schema-violating
    body (including unknown severities)."""


@dataclass(frozen=True)
class VerificationRequest:
    code: str
    timeout_s: int = DEFAULT_TIMEOUT_S

    def __post_init__(self) -> None:
        if not self.code.strip():
            raise InvalidDeclaration("verification request must carry code")
        if self.timeout_s <= 0:
            raise InvalidDeclaration("timeout_s must be positive")


@dataclass(frozen=True)
class VerificationResult:
    diagnostics: tuple[Diagnostic, ...]
    elapsed_s: float
    server_ok: bool


def _synthetic_failure(message: str, elapsed_s: float) -> VerificationResult:
    diag = Diagnostic(Severity.ERROR, message)
    return VerificationResult((diag,), elapsed_s, server_ok=False)


# ---------------------------------------------------------------------------
# File assembly
# ---------------------------------------------------------------------------


def _first_token(line: str) -> str:
    parts = line.split(None, 1)
    return parts[0] if parts else ""


def _declaration_headers(declaration: str) -> int:
    count = 0
    for line in declaration.split("\n"):
        if line and not line[0].isspace() and _first_token(line) in ("lemma", "theorem"):
            count += 1
    return count


def build_file(preamble: str, declaration: str, injection: Sequence[str] = ()) -> str:
    """Assemble one self-contained check file.

    Layout: preamble imports first (order kept), then injected imports not
    already present, then injected non-import lines, then the remaining
    preamble lines, a blank line, and the declaration. Exact duplicate lines
    are dropped.
    """
    if not declaration.strip():
        raise InvalidDeclaration("declaration must be non-empty")
    if _declaration_headers(declaration) > 1:
        raise InvalidDeclaration("declaration contains more than one lemma/theorem header")

    def split_lines(text_or_lines: str | Sequence[str]) -> list[str]:
        lines = text_or_lines.split("\n") if isinstance(text_or_lines, str) else list(text_or_lines)
        return [line.strip() for line in lines if line.strip()]

    pre_lines = split_lines(preamble)
    inj_lines = split_lines(list(injection))
    imports = [l for l in pre_lines if _first_token(l) == "import"]
    pre_other = [l for l in pre_lines if _first_token(l) != "import"]
    inj_imports = [l for l in inj_lines if _first_token(l) == "import"]
    inj_other = [l for l in inj_lines if _first_token(l) != "import"]

    seen: set[str] = set()
    ordered: list[str] = []
    for line in imports + inj_imports + inj_other + pre_other:
        if line not in seen:
            seen.add(line)
            ordered.append(line)
    if not ordered:
        return declaration
    return "\n".join(ordered) + "\n\n" + declaration


# ---------------------------------------------------------------------------
# Token-level sorry detection
# ---------------------------------------------------------------------------

_IDENT_CHARS = frozenset(
    "abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789_'!?"
)


def contains_sorry_token(code: str) -> bool:
    """True when a bare `sorry` token appears outside comments and strings."""
    i, n = 0, len(code)
    while i < n:
        two = code[i : i + 2]
        if two == "--":
            nl = code.find("\n", i)
            i = n if nl < 0 else nl + 1
            continue
        if two == "/-":
            depth, i = 1, i + 2
            while i < n and depth:
                two = code[i : i + 2]
                if two == "/-":
                    depth += 1
                    i += 2
                elif two == "-/":
                    depth -= 1
                    i += 2
                else:
                    i += 1
            continue
        if code[i] == '"':
            i += 1
            while i < n:
                if code[i] == "\\":
                    i += 2
                elif code[i] == '"':
                    i += 1
                    break
                else:
                    i += 1
            continue
        if code[i] == "s" and code[i : i + 5] == "sorry":
            before = code[i - 1] if i > 0 else ""
            after = code[i + 5] if i + 5 < n else ""
            if before not in _IDENT_CHARS and after not in _IDENT_CHARS:
                return True
            i += 5
            continue
        i += 1
    return False


# ---------------------------------------------------------------------------
# Acceptance rules
# ---------------------------------------------------------------------------


def has_duplicate_declaration(diagnostics: Sequence[Diagnostic]) -> bool:
    """Name collisions with the ambient library, reported at any severity."""
    return any(DUPLICATE_DECLARATION_MARKER in d.message for d in diagnostics)


def statement_accepted(result: VerificationResult, code: str) -> bool:
    """A statement type-checks: server answered, no Error-severity
    diagnostics, and no duplicate-declaration message at any severity."""
    if not result.server_ok:
        return False
    if any(d.severity is Severity.ERROR for d in result.diagnostics):
        return False
    if has_duplicate_declaration(result.diagnostics):
        return False
    return True


def proof_accepted(result: VerificationResult, code: str) -> bool:
    """A proof is accepted only with zero errors and no remaining sorry,
    whether the sorry shows up as a diagnostic or in the code itself."""
    if not result.server_ok:
        return False
    if any(d.severity is Severity.ERROR for d in result.diagnostics):
        return False
    if any("sorry" in d.message.lower() for d in result.diagnostics):
        return False
    if contains_sorry_token(code):
        return False
    return True


# ---------------------------------------------------------------------------
# Verifier clients
# ---------------------------------------------------------------------------


class Verifier(Protocol):
    def check(self, request: VerificationRequest) -> VerificationResult: ...


def decode_diagnostics(payload: Any) -> tuple[Diagnostic, ...]:
    """Single adapter from the wire shape to Diagnostic records.

    Strict on purpose: schema drift (unknown severity, missing fields) raises
    instead of being coerced, so a server change is caught here and nowhere
    else.
    """
    if not isinstance(payload, Mapping) or "diagnostics" not in payload:
        raise VerifierProtocolError("check response missing 'diagnostics'")
    out = []
    for item in payload["diagnostics"]:
        try:
            out.append(
                Diagnostic(
                    severity=Severity.from_wire(item["severity"]),
                    message=item["message"],
                    line=item.get("line"),
                    col=item.get("col"),
                )
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise VerifierProtocolError(f"undecodable diagnostic {item!r}: {exc}") from exc
    return tuple(out)


class HttpVerifier:
    """Client for a stateless HTTP check endpoint."""

    def __init__(
        self,
        url: str,
        *,
        timeout_s: int = DEFAULT_TIMEOUT_S,
        session: requests.Session | None = None,
    ) -> None:
        self.url = url
        self.timeout_s = timeout_s
        self._session = session or requests.Session()

    def check(self, request: VerificationRequest) -> VerificationResult:
        started = time.monotonic()
        try:
            raw = self._session.post(
                self.url,
                json={"code": request.code, "timeout": request.timeout_s},
                timeout=request.timeout_s + 60,
            )
        except requests.Timeout:
            return _synthetic_failure("verifier timeout", time.monotonic() - started)
        except requests.RequestException as exc:
            return _synthetic_failure(
                f"verifier transport failure: {exc.__class__.__name__}",
                time.monotonic() - started,
            )
        elapsed = time.monotonic() - started
        if raw.status_code != 200:
            return _synthetic_failure(f"verifier http status {raw.status_code}", elapsed)
        try:
            payload = raw.json()
        except ValueError:
            raise VerifierProtocolError("check endpoint returned non-JSON body") from None
        return VerificationResult(decode_diagnostics(payload), elapsed, server_ok=True)


@dataclass(frozen=True)
class VerifierRule:
    """One scripted match: all `contains` substrings (or the exact sha256)
    must appear in the checked code."""

    contains: tuple[str, ...] = ()
    sha256: str | None = None
    diagnostics: tuple[Diagnostic, ...] = ()
    timeout: bool = False

    def matches(self, code: str) -> bool:
        if self.sha256 is not None:
            return hashlib.sha256(code.encode("utf-8")).hexdigest() == self.sha256
        return bool(self.contains) and all(s in code for s in self.contains)


@dataclass
class ScriptedVerifier:
    """Stateless canned verifier: first matching rule wins, else the default
    diagnostics (pass, unless configured otherwise)."""

    rules: list[VerifierRule] = field(default_factory=list)
    default_diagnostics: tuple[Diagnostic, ...] = ()

    def __post_init__(self) -> None:
        self._lock = threading.Lock()
        self.checked: list[str] = []

    @classmethod
    def from_file(cls, path: str) -> "ScriptedVerifier":
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
        rules = []
        for item in raw.get("rules", []):
            contains = item.get("contains", [])
            if isinstance(contains, str):
                contains = [contains]
            rules.append(
                VerifierRule(
                    contains=tuple(contains),
                    sha256=item.get("sha256"),
                    diagnostics=tuple(Diagnostic.from_dict(d) for d in item.get("diagnostics", [])),
                    timeout=bool(item.get("timeout", False)),
                )
            )
        default = tuple(
            Diagnostic.from_dict(d) for d in raw.get("default", {}).get("diagnostics", [])
        )
        return cls(rules=rules, default_diagnostics=default)

    def check(self, request: VerificationRequest) -> VerificationResult:
        with self._lock:
            self.checked.append(request.code)
        for rule in self.rules:
            if rule.matches(request.code):
                if rule.timeout:
                    return _synthetic_failure("verifier timeout", 0.0)
                return VerificationResult(rule.diagnostics, 0.0, server_ok=True)
        return VerificationResult(self.default_diagnostics, 0.0, server_ok=True)


# ---------------------------------------------------------------------------
# Check drivers
# ---------------------------------------------------------------------------


def check_statement(
    preamble: str,
    statement: str,
    verifier: Verifier,
    injection: Sequence[str] = (),
    timeout_s: int = DEFAULT_TIMEOUT_S,
) -> tuple[VerificationResult, bool]:
    code = build_file(preamble, statement, injection)
    result = verifier.check(VerificationRequest(code, timeout_s))
    return result, statement_accepted(result, code)


def check_proof(
    code: str,
    verifier: Verifier,
    timeout_s: int = DEFAULT_TIMEOUT_S,
) -> tuple[VerificationResult, bool]:
    """Verify a full declaration-with-proof; a bare sorry token short-circuits
    to rejection without touching the server."""
    if contains_sorry_token(code):
        diag = Diagnostic(Severity.ERROR, "proof contains sorry")
        return VerificationResult((diag,), 0.0, server_ok=True), False
    result = verifier.check(VerificationRequest(code, timeout_s))
    return result, proof_accepted(result, code)


_SORRY_TAIL = re.compile(r":=\s*(?:by\b\s*)?sorry\s*$", re.DOTALL)


def statement_prefix(statement: str) -> str:
    """The statement with its `:= [by] sorry` tail removed (proof-slot text)."""
    rstripped = statement.rstrip()
    match = _SORRY_TAIL.search(rstripped)
    if not match:
        return rstripped
    return rstripped[: match.start()].rstrip()


def rewrite_sorry_to_aesop(statement: str) -> str:
    rstripped = statement.rstrip()
    match = _SORRY_TAIL.search(rstripped)
    if not match:
        raise NotCheckable("statement has no `:= [by] sorry` tail")
    return rstripped[: match.start()] + ":= by aesop"


def triviality_check(
    preamble: str,
    statement: str,
    verifier: Verifier,
    injection: Sequence[str] = (),
    timeout_s: int = DEFAULT_TIMEOUT_S,
) -> bool:
    """True when swapping the sorry tail for `:= by aesop` yields an accepted
    proof; used to screen out statements an off-the-shelf tactic closes."""
    rewritten = rewrite_sorry_to_aesop(statement)
    code = build_file(preamble, rewritten, list(injection) + ["import Aesop"])
    result = verifier.check(VerificationRequest(code, timeout_s))
    return proof_accepted(result, code)
