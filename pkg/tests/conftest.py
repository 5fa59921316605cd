"""Shared test machinery.

The core fixture is a fully scripted two-seed scenario: canned model
responses keyed by call route and canned verifier diagnostics keyed by code
substrings. Running the pipeline over it exercises every lifecycle edge
(trivial hit, proofs at repair counts 0/1/2, a repair-budget exhaustion, a
duplicate-declaration rejection, judge rejections including an unparseable
verdict) with a known final artifact tree.
"""

from __future__ import annotations

import hashlib
import json
import random
import threading
from dataclasses import replace
from pathlib import Path
from typing import Any, Mapping

import pytest

from lemmaforge import llm
from lemmaforge.config import (
    DISCOVERY_MARKER,
    FORMALIZE_MARKER,
    PROVE_MARKER,
)
from lemmaforge.lean import VerifierRule
from lemmaforge.model import (
    Candidate,
    Diagnostic,
    Domain,
    Severity,
    Stage,
    StageConfig,
    StageName,
    candidate_id,
)
from lemmaforge.store import STAGE_DIRS, ArtifactStore, FsOps

SEED_SENTINEL = "SEED_FILE_SENTINEL_TOKEN"

# ---------------------------------------------------------------------------
# Golden scenario texts
# ---------------------------------------------------------------------------

S1_PREAMBLE = "import Mathlib"
S2_PREAMBLE = "import Mathlib\nopen MeasureTheory"

STMT_A = "lemma list_trivial_demo (l : List Nat) : l = l := by sorry"
STMT_B = "lemma list_pair_swap_eq (a b : Nat) : (a, b).swap = (b, a) := by sorry"
STMT_C0 = "lemma list_len_brokenTwo (l : List Nat) : l.length = bad_c_zero := by sorry"
STMT_C1 = "lemma list_len_brokenTwo (l : List Nat) : l.length = bad_c_one := by sorry"
STMT_C2 = "lemma list_len_fixed (l : List Nat) : l.length = l.length := by sorry"
STMT_D = "lemma list_norm_neverFix (l : List Nat) : l.reverse.length = neverFixToken := by sorry"
STMT_E = "lemma list_count_dup_demo (l : List Nat) : l.count 0 = l.count 0 := by sorry"
STMT_F = "lemma list_rev_idem (l : List Nat) : l.reverse.reverse = l := by sorry"
STMT_G = "lemma list_wrong_claim (l : List Nat) : l.length = 0 := by sorry"

STMT_H = "lemma measure_mono_demo (s t : Set Nat) : s ⊆ t → True := by sorry"
STMT_I0 = "lemma measure_brokenSix0 (s : Set Nat) : s = bad_i_token := by sorry"
STMT_I1 = "lemma measure_brokenSix0 (s : Set Nat) : s = bad_i_one := by sorry"
STMT_I2 = "lemma measure_six_fixed (s : Set Nat) : s = s := by sorry"
STMT_J = "lemma measure_bad_claim (s : Set Nat) : s = ∅ := by sorry"
STMT_K = "lemma measure_unparse_demo (s : Set Nat) : s ∪ s = s := by sorry"
STMT_L = "lemma measure_odd_wrong (s : Set Nat) : s ∩ s = ∅ := by sorry"

PROOF_B = (
    "lemma list_pair_swap_eq (a b : Nat) : (a, b).swap = (b, a) := by\n  simp"
)
PROOF_C = "lemma list_len_fixed (l : List Nat) : l.length = l.length := by\n  rfl"
PROOF_H = (
    "lemma measure_mono_demo (s t : Set Nat) : s ⊆ t → True := by\n"
    "  intro _\n  trivial"
)

S1_CONTENT = f"""-- {SEED_SENTINEL}
import Mathlib

namespace List

theorem length_nil_demo : ([] : List Nat).length = 0 := rfl

end List
"""

S2_CONTENT = f"""-- {SEED_SENTINEL}
import Mathlib
open MeasureTheory

theorem union_self_demo (s : Set Nat) : s ∪ s = s := Set.union_self s
"""


def _err(message: str, line: int | None = None, col: int | None = None) -> Diagnostic:
    return Diagnostic(Severity.ERROR, message, line, col)


def _warn(message: str) -> Diagnostic:
    return Diagnostic(Severity.WARNING, message)


def _fenced(code: str, chatter: str, marker: str) -> str:
    return f"{chatter}\n{marker}\n```lean\n{code}\n```"


class GoldenScenario:
    """Two seeds, twelve raw candidates, fully deterministic outcomes."""

    def __init__(self) -> None:
        self.seed_specs = [
            ("s1", Domain.FOUNDATIONAL, "lists", S1_CONTENT),
            ("s2", Domain.APPLIED, "measure", S2_CONTENT),
        ]
        cid = candidate_id
        self.ids = {
            "A": cid("s1", S1_PREAMBLE, STMT_A),
            "B": cid("s1", S1_PREAMBLE, STMT_B),
            "C": cid("s1", S1_PREAMBLE, STMT_C0),
            "D": cid("s1", S1_PREAMBLE, STMT_D),
            "E": cid("s1", S1_PREAMBLE, STMT_E),
            "F": cid("s1", S1_PREAMBLE, STMT_F),
            "G": cid("s1", S1_PREAMBLE, STMT_G),
            "H": cid("s2", S2_PREAMBLE, STMT_H),
            "I": cid("s2", S2_PREAMBLE, STMT_I0),
            "J": cid("s2", S2_PREAMBLE, STMT_J),
            "K": cid("s2", S2_PREAMBLE, STMT_K),
            "L": cid("s2", S2_PREAMBLE, STMT_L),
        }
        self.expected_stage = {
            "A": Stage.TRIVIAL,
            "B": Stage.PROVED,
            "C": Stage.PROVED,
            "D": Stage.REJECTED_FORMALIZE,
            "E": Stage.REJECTED_FORMALIZE,
            "F": Stage.REJECTED_JUDGE,
            "G": Stage.REJECTED_JUDGE,
            "H": Stage.PROVED,
            "I": Stage.UNPROVED,
            "J": Stage.REJECTED_JUDGE,
            "K": Stage.REJECTED_JUDGE,
            "L": Stage.REJECTED_JUDGE,
        }
        # 2 discovery + 12 judge + 14 formalize + 9 prove
        self.total_llm_calls = 37

    # -- scripted model responses -------------------------------------------

    def llm_script(self) -> dict[str, str]:
        ids = self.ids
        s1_body = "\n\n".join(
            [S1_PREAMBLE, STMT_A, STMT_B, STMT_C0, STMT_D, STMT_E, STMT_F, STMT_G]
        )
        s2_body = "\n\n".join([S2_PREAMBLE, STMT_H, STMT_I0, STMT_J, STMT_K, STMT_L])
        script = {
            "discovery|s1|0": f"plan: vary list lemmas\n{DISCOVERY_MARKER}\n{s1_body}",
            # marker casing differs and the payload sits inside a fence
            "discovery|s2|0": (
                "plan: measure facts\nBrainstormed Mathlib Lemmas\n"
                f"Here they are:\n```lean\n{s2_body}\n```"
            ),
            f"judge|{ids['A']}|0": "reflexivity holds\ncorrect",
            f"judge|{ids['B']}|0": "swap exchanges components\nCORRECT",
            f"judge|{ids['C']}|0": "length is whatever it is\ncorrect, clearly",
            f"judge|{ids['D']}|0": "reverse preserves length\ncorrect",
            f"judge|{ids['E']}|0": "count is count\ncorrect",
            f"judge|{ids['F']}|0": "double reverse... suspicious\nwrong",
            f"judge|{ids['G']}|0": "claims every list is empty\nwrong",
            f"judge|{ids['H']}|0": "implication to True\ncorrect",
            f"judge|{ids['I']}|0": "plausible\ncorrect",
            f"judge|{ids['J']}|0": "claims every set is empty\nwrong",
            f"judge|{ids['K']}|0": "The statement is correct.",
            f"judge|{ids['L']}|0": "intersection empty? no\nWrong.",
            f"formalize|{ids['C']}|0": _fenced(STMT_C1, "try another name", FORMALIZE_MARKER),
            f"formalize|{ids['C']}|1": _fenced(STMT_C2, "rename the lemma", FORMALIZE_MARKER),
            f"formalize|{ids['I']}|0": _fenced(STMT_I1, "fixing", FORMALIZE_MARKER),
            f"formalize|{ids['I']}|1": _fenced(
                f"open MeasureTheory\n\n{STMT_I2}", "fixed for real", FORMALIZE_MARKER
            ),
            f"prove|{ids['B']}|0": _fenced(
                f"import Mathlib\n\n{PROOF_B}", "plan: simp closes it", PROVE_MARKER
            ),
            f"prove|{ids['C']}|0": _fenced(
                "lemma list_len_fixed (l : List Nat) : l.length = l.length := by\n"
                "  exact bad_proof_c0",
                "try an exact term",
                PROVE_MARKER,
            ),
            f"prove|{ids['C']}|1": _fenced(PROOF_C, "rfl instead", PROVE_MARKER),
            f"prove|{ids['H']}|0": _fenced(
                "lemma measure_mono_demo (s t : Set Nat) : s ⊆ t → True := by\n"
                "  exact bad_h_zero",
                "first try",
                PROVE_MARKER,
            ),
            f"prove|{ids['H']}|1": _fenced(
                "lemma measure_mono_demo (s t : Set Nat) : s ⊆ t → True := by\n"
                "  exact bad_h_one",
                "second try",
                PROVE_MARKER,
            ),
            f"prove|{ids['H']}|2": _fenced(PROOF_H, "intro then trivial", PROVE_MARKER),
            f"prove|{ids['I']}|0": _fenced(
                "lemma measure_six_fixed (s : Set Nat) : s = s := by\n  exact bad_i_p0",
                "term attempt",
                PROVE_MARKER,
            ),
            # restates a different lemma; burned without a verifier call
            f"prove|{ids['I']}|1": _fenced(
                "lemma measure_six_other (s : Set Nat) : True := by\n  trivial",
                "prove something easier",
                PROVE_MARKER,
            ),
            f"prove|{ids['I']}|2": _fenced(
                "lemma measure_six_fixed (s : Set Nat) : s = s := by\n  exact bad_i_p2",
                "one more",
                PROVE_MARKER,
            ),
        }
        broken_d = _fenced(STMT_D, "still stuck", FORMALIZE_MARKER)
        for attempt in range(10):
            script[f"formalize|{self.ids['D']}|{attempt}"] = broken_d
        return script

    def backend(self) -> llm.ScriptedBackend:
        return llm.ScriptedBackend(
            responses=self.llm_script(),
            default="I could not follow the requested format.",
        )

    # -- scripted verifier ----------------------------------------------------

    def verifier_rules(self) -> list[VerifierRule]:
        return [
            VerifierRule(contains=("list_trivial_demo", ":= by aesop")),
            VerifierRule(
                contains=(":= by aesop",),
                diagnostics=(_err("aesop failed to close the goal", 4, 1),),
            ),
            VerifierRule(contains=("bad_c_zero",), diagnostics=(_err("unknown identifier 'bad_c_zero'", 3, 45),)),
            VerifierRule(contains=("bad_c_one",), diagnostics=(_err("unknown identifier 'bad_c_one'", 3, 45),)),
            VerifierRule(contains=("neverFixToken",), diagnostics=(_err("unknown identifier 'neverFixToken'", 3, 52),)),
            VerifierRule(
                contains=("list_count_dup_demo",),
                diagnostics=(_warn("'list_count_dup_demo' has already been declared"),),
            ),
            VerifierRule(contains=("bad_i_token",), diagnostics=(_err("unknown identifier 'bad_i_token'", 4, 40),)),
            VerifierRule(contains=("bad_i_one",), diagnostics=(_err("unknown identifier 'bad_i_one'", 4, 40),)),
            VerifierRule(contains=("bad_proof_c0",), diagnostics=(_err("unknown identifier 'bad_proof_c0'", 4, 9),)),
            VerifierRule(contains=("bad_h_zero",), diagnostics=(_err("unknown identifier 'bad_h_zero'", 4, 9),)),
            VerifierRule(contains=("bad_h_one",), diagnostics=(_err("unknown identifier 'bad_h_one'", 4, 9),)),
            VerifierRule(contains=("bad_i_p0",), diagnostics=(_err("unknown identifier 'bad_i_p0'", 4, 9),)),
            VerifierRule(contains=("bad_i_p2",), diagnostics=(_err("unknown identifier 'bad_i_p2'", 4, 9),)),
            VerifierRule(contains=("sorry",), diagnostics=(_warn("declaration uses 'sorry'"),)),
        ]

    def verifier(self):
        from lemmaforge.lean import ScriptedVerifier

        return ScriptedVerifier(rules=self.verifier_rules())

    # -- files for the CLI ----------------------------------------------------

    def write_seed_files(self, directory: Path) -> list[dict[str, str]]:
        directory.mkdir(parents=True, exist_ok=True)
        specs = []
        for seed_id, domain, topic, content in self.seed_specs:
            path = directory / f"{seed_id}.lean"
            path.write_text(content, encoding="utf-8")
            specs.append(
                {"path": str(path), "domain": domain.value, "topic": topic, "seed_id": seed_id}
            )
        return specs

    def write_mock_llm(self, path: Path) -> Path:
        payload = {
            "responses": self.llm_script(),
            "default": "I could not follow the requested format.",
        }
        path.write_text(json.dumps(payload, indent=2), encoding="utf-8")
        return path

    def write_mock_lean(self, path: Path) -> Path:
        rules = []
        for rule in self.verifier_rules():
            rules.append(
                {
                    "contains": list(rule.contains),
                    "diagnostics": [d.to_dict() for d in rule.diagnostics],
                }
            )
        path.write_text(json.dumps({"rules": rules}, indent=2), encoding="utf-8")
        return path

    def config_dict(self, workdir: Path, seeds: list[dict[str, str]]) -> dict[str, Any]:
        return {
            "workdir": str(workdir),
            "prng_seed": 7,
            "k_repairs": 2,
            "t_repair": 10,
            "lease_s": 600,
            "seeds": seeds,
            "lean_server": {"timeout_s": 6000},
            "stages": {
                "discovery": {"concurrency": 2},
                "judge": {"concurrency": 3},
                "formalize": {"concurrency": 3},
                "prove": {"concurrency": 3},
            },
        }


@pytest.fixture
def golden() -> GoldenScenario:
    return GoldenScenario()


# ---------------------------------------------------------------------------
# Pipeline wiring helpers
# ---------------------------------------------------------------------------


def make_stage_configs(
    k_repairs: int = 2, t_repair: int = 10, concurrency: int = 3
) -> dict[StageName, StageConfig]:
    return {
        StageName.DISCOVERY: StageConfig(
            stage=StageName.DISCOVERY,
            model="scripted",
            marker=DISCOVERY_MARKER,
            concurrency=concurrency,
        ),
        StageName.JUDGE: StageConfig(
            stage=StageName.JUDGE, model="scripted", concurrency=concurrency
        ),
        StageName.FORMALIZE: StageConfig(
            stage=StageName.FORMALIZE,
            model="scripted",
            marker=FORMALIZE_MARKER,
            trial_budget=t_repair,
            concurrency=concurrency,
        ),
        StageName.PROVE: StageConfig(
            stage=StageName.PROVE,
            model="scripted",
            marker=PROVE_MARKER,
            trial_budget=k_repairs,
            concurrency=concurrency,
        ),
    }


def golden_seeds(scenario: GoldenScenario) -> list:
    from lemmaforge.model import SeedContext

    return [
        SeedContext(seed_id=sid, path=f"{sid}.lean", domain=domain, topic=topic, content=content)
        for sid, domain, topic, content in scenario.seed_specs
    ]


def make_pipeline(store: ArtifactStore, scenario: GoldenScenario, backend=None, verifier=None):
    from lemmaforge.pipeline import Pipeline

    backend = backend or scenario.backend()
    verifier = verifier or scenario.verifier()
    return Pipeline(
        store,
        {stage: backend for stage in StageName},
        verifier,
        make_stage_configs(),
        lease_s=600.0,
        run_meta={"config_hash": "f" * 16, "toolchain": "scripted", "prng_seed": 7},
    )


class FlakyBackend:
    """Delegates to a scripted backend until the call allowance runs out,
    then fails every call; models a mid-run provider outage."""

    def __init__(self, inner, allow_calls: int) -> None:
        self.inner = inner
        self.remaining = allow_calls
        self._lock = threading.Lock()

    def complete(self, request, route=None):
        with self._lock:
            if self.remaining <= 0:
                raise llm.BackendUnavailable("scripted outage")
            self.remaining -= 1
        return self.inner.complete(request, route)


# ---------------------------------------------------------------------------
# Artifact tree fingerprinting
# ---------------------------------------------------------------------------

_TIMESTAMP_KEYS = {"created_at", "updated_at", "started_at"}


def _scrub(obj: Any) -> Any:
    if isinstance(obj, Mapping):
        return {k: _scrub(v) for k, v in obj.items() if k not in _TIMESTAMP_KEYS}
    if isinstance(obj, list):
        return [_scrub(v) for v in obj]
    return obj


def tree_fingerprint(root: Path) -> dict[str, str]:
    """Map of relative path to content digest over every JSON artifact,
    ignoring timestamp fields, lease bookkeeping, and logs."""
    out: dict[str, str] = {}
    for path in sorted(root.rglob("*.json")):
        rel = path.relative_to(root)
        if rel.parts[0] in ("leases", "logs"):
            continue
        payload = _scrub(json.loads(path.read_text(encoding="utf-8")))
        digest = hashlib.sha256(
            json.dumps(payload, sort_keys=True).encode("utf-8")
        ).hexdigest()
        out[str(rel)] = digest
    return out


def stage_ids(store: ArtifactStore) -> dict[Stage, set[str]]:
    return {stage: set(store.pending_ids(stage)) for stage in STAGE_DIRS}


# ---------------------------------------------------------------------------
# Random evaluation tables and brute-force metric oracles
# ---------------------------------------------------------------------------


def random_eval_table(rng: random.Random):
    """A random bench plus records: trivial instances, unsolved records,
    and instances some models never attempted."""
    from lemmaforge.bench import BenchInstance, EvalRecord

    domains = list(Domain)
    instances = [
        BenchInstance(
            id=f"i{idx:04d}",
            domain=rng.choice(domains),
            topic="t",
            context="import Mathlib",
            statement=f"lemma gen_{idx} : True := by sorry",
            trivial=rng.random() < 0.2,
        )
        for idx in range(rng.randint(1, 40))
    ]
    models = [f"m{j}" for j in range(rng.randint(1, 4))]
    records = []
    for model in models:
        for inst in instances:
            roll = rng.random()
            if roll < 0.45:
                records.append(EvalRecord(inst.id, model, rng.randint(0, 2), "by simp"))
            elif roll < 0.75:
                records.append(EvalRecord(inst.id, model, None))
            # else: never attempted
    return instances, records


def oracle_success_at(records, instances, t):
    """Naive per-cell recount, sharing only the 100*n/d expression."""
    eligible = [inst for inst in instances if not inst.trivial]
    by_domain: dict[str, list] = {}
    for inst in eligible:
        by_domain.setdefault(inst.domain.value, []).append(inst)
    recmap = {(rec.model, rec.instance_id): rec for rec in records}
    out = {}
    for model in {rec.model for rec in records}:
        for domain, insts in by_domain.items():
            solved = 0
            for inst in insts:
                rec = recmap.get((model, inst.id))
                if rec is not None and rec.solved_at is not None and rec.solved_at <= t:
                    solved += 1
            out[(model, domain)] = 100.0 * solved / len(insts) if insts else None
    return out


def oracle_union_rate(records, instances, t=None):
    eligible = [inst for inst in instances if not inst.trivial]
    solved_ids = {
        rec.instance_id
        for rec in records
        if rec.solved_at is not None and (t is None or rec.solved_at <= t)
    }
    by_domain: dict[str, list] = {}
    for inst in eligible:
        by_domain.setdefault(inst.domain.value, []).append(inst)
    out = {}
    total_solved = sum(1 for inst in eligible if inst.id in solved_ids)
    for domain, insts in by_domain.items():
        solved = sum(1 for inst in insts if inst.id in solved_ids)
        out[domain] = 100.0 * solved / len(insts) if insts else None
    out["Total"] = 100.0 * total_solved / len(eligible) if eligible else None
    return out


# ---------------------------------------------------------------------------
# Crash-injecting filesystem for conservation fuzzing
# ---------------------------------------------------------------------------


class CrashError(RuntimeError):
    """Simulated process death between (or inside) filesystem operations."""


class CrashFs(FsOps):
    """Counts mutating filesystem operations and dies when the fuse burns
    out. Writes die mid-write, leaving a torn file, which is the worst case a
    real kill can produce given atomic renames."""

    def __init__(self, fail_after: int) -> None:
        self.remaining = fail_after

    def _tick(self) -> None:
        self.remaining -= 1
        if self.remaining < 0:
            raise CrashError("crash injected")

    def write_file(self, path: Path, data: bytes) -> None:
        self.remaining -= 1
        if self.remaining < 0:
            super().write_file(path, data[: len(data) // 2])
            raise CrashError("crash injected mid-write")
        super().write_file(path, data)

    def create_exclusive(self, path: Path, data: bytes) -> None:
        self.remaining -= 1
        if self.remaining < 0:
            super().create_exclusive(path, data[: len(data) // 2])
            raise CrashError("crash injected mid-write")
        super().create_exclusive(path, data)

    def replace(self, src: Path, dst: Path) -> None:
        self._tick()
        super().replace(src, dst)

    def unlink(self, path: Path) -> None:
        self._tick()
        super().unlink(path)

    def rename(self, src: Path, dst: Path) -> None:
        self._tick()
        super().rename(src, dst)


def fuzz_candidate(tag: str, domain: Domain) -> Candidate:
    statement = f"lemma fuzz_{tag} : True := by sorry"
    return Candidate(
        candidate_id=candidate_id(f"seed_{tag}", "import Mathlib", statement),
        seed_id=f"seed_{tag}",
        domain=domain,
        topic="fuzz",
        preamble="import Mathlib",
        statement=statement,
        stage=Stage.RAW,
        created_at="2000-01-01T00:00:00+00:00",
        updated_at="2000-01-01T00:00:00+00:00",
    )


def run_crash_sequence(seq: int, root: Path) -> None:
    """One fuzzed enqueue/lease/ack/crash episode followed by a restart;
    asserts the conservation invariant (every enqueued id in exactly one
    stage directory, nothing extra)."""
    from lemmaforge.store import LEGAL_RESULT_STAGES

    rng = random.Random(seq)
    now = [1_000.0]
    domains = list(Domain)
    pool = [fuzz_candidate(f"{seq}_{i}", domains[i % 3]) for i in range(rng.randint(1, 5))]
    fs = CrashFs(fail_after=rng.randint(1, 40))
    enqueued: set[str] = set()
    held: list[tuple[Stage, Candidate, str]] = []
    lease_s = 50.0

    try:
        store = ArtifactStore(root, fs=fs, clock=lambda: now[0])
        for _ in range(rng.randint(4, 16)):
            op = rng.randrange(6)
            if op in (0, 1):
                cand = rng.choice(pool)
                store.enqueue(Stage.RAW, cand)
                enqueued.add(cand.candidate_id)
            elif op == 2:
                stage = rng.choice([Stage.RAW, Stage.JUDGED, Stage.COMPILABLE])
                leased = store.lease(stage, f"w{rng.randrange(3)}", lease_s)
                if leased is not None:
                    held.append((stage, leased.candidate, leased.worker_id))
            elif op == 3 and held:
                stage, cand, worker = held.pop(rng.randrange(len(held)))
                result = rng.choice(sorted(LEGAL_RESULT_STAGES[stage], key=lambda s: s.value))
                updated = replace(cand, stage=result, proof=cand.proof or "by trivial")
                try:
                    store.ack(stage, updated, worker)
                except Exception as exc:
                    if isinstance(exc, CrashError):
                        raise
            elif op == 4 and held:
                stage, cand, worker = held.pop(rng.randrange(len(held)))
                store.release(stage, cand.candidate_id, worker)
            else:
                now[0] += rng.choice([0.0, lease_s + 1.0])
    except CrashError:
        pass

    survivor = ArtifactStore(root, clock=lambda: now[0])
    locations: dict[str, list[Stage]] = {}
    for stage in STAGE_DIRS:
        for cid in survivor.pending_ids(stage):
            locations.setdefault(cid, []).append(stage)
    assert set(locations) == enqueued, (
        f"seq {seq}: ids on disk {sorted(locations)} != enqueued {sorted(enqueued)}"
    )
    duplicated = {cid: stages for cid, stages in locations.items() if len(stages) != 1}
    assert not duplicated, f"seq {seq}: ids in multiple stages: {duplicated}"
