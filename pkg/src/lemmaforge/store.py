"""Crash-safe artifact store: one JSON file per candidate, stage directories
as queues, and lease files for at-least-once delivery.

Every mutation is a temp-write plus atomic rename, so a process killed at any
point leaves either the old state or the new state, never a torn file. A
candidate id lives in exactly one stage directory; `recover()` repairs the
one transient violation an interrupted ack can leave behind (the same id in
a stage and its successor) by keeping the more advanced copy.
"""

from __future__ import annotations

import json
import logging
import os
import threading
import time
import uuid
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Iterator

from .model import Candidate, Stage

logger = logging.getLogger(__name__)

DEFAULT_LEASE_S = 12_000.0

STAGE_DIRS: dict[Stage, str] = {
    Stage.RAW: "MathlibLemma",
    Stage.JUDGED: "MathlibLemmaCorrect",
    Stage.COMPILABLE: "MathlibLemmaCompilable",
    Stage.PROVED: "MathlibLemmaProved",
    Stage.REJECTED_JUDGE: "rejected_judge",
    Stage.REJECTED_FORMALIZE: "rejected_formalize",
    Stage.UNPROVED: "unproved",
    Stage.TRIVIAL: "trivial",
}

LEGAL_RESULT_STAGES: dict[Stage, frozenset[Stage]] = {
    Stage.RAW: frozenset({Stage.JUDGED, Stage.REJECTED_JUDGE}),
    Stage.JUDGED: frozenset({Stage.COMPILABLE, Stage.REJECTED_FORMALIZE}),
    Stage.COMPILABLE: frozenset({Stage.TRIVIAL, Stage.PROVED, Stage.UNPROVED}),
}

# How far along the lifecycle each stage sits; used to resolve duplicates
# left by an ack interrupted between its two renames.
_STAGE_ORDER: dict[Stage, int] = {
    Stage.RAW: 0,
    Stage.JUDGED: 1,
    Stage.REJECTED_JUDGE: 1,
    Stage.COMPILABLE: 2,
    Stage.REJECTED_FORMALIZE: 2,
    Stage.TRIVIAL: 3,
    Stage.PROVED: 3,
    Stage.UNPROVED: 3,
}

REACHED_COMPILABLE = (Stage.COMPILABLE, Stage.TRIVIAL, Stage.PROVED, Stage.UNPROVED)


class StaleLease(Exception):
    """Ack attempted without a live lease owned by the caller."""


class StageMismatch(ValueError):
    """Candidate enqueued into a queue whose stage it does not match."""


class FsOps:
    """Thin filesystem layer; tests substitute a crash-injecting subclass so
    every inter-operation window is exercised."""

    def write_file(self, path: Path, data: bytes) -> None:
        with open(path, "wb") as fh:
            fh.write(data)

    def replace(self, src: Path, dst: Path) -> None:
        os.replace(src, dst)

    def unlink(self, path: Path) -> None:
        os.unlink(path)

    def mkdir(self, path: Path) -> None:
        path.mkdir(parents=True, exist_ok=True)

    def create_exclusive(self, path: Path, data: bytes) -> None:
        fd = os.open(path, os.O_WRONLY | os.O_CREAT | os.O_EXCL)
        try:
            os.write(fd, data)
        finally:
            os.close(fd)

    def rename(self, src: Path, dst: Path) -> None:
        os.rename(src, dst)


@dataclass(frozen=True)
class LeasedCandidate:
    candidate: Candidate
    worker_id: str
    expires_at: float


def _dump(record: dict[str, Any]) -> bytes:
    return (json.dumps(record, indent=2, sort_keys=True) + "\n").encode("utf-8")


class ArtifactStore:
    """Stage directories plus lease bookkeeping under one run root."""

    def __init__(
        self,
        root: str | Path,
        *,
        fs: FsOps | None = None,
        clock: Callable[[], float] = time.time,
    ) -> None:
        self.root = Path(root)
        self.fs = fs or FsOps()
        self.clock = clock
        self._scan_lock = threading.Lock()
        self.fs.mkdir(self.root)
        for name in STAGE_DIRS.values():
            self.fs.mkdir(self.root / name)
        self.fs.mkdir(self.root / "leases")
        for name in STAGE_DIRS.values():
            self.fs.mkdir(self.root / "leases" / name)
        self.fs.mkdir(self.root / "discovery")
        self.recover()

    # -- paths ---------------------------------------------------------------

    def stage_dir(self, stage: Stage) -> Path:
        return self.root / STAGE_DIRS[stage]

    def candidate_path(self, stage: Stage, candidate_id: str) -> Path:
        return self.stage_dir(stage) / f"{candidate_id}.json"

    def lease_path(self, stage: Stage, candidate_id: str) -> Path:
        return self.root / "leases" / STAGE_DIRS[stage] / f"{candidate_id}.lease"

    def _tmp_path(self, directory: Path) -> Path:
        return directory / f".tmp-{uuid.uuid4().hex}"

    def _write_atomic(self, path: Path, record: dict[str, Any]) -> None:
        tmp = self._tmp_path(path.parent)
        self.fs.write_file(tmp, _dump(record))
        self.fs.replace(tmp, path)

    # -- queue operations ------------------------------------------------------

    def enqueue(self, stage: Stage, candidate: Candidate) -> bool:
        """Store a candidate as pending in `stage`. Idempotent: an id already
        present anywhere (including later stages, after a resume) is left
        alone. Returns True when a new file was written."""
        if candidate.stage is not stage:
            raise StageMismatch(
                f"candidate is at stage {candidate.stage.value}, queue expects {stage.value}"
            )
        for other in STAGE_DIRS:
            if self.candidate_path(other, candidate.candidate_id).exists():
                return False
        self._write_atomic(self.candidate_path(stage, candidate.candidate_id), candidate.to_dict())
        return True

    def pending_ids(self, stage: Stage) -> list[str]:
        return sorted(
            p.stem for p in self.stage_dir(stage).glob("*.json") if not p.name.startswith(".")
        )

    def count(self, stage: Stage) -> int:
        return len(self.pending_ids(stage))

    def load(self, stage: Stage, candidate_id: str) -> Candidate:
        with open(self.candidate_path(stage, candidate_id), encoding="utf-8") as fh:
            return Candidate.from_dict(json.load(fh))

    def candidates_in(self, stage: Stage) -> Iterator[Candidate]:
        for cid in self.pending_ids(stage):
            yield self.load(stage, cid)

    def reached_compilable(self) -> Iterator[Candidate]:
        for stage in REACHED_COMPILABLE:
            yield from self.candidates_in(stage)

    # -- leases ----------------------------------------------------------------

    def _read_lease(self, path: Path) -> dict[str, Any] | None:
        try:
            with open(path, encoding="utf-8") as fh:
                return json.load(fh)
        except (FileNotFoundError, json.JSONDecodeError):
            return None

    def _try_acquire(self, stage: Stage, candidate_id: str, worker_id: str, lease_s: float) -> bool:
        lease = self.lease_path(stage, candidate_id)
        attempts = 0
        existing = self._read_lease(lease)
        if existing is not None or lease.exists():
            # A torn lease file (crash mid-write) decodes to None; treat it
            # like an expired lease so the item stays deliverable.
            if existing is not None and self.clock() < existing.get("expires_at", 0):
                return False
            attempts = (existing or {}).get("attempts_delivered", 0)
            # Exactly one contender wins the rename of an expired lease file;
            # everyone else sees FileNotFoundError and moves on.
            stale = lease.with_suffix(f".stale-{uuid.uuid4().hex}")
            try:
                self.fs.rename(lease, stale)
            except FileNotFoundError:
                return False
            self.fs.unlink(stale)
        record = {
            "worker_id": worker_id,
            "expires_at": self.clock() + lease_s,
            "attempts_delivered": attempts + 1,
        }
        try:
            self.fs.create_exclusive(lease, _dump(record))
        except FileExistsError:
            return False
        return True

    def lease(
        self, stage: Stage, worker_id: str, lease_s: float = DEFAULT_LEASE_S
    ) -> LeasedCandidate | None:
        """Claim one pending candidate, or None when nothing is claimable.

        Delivery is at-least-once: an expired lease makes the item claimable
        again, so handlers must be idempotent per candidate_id.
        """
        with self._scan_lock:
            for cid in self.pending_ids(stage):
                if not self._try_acquire(stage, cid, worker_id, lease_s):
                    continue
                try:
                    cand = self.load(stage, cid)
                except FileNotFoundError:
                    # Acked away between scan and load; drop the fresh lease.
                    self.fs.unlink(self.lease_path(stage, cid))
                    continue
                return LeasedCandidate(cand, worker_id, self.clock() + lease_s)
        return None

    def ack(self, stage: Stage, updated: Candidate, worker_id: str) -> None:
        """Finish a leased item: persist the updated record in its result
        stage and drop the pending entry plus the lease.

        Raises:
            StaleLease: the caller's lease is gone, expired, or owned by
                another worker, or the item was already acked elsewhere.
            StateMachineError-ish StageMismatch: result stage not reachable
                from `stage`.
        """
        if updated.stage not in LEGAL_RESULT_STAGES.get(stage, frozenset()):
            raise StageMismatch(
                f"stage {updated.stage.value} is not a legal result of {stage.value}"
            )
        cid = updated.candidate_id
        lease = self.lease_path(stage, cid)
        record = self._read_lease(lease)
        if record is None:
            raise StaleLease(f"no lease on {cid} in {stage.value}")
        if record.get("worker_id") != worker_id:
            raise StaleLease(f"lease on {cid} is held by {record.get('worker_id')!r}")
        if self.clock() >= record.get("expires_at", 0):
            raise StaleLease(f"lease on {cid} expired")
        src = self.candidate_path(stage, cid)
        if not src.exists():
            raise StaleLease(f"{cid} is no longer pending in {stage.value}")
        self._write_atomic(self.candidate_path(updated.stage, cid), updated.to_dict())
        self.fs.unlink(src)
        self.fs.unlink(lease)

    def release(self, stage: Stage, candidate_id: str, worker_id: str) -> None:
        """Voluntarily give a leased item back (clean shutdown path)."""
        lease = self.lease_path(stage, candidate_id)
        record = self._read_lease(lease)
        if record is None or record.get("worker_id") != worker_id:
            return
        try:
            self.fs.unlink(lease)
        except FileNotFoundError:
            pass

    # -- recovery ----------------------------------------------------------------

    def recover(self) -> None:
        """Restore invariants after a crash: drop temp files, resolve ids
        present in two stages (keep the more advanced copy), and prune leases
        for items no longer pending."""
        for tmp in self.root.glob(".tmp-*"):
            tmp.unlink(missing_ok=True)
        for tmp in (self.root / "discovery").glob(".tmp-*"):
            tmp.unlink(missing_ok=True)
        for stage, name in STAGE_DIRS.items():
            for tmp in (self.root / name).glob(".tmp-*"):
                tmp.unlink(missing_ok=True)
            for tmp in (self.root / "leases" / name).glob("*.stale-*"):
                tmp.unlink(missing_ok=True)
            for tmp in (self.root / "leases" / name).glob(".tmp-*"):
                tmp.unlink(missing_ok=True)
        locations: dict[str, list[Stage]] = {}
        for stage in STAGE_DIRS:
            for cid in self.pending_ids(stage):
                locations.setdefault(cid, []).append(stage)
        for cid, stages in locations.items():
            if len(stages) == 1:
                continue
            stages.sort(key=lambda s: _STAGE_ORDER[s])
            keep = stages[-1]
            for doomed in stages[:-1]:
                logger.warning(
                    "recover: %s present in %s and %s; keeping %s",
                    cid,
                    doomed.value,
                    keep.value,
                    keep.value,
                )
                self.fs.unlink(self.candidate_path(doomed, cid))
        for stage in STAGE_DIRS:
            pending = set(self.pending_ids(stage))
            for lease in (self.root / "leases" / STAGE_DIRS[stage]).glob("*.lease"):
                if lease.name[: -len(".lease")] not in pending:
                    lease.unlink(missing_ok=True)

    # -- run metadata and discovery records ---------------------------------------

    def write_run_meta(self, meta: dict[str, Any]) -> None:
        path = self.root / "run_meta.json"
        if path.exists():
            try:
                with open(path, encoding="utf-8") as fh:
                    previous = json.load(fh)
            except json.JSONDecodeError:
                previous = {}
            if previous.get("config_hash") not in (None, meta.get("config_hash")):
                logger.warning("run_meta config_hash differs from the original run")
            return
        self._write_atomic(path, meta)

    def read_run_meta(self) -> dict[str, Any] | None:
        path = self.root / "run_meta.json"
        if not path.exists():
            return None
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)

    def discovery_path(self, seed_id: str) -> Path:
        return self.root / "discovery" / f"{seed_id}.json"

    def has_discovery_record(self, seed_id: str) -> bool:
        return self.discovery_path(seed_id).exists()

    def write_discovery_record(self, record: dict[str, Any]) -> None:
        self._write_atomic(self.discovery_path(record["seed_id"]), record)

    # -- aggregate counts -----------------------------------------------------------

    def counts_by_domain(self) -> dict[str, dict[Stage, int]]:
        counts: dict[str, dict[Stage, int]] = {}
        for stage in STAGE_DIRS:
            for cand in self.candidates_in(stage):
                row = counts.setdefault(cand.domain.value, {s: 0 for s in STAGE_DIRS})
                row[stage] += 1
        return counts
