"""Concept bank, agent memory, editable matrix and their on-disk persistence."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import re
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

CANDIDATE = "candidate"
ACTIVE = "active"
DELETED = "deleted"
STATUSES = (CANDIDATE, ACTIVE, DELETED)

MULTI_LABEL = "multi-label"

CRITICAL = "critical"
OCCASIONAL = "occasional"
UNRELATED = "unrelated"
VERDICTS = (CRITICAL, OCCASIONAL, UNRELATED)

_ALLOWED_TRANSITIONS = {(CANDIDATE, ACTIVE), (ACTIVE, DELETED)}


class BankError(ValueError):
    """Raised on invalid bank or memory operations."""


def normalize_text(text: str) -> str:
    return re.sub(r"\s+", " ", text.strip().lower())


def concept_id(text: str) -> str:
    """Stable identifier for a concept phrase (hash of its normalized text)."""
    return hashlib.sha256(normalize_text(text).encode("utf-8")).hexdigest()[:16]


@dataclass(frozen=True)
class Concept:
    id: str
    text: str
    source_label: str
    status: str = CANDIDATE
    created_iteration: int = 0

    @classmethod
    def create(cls, text: str, source_label: str, iteration: int = 0) -> "Concept":
        if not text or not text.strip():
            raise BankError("concept text must be non-empty")
        return cls(concept_id(text), text.strip(), source_label, CANDIDATE, iteration)

    def with_status(self, status: str) -> "Concept":
        if (self.status, status) not in _ALLOWED_TRANSITIONS:
            raise BankError(f"illegal status transition {self.status} -> {status} for {self.text!r}")
        return dataclasses.replace(self, status=status)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "Concept":
        return cls(d["id"], d["text"], d["source_label"], d["status"], int(d["created_iteration"]))


@dataclass(frozen=True)
class ConceptBank:
    version: int
    labels: tuple[str, ...]
    concepts: tuple[Concept, ...] = ()
    superclasses: tuple[str | None, ...] | None = None

    def __post_init__(self):
        ids = [c.id for c in self.concepts]
        if len(set(ids)) != len(ids):
            raise BankError("duplicate active concept ids in bank")
        if len(set(self.labels)) != len(self.labels):
            raise BankError("duplicate label names in bank")

    @property
    def ids(self) -> list[str]:
        return [c.id for c in self.concepts]

    @property
    def texts(self) -> list[str]:
        return [c.text for c in self.concepts]

    def __len__(self) -> int:
        return len(self.concepts)

    def __contains__(self, cid: str) -> bool:
        return any(c.id == cid for c in self.concepts)

    def superclass(self, label: str) -> str | None:
        if self.superclasses is None:
            return None
        return self.superclasses[self.labels.index(label)]

    def content_hash(self) -> str:
        payload = json.dumps({"version": self.version, "labels": list(self.labels), "ids": self.ids})
        return hashlib.sha256(payload.encode()).hexdigest()[:16]

    def to_dict(self) -> dict:
        d = {
            "version": self.version,
            "labels": list(self.labels),
            "concepts": [c.to_dict() for c in self.concepts],
        }
        if self.superclasses is not None:
            d["superclasses"] = list(self.superclasses)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "ConceptBank":
        sup = d.get("superclasses")
        return cls(
            version=int(d["version"]),
            labels=tuple(d["labels"]),
            concepts=tuple(Concept.from_dict(c) for c in d["concepts"]),
            superclasses=tuple(sup) if sup is not None else None,
        )


@dataclass
class AgentMemory:
    """M_g, M_d and M_f plus the bank trajectory and an append-only operation log."""

    generated: dict[str, Concept] = field(default_factory=dict)
    deleted: list[Concept] = field(default_factory=list)
    fact_verified: dict[tuple[str, str], str] = field(default_factory=dict)
    bank_history: list[ConceptBank] = field(default_factory=list)
    log: list[dict] = field(default_factory=list)

    @property
    def deleted_ids(self) -> set[str]:
        return {c.id for c in self.deleted}

    def candidates(self) -> list[Concept]:
        return [c for c in self.generated.values() if c.status == CANDIDATE]

    def record(self, op: str, payload: dict, iteration: int) -> None:
        self.log.append({"op": op, "payload": payload, "iteration": iteration, "timestamp": time.time()})

    def snapshot(self, bank: ConceptBank) -> None:
        if self.bank_history and bank.version != self.bank_history[-1].version + 1:
            raise BankError(
                f"bank version {bank.version} does not follow {self.bank_history[-1].version}"
            )
        self.bank_history.append(bank)

    def check_invariants(self) -> None:
        gen = set(self.generated)
        missing = [c.id for c in self.deleted if c.id not in gen]
        if missing:
            raise BankError(f"deleted concepts missing from generated list: {missing}")
        versions = [b.version for b in self.bank_history]
        if versions and versions != list(range(versions[0], versions[0] + len(versions))):
            raise BankError(f"bank history versions not gap-free: {versions}")

    def to_dict(self) -> dict:
        return {
            "generated": [c.to_dict() for c in self.generated.values()],
            "deleted": [c.to_dict() for c in self.deleted],
            "fact_verified": [[lab, cid, v] for (lab, cid), v in self.fact_verified.items()],
            "bank_history": [b.to_dict() for b in self.bank_history],
            "log": list(self.log),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "AgentMemory":
        gen = [Concept.from_dict(c) for c in d["generated"]]
        return cls(
            generated={c.id: c for c in gen},
            deleted=[Concept.from_dict(c) for c in d["deleted"]],
            fact_verified={(lab, cid): v for lab, cid, v in d["fact_verified"]},
            bank_history=[ConceptBank.from_dict(b) for b in d["bank_history"]],
            log=list(d.get("log", [])),
        )


def new_bank(labels: Sequence[str], superclasses: Sequence[str | None] | None = None) -> tuple[ConceptBank, AgentMemory]:
    """Empty bank at version 0 with a fresh memory holding that snapshot."""
    bank = ConceptBank(0, tuple(labels), (), tuple(superclasses) if superclasses is not None else None)
    memory = AgentMemory()
    memory.snapshot(bank)
    return bank, memory


def add_concepts(
    bank: ConceptBank,
    memory: AgentMemory,
    items: Iterable[str],
    source_label: str,
    iteration: int,
) -> tuple[ConceptBank, AgentMemory]:
    """Append unseen phrases to M_g as candidates. The bank itself is untouched."""
    blocked = set(bank.ids) | memory.deleted_ids
    added = []
    for text in items:
        concept = Concept.create(text, source_label, iteration)
        if concept.id in blocked or concept.id in memory.generated:
            continue
        memory.generated[concept.id] = concept
        added.append(concept.id)
    if added:
        memory.record("add", {"ids": added, "source_label": source_label}, iteration)
    return bank, memory


def activate_concepts(
    bank: ConceptBank, memory: AgentMemory, ids: Sequence[str], iteration: int
) -> tuple[ConceptBank, AgentMemory]:
    """Move selected candidates into the bank (one version bump)."""
    if not ids:
        return bank, memory
    new = []
    for cid in ids:
        concept = memory.generated.get(cid)
        if concept is None:
            raise BankError(f"unknown concept id {cid}")
        activated = concept.with_status(ACTIVE)
        memory.generated[cid] = activated
        new.append(activated)
    bank = dataclasses.replace(bank, version=bank.version + 1, concepts=bank.concepts + tuple(new))
    memory.snapshot(bank)
    memory.record("activate", {"ids": list(ids), "version": bank.version}, iteration)
    return bank, memory


def delete_concepts(
    bank: ConceptBank, memory: AgentMemory, ids: Sequence[str], iteration: int = 0
) -> tuple[ConceptBank, AgentMemory]:
    if not ids:
        return bank, memory
    active = {c.id: c for c in bank.concepts}
    for cid in ids:
        if cid not in active:
            raise BankError(f"cannot delete {cid}: not an active concept in bank v{bank.version}")
    drop = set(ids)
    for cid in ids:
        gone = active[cid].with_status(DELETED)
        memory.deleted.append(gone)
        memory.generated[cid] = gone
    bank = dataclasses.replace(
        bank, version=bank.version + 1, concepts=tuple(c for c in bank.concepts if c.id not in drop)
    )
    memory.snapshot(bank)
    memory.record("delete", {"ids": list(ids), "version": bank.version}, iteration)
    return bank, memory


@dataclass(frozen=True)
class EditableMatrix:
    entries: np.ndarray
    labels: tuple[str, ...]
    concept_ids: tuple[str, ...]

    @property
    def shape(self) -> tuple[int, int]:
        return self.entries.shape

    @classmethod
    def zeros(cls, bank: ConceptBank) -> "EditableMatrix":
        return cls(np.zeros((len(bank.labels), len(bank)), dtype=np.uint8), bank.labels, tuple(bank.ids))


def build_editable_matrix(memory: AgentMemory, bank: ConceptBank) -> EditableMatrix:
    """E[j, k] = 1 exactly when concept k was judged unrelated to label j."""
    missing = [
        (lab, c.text)
        for lab in bank.labels
        for c in bank.concepts
        if (lab, c.id) not in memory.fact_verified
    ]
    if missing:
        raise BankError(f"missing fact verification for pairs: {missing}")
    entries = np.array(
        [[memory.fact_verified[(lab, c.id)] == UNRELATED for c in bank.concepts] for lab in bank.labels],
        dtype=np.uint8,
    ).reshape(len(bank.labels), len(bank))
    return EditableMatrix(entries, bank.labels, tuple(bank.ids))


# -- persistence -----------------------------------------------------------

def save_bank(bank: ConceptBank, directory: str | Path) -> Path:
    path = Path(directory) / f"bank_v{bank.version}.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(bank.to_dict(), indent=2))
    return path


def load_bank(path: str | Path) -> ConceptBank:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"bank file not found: {path} (run `concept-agent ground` first)")
    return ConceptBank.from_dict(json.loads(path.read_text()))


def latest_bank_path(directory: str | Path) -> Path:
    paths = sorted(Path(directory).glob("bank_v*.json"), key=lambda p: int(p.stem.split("_v")[1]))
    if not paths:
        raise FileNotFoundError(f"no bank_v*.json files under {directory}")
    return paths[-1]


def save_memory(memory: AgentMemory, directory: str | Path) -> Path:
    """Write the memory snapshot and append any new records to memory_log.jsonl."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / "memory.json"
    path.write_text(json.dumps(memory.to_dict(), indent=2))
    log_path = directory / "memory_log.jsonl"
    written = 0
    if log_path.exists():
        written = sum(1 for _ in log_path.open())
    with log_path.open("a") as fh:
        for rec in memory.log[written:]:
            fh.write(json.dumps(rec) + "\n")
    return path


def load_memory(path: str | Path) -> AgentMemory:
    return AgentMemory.from_dict(json.loads(Path(path).read_text()))
