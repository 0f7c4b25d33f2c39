"""Feedback analysis and the grounding loop.

The planner reads only validation score tensors. Per concept it builds a
score pattern (mean normalized contribution per label) and a binary
activation pattern, removes redundant concepts and reports labels that the
surviving concepts cannot identify.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .actions import (
    InstanceSet,
    Perception,
    SelectConfig,
    generate_for_confusable,
    generate_for_label,
    perceive,
    select_concepts,
    select_instances,
    verify_all,
)
from .backends.encoders import TextEncoder
from .backends.llm import ConceptLlm
from .bank import (
    AgentMemory,
    ConceptBank,
    EditableMatrix,
    activate_concepts,
    build_editable_matrix,
    delete_concepts,
    new_bank,
)
from .cocobm import ScoreTensor, TrainConfig
from .data import EmbeddedDataset, substream

logger = logging.getLogger(__name__)

INACTIVE = "inactive"
DUPLICATE = "duplicate"
NO_SUPPORT = "no-active-concept"
SHARED_SUPPORT = "identical-support"

CONVERGED = "converged"
CAPPED = "capped"
RUNNING = "running"


class PlannerError(ValueError):
    pass


# -- pattern math ------------------------------------------------------------------

def normalize_sample(scores: np.ndarray) -> np.ndarray:
    """Scale each concept column of each sample into [-1, 1].

    Positives are divided by the column's largest positive entry and negatives
    by the largest absolute negative entry, so signs and zeros are preserved.
    Works on (N, M) or batched (K, N, M) input; labels run along axis -2.
    """
    s = np.asarray(scores, dtype=np.float64)
    pos_max = np.where(s > 0, s, 0.0).max(axis=-2, keepdims=True)
    neg_max = np.where(s < 0, -s, 0.0).max(axis=-2, keepdims=True)
    out = np.zeros_like(s)
    np.divide(s, pos_max, out=out, where=(s > 0) & (pos_max > 0))
    np.divide(s, neg_max, out=out, where=(s < 0) & (neg_max > 0))
    return out


def score_patterns(values: np.ndarray) -> np.ndarray:
    """Mean normalized score per (label, concept) over K validation samples -> (N, M)."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 3:
        raise PlannerError(f"expected (K, N, M) validation scores, got shape {values.shape}")
    if values.shape[0] == 0:
        raise PlannerError("score patterns need at least one validation sample")
    return normalize_sample(values).mean(axis=0)


def score_pattern(values: np.ndarray, concept: int) -> np.ndarray:
    return score_patterns(values)[:, concept]


def activation_pattern(p_sc: np.ndarray, t_a: float) -> np.ndarray:
    """a_j = [s_j > t_a] per column; at t_a = 1 only the top positive label(s) activate."""
    if not 0.0 <= t_a <= 1.0:
        raise PlannerError(f"t_a must lie in [0, 1], got {t_a}")
    p = np.asarray(p_sc, dtype=np.float64)
    if t_a >= 1.0:
        top = p.max(axis=0, keepdims=True)
        return ((p == top) & (p > 0)).astype(np.uint8)
    return (p > t_a).astype(np.uint8)


@dataclass
class Removal:
    index: int
    reason: str
    kept: int | None = None  # surviving concept that made this one a duplicate


def find_redundant(p_sc: np.ndarray, p_act: np.ndarray, t_m: float) -> list[Removal]:
    """Inactive concepts, then near-duplicates of a stronger surviving concept.

    Concepts are visited in descending total contribution; a concept is a
    duplicate when an earlier survivor has the same activation pattern and the
    masked score patterns differ by less than ``t_m`` in L1 distance.
    """
    if t_m < 0:
        raise PlannerError("t_m must be non-negative")
    p_sc, p_act = np.asarray(p_sc, dtype=np.float64), np.asarray(p_act)
    masked = p_sc * p_act
    contribution = masked.sum(axis=0)
    removals = [Removal(int(k), INACTIVE) for k in np.flatnonzero(p_act.sum(axis=0) == 0)]
    inactive = {r.index for r in removals}
    order = [int(k) for k in np.argsort(-contribution, kind="stable") if k not in inactive]
    survivors: list[int] = []
    for k in order:
        match = next(
            (
                s
                for s in survivors
                if np.array_equal(p_act[:, s], p_act[:, k]) and np.abs(masked[:, s] - masked[:, k]).sum() < t_m
            ),
            None,
        )
        if match is None:
            survivors.append(k)
        else:
            removals.append(Removal(k, DUPLICATE, match))
    return removals


def find_insufficient(p_act: np.ndarray, labels: Sequence[str]) -> tuple[dict[str, str], list[list[str]]]:
    """Labels without support, and groups of labels whose supports coincide."""
    p_act = np.asarray(p_act).reshape(len(labels), -1)
    supports: dict[frozenset, list[str]] = {}
    unidentifiable: dict[str, str] = {}
    for j, label in enumerate(labels):
        support = frozenset(np.flatnonzero(p_act[j]).tolist())
        if not support:
            unidentifiable[label] = NO_SUPPORT
        else:
            supports.setdefault(support, []).append(label)
    groups = [group for group in supports.values() if len(group) > 1]
    for group in groups:
        for label in group:
            unidentifiable[label] = SHARED_SUPPORT
    ordered = {lab: unidentifiable[lab] for lab in labels if lab in unidentifiable}
    return ordered, groups


@dataclass
class FeedbackReport:
    iteration: int
    labels: tuple[str, ...]
    concept_ids: tuple[str, ...]
    concept_texts: tuple[str, ...]
    score_pattern: np.ndarray  # (N, M)
    activation: np.ndarray  # (N, M)
    removals: list[dict]
    unidentifiable: dict[str, str]
    confusable_groups: list[list[str]]
    val_accuracy: float = float("nan")

    @property
    def redundant_ids(self) -> list[str]:
        return [r["id"] for r in self.removals]

    @property
    def terminate(self) -> bool:
        return not self.removals and not self.unidentifiable

    def to_dict(self) -> dict:
        return {
            "iteration": self.iteration,
            "labels": list(self.labels),
            "concepts": [
                {
                    "id": cid,
                    "text": text,
                    "score_pattern": self.score_pattern[:, k].tolist(),
                    "activation": self.activation[:, k].astype(int).tolist(),
                }
                for k, (cid, text) in enumerate(zip(self.concept_ids, self.concept_texts))
            ],
            "removals": self.removals,
            "unidentifiable": self.unidentifiable,
            "confusable_groups": self.confusable_groups,
            "terminate": self.terminate,
            "val_accuracy": self.val_accuracy,
        }

    @classmethod
    def from_dict(cls, d) -> "FeedbackReport":
        n = len(d["labels"])
        concepts = d["concepts"]
        sc = np.array([c["score_pattern"] for c in concepts], dtype=np.float64).T.reshape(n, len(concepts))
        act = np.array([c["activation"] for c in concepts], dtype=np.uint8).T.reshape(n, len(concepts))
        return cls(
            d["iteration"],
            tuple(d["labels"]),
            tuple(c["id"] for c in concepts),
            tuple(c["text"] for c in concepts),
            sc,
            act,
            list(d["removals"]),
            dict(d["unidentifiable"]),
            [list(g) for g in d["confusable_groups"]],
            d.get("val_accuracy", float("nan")),
        )


def analyze(
    scores: ScoreTensor,
    concept_texts: Sequence[str],
    t_a: float = 0.1,
    t_m: float = 0.3,
    iteration: int = 0,
) -> FeedbackReport:
    """Patterns, redundancy and insufficiency from validation scores alone."""
    p_sc = score_patterns(scores.values)
    p_act = activation_pattern(p_sc, t_a)
    removals = find_redundant(p_sc, p_act, t_m)
    gone = {r.index for r in removals}
    keep = [k for k in range(p_act.shape[1]) if k not in gone]
    unidentifiable, groups = find_insufficient(p_act[:, keep], scores.labels)
    ids, texts = scores.concept_ids, tuple(concept_texts)
    return FeedbackReport(
        iteration=iteration,
        labels=scores.labels,
        concept_ids=ids,
        concept_texts=texts,
        score_pattern=p_sc,
        activation=p_act,
        removals=[
            {
                "id": ids[r.index],
                "text": texts[r.index],
                "reason": r.reason,
                "kept": None if r.kept is None else ids[r.kept],
            }
            for r in removals
        ],
        unidentifiable=unidentifiable,
        confusable_groups=groups,
    )


def empty_report(bank: ConceptBank, iteration: int) -> FeedbackReport:
    n = len(bank.labels)
    return FeedbackReport(
        iteration, bank.labels, (), (), np.zeros((n, 0)), np.zeros((n, 0), dtype=np.uint8), [],
        {lab: NO_SUPPORT for lab in bank.labels}, [],
    )


# -- the grounding loop ------------------------------------------------------------

@dataclass
class AgentConfig:
    t_a: float = 0.1
    t_m: float = 0.3
    beta: int = 16
    max_iterations: int = 10
    seed: int = 0
    k_init: int | None = None  # None -> one concept per label
    use_editable: bool = True
    workers: int = 1
    train: TrainConfig = field(default_factory=TrainConfig)
    select: SelectConfig = field(default_factory=SelectConfig)

    def __post_init__(self):
        if not 0.0 <= self.t_a <= 1.0:
            raise ValueError(f"t_a must lie in [0, 1], got {self.t_a}")
        if self.t_m < 0:
            raise ValueError(f"t_m must be non-negative, got {self.t_m}")
        if self.beta < 2:
            raise ValueError("beta must be at least 2 so every label has a validation instance")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be at least 1")
        if self.k_init is not None and self.k_init < 1:
            raise ValueError("k_init must be at least 1")


@dataclass
class AgentState:
    bank: ConceptBank
    memory: AgentMemory
    instances: InstanceSet
    iteration: int = 0
    status: str = RUNNING
    reports: list[FeedbackReport] = field(default_factory=list)
    selections: list[dict] = field(default_factory=list)


class ConceptAgent:
    """Grounds a concept bank by perceiving, pruning and repairing until stable."""

    def __init__(
        self,
        llm: ConceptLlm,
        encoder: TextEncoder,
        dataset: EmbeddedDataset,
        config: AgentConfig | None = None,
        on_iteration: Callable[[AgentState, FeedbackReport | None], None] | None = None,
    ):
        self.llm = llm
        self.encoder = encoder
        self.dataset = dataset
        self.config = config or AgentConfig()
        self.on_iteration = on_iteration

    # helpers

    def editable(self, bank: ConceptBank, memory: AgentMemory) -> EditableMatrix:
        if not self.config.use_editable or len(bank) == 0:
            return EditableMatrix.zeros(bank)
        return build_editable_matrix(memory, bank)

    def _train_config(self, iteration: int) -> TrainConfig:
        cfg = self.config.train
        return TrainConfig(**{**cfg.__dict__, "seed": substream(self.config.seed, "perceive")})

    def _select(self, state: AgentState, pool, k: int, target_labels=None, iteration: int = 0):
        rows = list(state.instances.indices)
        cfg = SelectConfig(**{**self.config.select.__dict__, "seed": substream(self.config.seed, f"select/{iteration}")})
        k = min(k, len(pool))
        chosen = select_concepts(
            pool,
            k,
            self.encoder,
            self.dataset.features[rows],
            self.dataset.targets[rows],
            self.dataset.labels,
            target_labels,
            cfg,
        )
        state.selections.append(
            {
                "iteration": iteration,
                "target_labels": list(target_labels) if target_labels is not None else None,
                "head_width": (len(target_labels) + 1) if target_labels is not None else len(self.dataset.labels),
                "k": k,
                "pool": [c.text for c in pool],
                "selected": [c.text for c in chosen],
            }
        )
        return chosen

    # phases

    def initialize(self) -> AgentState:
        """Iteration 0: generate for every label, select N concepts, verify."""
        ds = self.dataset
        bank, memory = new_bank(ds.labels, ds.superclasses)
        instances = select_instances(ds, self.config.beta, substream(self.config.seed, "instances"))
        state = AgentState(bank, memory, instances)
        pool = []
        for label in ds.labels:
            pool += [c for c in generate_for_label(self.llm, bank, memory, label, 0) if c not in pool]
        k = self.config.k_init if self.config.k_init is not None else len(ds.labels)
        chosen = self._select(state, pool, k, None, 0)
        state.bank, state.memory = activate_concepts(bank, memory, [c.id for c in chosen], 0)
        verify_all(self.llm, state.bank, state.memory, 0, self.config.workers)
        if self.on_iteration:
            self.on_iteration(state, None)
        return state

    def perceive(self, state: AgentState) -> Perception:
        editable = self.editable(state.bank, state.memory)
        return perceive(
            state.instances, self.dataset, state.bank, editable, self.encoder, self._train_config(state.iteration)
        )

    def step(self, state: AgentState) -> FeedbackReport:
        """One perceive -> prune -> detect -> repair round."""
        state.iteration += 1
        it = state.iteration
        if len(state.bank) == 0:
            report = empty_report(state.bank, it)
        else:
            perception = self.perceive(state)
            report = analyze(perception.scores, state.bank.texts, self.config.t_a, self.config.t_m, it)
            report.val_accuracy = perception.result.val_accuracy
        state.reports.append(report)
        state.bank, state.memory = delete_concepts(state.bank, state.memory, report.redundant_ids, it)
        state.memory.record("feedback", report.to_dict(), it)
        logger.info(
            "iteration %d: %d concepts, removed %d, unidentifiable %s",
            it, len(state.bank), len(report.removals), list(report.unidentifiable),
        )
        if report.terminate:
            state.status = CONVERGED
        else:
            self.repair(state, report)
        if self.on_iteration:
            self.on_iteration(state, report)
        return report

    def repair(self, state: AgentState, report: FeedbackReport) -> None:
        it = state.iteration
        bank, memory = state.bank, state.memory
        grouped = {lab for group in report.confusable_groups for lab in group}
        prompts = [[lab] for lab in report.unidentifiable if lab not in grouped] + report.confusable_groups
        chosen = []
        for targets in prompts:
            if len(targets) == 1:
                offered = generate_for_label(self.llm, bank, memory, targets[0], it)
            else:
                offered = generate_for_confusable(self.llm, bank, memory, targets, it)
            pool = [c for c in offered if c not in chosen]
            if not pool:
                logger.warning("no new candidates for %s", targets)
                continue
            chosen += self._select(state, pool, len(targets), targets, it)
        state.bank, state.memory = activate_concepts(bank, memory, [c.id for c in chosen], it)
        if len(state.bank):
            verify_all(self.llm, state.bank, state.memory, it, self.config.workers)

    def run(self, state: AgentState | None = None) -> AgentState:
        state = state or self.initialize()
        while state.status == RUNNING:
            if state.iteration >= self.config.max_iterations:
                state.status = CAPPED
                logger.warning("did not converge within %d iterations", self.config.max_iterations)
                break
            self.step(state)
        state.memory.check_invariants()
        return state


def save_report(report: FeedbackReport, directory: str | Path) -> Path:
    path = Path(directory) / f"feedback_{report.iteration:02d}.json"
    path.write_text(json.dumps(report.to_dict(), indent=2))
    return path
