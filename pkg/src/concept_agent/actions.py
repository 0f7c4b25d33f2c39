"""Agent actions: generate, select, verify, pick instances and perceive."""

from __future__ import annotations

import logging
import threading
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn

from .backends.encoders import DTYPE, TextEncoder, encode_texts
from .backends.llm import ConceptLlm
from .bank import (
    MULTI_LABEL,
    AgentMemory,
    BankError,
    Concept,
    ConceptBank,
    EditableMatrix,
    add_concepts,
)
from .cocobm import ScoreTensor, TrainConfig, TrainResult, make_model, train
from .data import EmbeddedDataset, stratified_split

logger = logging.getLogger(__name__)


class SelectionError(ValueError):
    pass


class InstanceError(ValueError):
    pass


# -- generation ----------------------------------------------------------------

def _offered(memory: AgentMemory, phrases: Sequence[str]) -> list[Concept]:
    """Candidates (in M_g, not active, not deleted) among the phrases the LLM returned."""
    seen, out = set(), []
    for text in phrases:
        concept = memory.generated.get(Concept.create(text, "").id)
        if concept is not None and concept.status == "candidate" and concept.id not in seen:
            seen.add(concept.id)
            out.append(concept)
    return out


def exclusions_for(memory: AgentMemory, source: str) -> list[str]:
    """Deleted phrases that were produced by the prompt identified by ``source``."""
    return [c.text for c in memory.deleted if c.source_label == source]


def generate_for_label(
    llm: ConceptLlm, bank: ConceptBank, memory: AgentMemory, label: str, iteration: int = 0
) -> list[Concept]:
    if label not in bank.labels:
        raise BankError(f"unknown label {label!r}")
    phrases = llm.generate_concepts(label, bank.superclass(label), exclusions_for(memory, label))
    add_concepts(bank, memory, phrases, label, iteration)
    return _offered(memory, phrases)


def generate_for_confusable(
    llm: ConceptLlm, bank: ConceptBank, memory: AgentMemory, labels: Sequence[str], iteration: int = 0
) -> list[Concept]:
    labels = list(labels)
    if len(labels) < 2:
        raise BankError("a confusable group needs at least two labels")
    unknown = [lab for lab in labels if lab not in bank.labels]
    if unknown:
        raise BankError(f"unknown labels {unknown}")
    phrases = llm.generate_confusable(labels, exclusions_for(memory, MULTI_LABEL))
    add_concepts(bank, memory, phrases, MULTI_LABEL, iteration)
    return _offered(memory, phrases)


# -- learning-to-search selection -------------------------------------------------

@dataclass
class SelectConfig:
    epochs: int = 100
    lr: float = 0.01
    seed: int = 0
    init_std: float = 0.02


class Dictionary(nn.Module):
    """K learnable atoms and a linear head over the atom responses."""

    def __init__(self, k: int, dim: int, classes: int, init_std: float = 0.02, seed: int = 0):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        self.atoms = nn.Parameter(torch.randn(k, dim, generator=gen, dtype=DTYPE) * init_std)
        self.head = nn.Linear(k, classes, dtype=DTYPE)
        with torch.no_grad():
            self.head.weight.copy_(torch.randn(classes, k, generator=gen, dtype=DTYPE) * init_std)
            self.head.bias.zero_()

    @property
    def k(self) -> int:
        return self.atoms.shape[0]

    @property
    def classes(self) -> int:
        return self.head.out_features

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        return self.head(images @ self.atoms.T)


def selection_targets(targets: np.ndarray, labels: Sequence[str], target_labels: Sequence[str] | None):
    """Class index per sample and the head width.

    In repair mode every label outside ``target_labels`` collapses into one
    extra negative class at index ``len(target_labels)``.
    """
    targets = np.asarray(targets)
    if target_labels is None:
        return targets.copy(), len(labels)
    index = {lab: i for i, lab in enumerate(labels)}
    mapped = np.full(len(targets), len(target_labels))
    for i, lab in enumerate(target_labels):
        mapped[targets == index[lab]] = i
    return mapped, len(target_labels) + 1


def greedy_map(
    atoms: np.ndarray, candidates: np.ndarray, order: Sequence[int], sign_invariant: bool = True
) -> list[int]:
    """Assign each atom (in ``order``) to its most cosine-similar unused candidate.

    Flipping an atom together with its head column leaves every prediction
    unchanged, so by default similarity is taken up to sign.
    """
    a = atoms / np.maximum(np.linalg.norm(atoms, axis=1, keepdims=True), 1e-12)
    c = candidates / np.maximum(np.linalg.norm(candidates, axis=1, keepdims=True), 1e-12)
    sim = a @ c.T
    if sign_invariant:
        sim = np.abs(sim)
    used, picks = set(), []
    for i in order:
        for j in np.argsort(-sim[i], kind="stable"):
            if j not in used:
                used.add(int(j))
                picks.append(int(j))
                break
    return picks


def select_concepts(
    pool: Sequence[Concept],
    k: int,
    encoder: TextEncoder,
    images: np.ndarray,
    targets: np.ndarray,
    labels: Sequence[str],
    target_labels: Sequence[str] | None = None,
    config: SelectConfig | None = None,
) -> list[Concept]:
    """Learn K atoms that classify the images, then snap each atom to a candidate."""
    config = config or SelectConfig()
    pool = list(pool)
    if k < 0:
        raise SelectionError("K must be non-negative")
    if len(pool) < k:
        raise SelectionError(f"candidate pool has {len(pool)} concepts, fewer than K={k}")
    if k == 0:
        return []
    cand = encode_texts(encoder, [c.text for c in pool])
    if len(pool) > 1 and torch.allclose(cand, cand[:1].expand_as(cand)):
        raise SelectionError("all candidate embeddings are identical; selection is undefined")
    if len(pool) == k:
        return pool

    x = torch.as_tensor(np.asarray(images, dtype=np.float64), dtype=DTYPE)
    y_np, classes = selection_targets(targets, labels, target_labels)
    y = torch.as_tensor(y_np, dtype=torch.long)
    model = Dictionary(k, x.shape[1], classes, config.init_std, config.seed)
    opt = torch.optim.Adam(model.parameters(), lr=config.lr)
    loss_fn = nn.CrossEntropyLoss()
    for _ in range(config.epochs):
        loss = loss_fn(model(x), y)
        opt.zero_grad()
        loss.backward()
        opt.step()

    with torch.no_grad():
        influence = model.head.weight.norm(dim=0).numpy()
        atoms = model.atoms.numpy()
    order = np.argsort(-influence, kind="stable")
    picks = greedy_map(atoms, cand.numpy(), order)
    return [pool[i] for i in picks]


# -- fact verification -------------------------------------------------------------

def verify_all(
    llm: ConceptLlm, bank: ConceptBank, memory: AgentMemory, iteration: int = 0, workers: int = 1
) -> int:
    """Fill M_f for every unverified (label, active concept) pair. Returns the call count."""
    if len(bank) == 0:
        raise BankError("cannot verify an empty bank")
    pending = [
        (label, c) for label in bank.labels for c in bank.concepts if (label, c.id) not in memory.fact_verified
    ]
    lock = threading.Lock()

    def run(pair):
        label, concept = pair
        verdict = llm.verify_fact(concept.text, label)
        with lock:
            memory.fact_verified[(label, concept.id)] = verdict
        return verdict

    done = []
    try:
        if workers > 1 and len(pending) > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                done = list(pool.map(run, pending))
        else:
            for pair in pending:
                done.append(run(pair))
    finally:
        finished = [(lab, c.id) for lab, c in pending if (lab, c.id) in memory.fact_verified]
        if finished:
            memory.record(
                "verify",
                {"pairs": [[lab, cid, memory.fact_verified[(lab, cid)]] for lab, cid in finished]},
                iteration,
            )
    return len(done)


# -- instance selection --------------------------------------------------------------

@dataclass(frozen=True)
class InstanceSet:
    indices: tuple[int, ...]  # rows of the source dataset
    labels: tuple[int, ...]  # label index of each row
    beta: int
    ids: tuple[str, ...] = field(default=())

    def to_dict(self) -> dict:
        return {"beta": self.beta, "indices": list(self.indices), "labels": list(self.labels), "ids": list(self.ids)}

    @classmethod
    def from_dict(cls, d) -> "InstanceSet":
        return cls(tuple(d["indices"]), tuple(d["labels"]), int(d["beta"]), tuple(d.get("ids", ())))


def select_instances(dataset: EmbeddedDataset, beta: int, seed: int = 0) -> InstanceSet:
    """beta K-means clusters per label; each centroid is replaced by its nearest unused real sample."""
    from sklearn.cluster import KMeans
    from sklearn.exceptions import ConvergenceWarning

    if beta < 1:
        raise InstanceError("beta must be at least 1")
    indices, labels = [], []
    for j, label in enumerate(dataset.labels):
        rows = dataset.indices_of(j)
        if len(rows) < beta:
            raise InstanceError(
                f"label {label!r} has {len(rows)} images, fewer than beta={beta}; use a smaller beta"
            )
        feats = dataset.features[rows]
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", ConvergenceWarning)
            km = KMeans(n_clusters=beta, init="k-means++", n_init=10, random_state=seed).fit(feats)
        dist = ((km.cluster_centers_[:, None, :] - feats[None, :, :]) ** 2).sum(-1)
        used: set[int] = set()
        for c in range(beta):
            for i in np.argsort(dist[c], kind="stable"):
                if int(i) not in used:
                    used.add(int(i))
                    indices.append(int(rows[i]))
                    labels.append(j)
                    break
    return InstanceSet(tuple(indices), tuple(labels), beta, tuple(dataset.ids[i] for i in indices))


# -- perception --------------------------------------------------------------------

@dataclass
class Perception:
    scores: ScoreTensor  # validation scores, (K, N, M)
    result: TrainResult


def split_instances(instances: InstanceSet, seed: int = 0) -> tuple[list[int], list[int]]:
    """Stratified half split of the instances into (train rows, validation rows)."""
    rows = np.asarray(instances.indices)
    first, second = stratified_split(np.asarray(instances.labels), 0.5, seed)
    return list(rows[first]), list(rows[second])


def perceive(
    instances: InstanceSet,
    dataset: EmbeddedDataset,
    bank: ConceptBank,
    editable: EditableMatrix | None,
    encoder: TextEncoder,
    config: TrainConfig | None = None,
) -> Perception:
    """Train a fresh CoCoBM on the instance train split and score the validation split.

    Only the score tensor feeds the planner; validation labels are used solely
    for early stopping inside training.
    """
    config = config or TrainConfig()
    if len(bank) == 0:
        raise BankError("cannot perceive with an empty bank")
    train_rows, val_rows = split_instances(instances, config.seed)
    if not val_rows:
        raise InstanceError("no validation instances; increase beta to at least 2")
    model = make_model(encoder, bank, editable, config)
    result = train(
        model,
        dataset.features[train_rows],
        dataset.targets[train_rows],
        dataset.features[val_rows],
        dataset.targets[val_rows],
        config,
    )
    return Perception(ScoreTensor(result.val_scores, bank.labels, tuple(bank.ids)), result)
