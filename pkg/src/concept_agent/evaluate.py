"""Interpretability harness: explanation profiles, MCQ construction, judging and scoring."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .backends.llm import ConceptLlm, DEFAULT_SUPERCLASS, fill, load_template
from .data import substream

logger = logging.getLogger(__name__)

THRESHOLDS = (0.0, 0.25, 0.5, 0.75, 1.0)
TRUTHFULNESS = "truthfulness"
DISTINGUISHABILITY = "distinguishability"
MODES = ("text-hard", "text-easy", "visual-hard", "visual-easy", "random")
SIMILAR_POOL = 8
DISTRACTORS = 4


class EvaluationError(ValueError):
    pass


# -- explanations -------------------------------------------------------------------

@dataclass
class ExplanationProfile:
    label: str
    concepts: list[str]  # ranked, positively contributing only
    contributions: list[float]  # globally normalized, non-increasing
    normalized: list[float] = field(default_factory=list)  # all M concepts, bank order

    def __len__(self) -> int:
        return len(self.concepts)

    def subset(self, threshold: float) -> list[str]:
        """Concepts above ``threshold``; at 1.0 the concepts that reach exactly 1.0."""
        if threshold >= 1.0:
            return [c for c, s in zip(self.concepts, self.contributions) if s >= 1.0]
        return [c for c, s in zip(self.concepts, self.contributions) if s > threshold]


def local_minmax(row: np.ndarray) -> np.ndarray:
    """Min-max over the strictly positive entries; everything else becomes 0.

    A lone positive entry (or several equal ones) maps to 1.
    """
    row = np.asarray(row, dtype=np.float64)
    out = np.zeros_like(row)
    pos = row > 0
    if not pos.any():
        return out
    lo, hi = row[pos].min(), row[pos].max()
    out[pos] = 1.0 if hi == lo else (row[pos] - lo) / (hi - lo)
    return out


def global_minmax(values: np.ndarray) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    lo, hi = values.min(), values.max()
    if hi == lo:
        return np.where(values > 0, 1.0, 0.0)
    return (values - lo) / (hi - lo)


def extract_explanations(
    scores: np.ndarray, predictions: np.ndarray, labels: Sequence[str], concepts: Sequence[str]
) -> dict[str, ExplanationProfile]:
    """Per-label ranked concept lists from the predicted-label score rows.

    Labels that are never predicted are left out with a warning.
    """
    scores = np.asarray(scores, dtype=np.float64)
    predictions = np.asarray(predictions)
    if scores.ndim != 3 or scores.shape[1:] != (len(labels), len(concepts)):
        raise EvaluationError(f"scores of shape {scores.shape} do not match ({len(labels)}, {len(concepts)})")
    profiles = {}
    for j, label in enumerate(labels):
        rows = scores[predictions == j, j, :]
        if len(rows) == 0:
            logger.warning("label %r is never predicted; no explanation extracted", label)
            continue
        mean = np.stack([local_minmax(r) for r in rows]).mean(axis=0)
        norm = global_minmax(mean)
        keep = [k for k in np.argsort(-norm, kind="stable") if mean[k] > 0 and norm[k] > 0]
        profiles[label] = ExplanationProfile(
            label,
            [concepts[k] for k in keep],
            [float(norm[k]) for k in keep],
            norm.tolist(),
        )
    return profiles


# -- MCQs ---------------------------------------------------------------------------

@dataclass
class Mcq:
    kind: str
    label: str
    prompt: str
    options: list[str]
    features: list[str]
    correct: int | None = None
    threshold: float | None = None
    mode: str | None = None
    superclass: str | None = None

    @property
    def key(self) -> str:
        tag = f"t={self.threshold}" if self.kind == TRUTHFULNESS else self.mode
        return f"{self.label}/{self.kind}/{tag}"

    def template_args(self) -> dict:
        if self.kind == TRUTHFULNESS:
            return {"label": self.label, "features": list(self.features)}
        return {"features": list(self.features), "options": list(self.options), "superclass": self.superclass}

    def to_dict(self) -> dict:
        return asdict(self)


def feature_list(features: Sequence[str]) -> str:
    return ", ".join(features)


def truthfulness_mcqs(profile: ExplanationProfile, template: str | None = None) -> list[Mcq]:
    if not len(profile):
        raise EvaluationError(f"empty explanation profile for {profile.label!r}")
    template = template or load_template(TRUTHFULNESS)
    out = []
    for t in THRESHOLDS:
        subset = profile.subset(t)
        assert subset, "a non-empty profile always contains a concept at 1.0"
        prompt = fill(template, {"class name": profile.label, "feature list": feature_list(subset)})
        out.append(
            Mcq(TRUTHFULNESS, profile.label, prompt, ["aligns with facts", "does not align"], subset, threshold=t)
        )
    return out


def similarity_ranking(embeddings: np.ndarray, index: int) -> list[int]:
    """Other rows ordered by cosine similarity to row ``index`` (ties by row order)."""
    e = np.asarray(embeddings, dtype=np.float64)
    e = e / np.maximum(np.linalg.norm(e, axis=1, keepdims=True), 1e-12)
    sim = e @ e[index]
    order = [int(i) for i in np.argsort(-sim, kind="stable") if i != index]
    return order


def distractor_sets(
    index: int, n_labels: int, text_embs: np.ndarray, image_embs: np.ndarray, seed: int
) -> dict[str, list[int]]:
    """Distractor label indices for each MCQ mode.

    Hard uses ranks 1-4 of the eight most similar labels, easy uses ranks 5-8.
    With fewer labels the pools shrink and the two sets may overlap.
    """
    k = min(DISTRACTORS, n_labels - 1)
    if k < 1:
        raise EvaluationError("distinguishability needs at least two labels")
    out = {}
    for name, embs in (("text", text_embs), ("visual", image_embs)):
        pool = similarity_ranking(embs, index)[:SIMILAR_POOL]
        out[f"{name}-hard"] = pool[:k]
        out[f"{name}-easy"] = pool[DISTRACTORS : DISTRACTORS + k] if len(pool) >= DISTRACTORS + k else pool[-k:]
    others = [i for i in range(n_labels) if i != index]
    rng = np.random.default_rng(substream(seed, f"random-distractors/{index}"))
    out["random"] = sorted(int(i) for i in rng.choice(others, size=k, replace=False))
    if n_labels - 1 < SIMILAR_POOL:
        logger.debug("only %d other labels; similarity pools degrade", n_labels - 1)
    return out


def distinguishability_mcqs(
    profile: ExplanationProfile,
    labels: Sequence[str],
    text_embs: np.ndarray,
    image_embs: np.ndarray,
    seed: int,
    superclass: str | None = None,
    template: str | None = None,
) -> list[Mcq]:
    if len(set(labels)) != len(labels):
        raise EvaluationError("duplicate label names")
    if not len(profile):
        raise EvaluationError(f"empty explanation profile for {profile.label!r}")
    template = template or load_template(DISTINGUISHABILITY)
    index = list(labels).index(profile.label)
    features = profile.subset(0.0)
    superclass = superclass or DEFAULT_SUPERCLASS
    out = []
    for mode, distractors in distractor_sets(index, len(labels), text_embs, image_embs, seed).items():
        options = [labels[index]] + [labels[i] for i in distractors]
        rng = np.random.default_rng(substream(seed, f"shuffle/{profile.label}/{mode}"))
        options = [options[i] for i in rng.permutation(len(options))]
        slots = {"feature list": feature_list(features), "superclass": superclass}
        slots.update({letter: opt for letter, opt in zip("ABCDE", options)})
        prompt = fill(template, slots)
        if len(options) < 5:
            prompt = _trim_options(prompt, len(options))
        out.append(
            Mcq(
                DISTINGUISHABILITY,
                profile.label,
                prompt,
                options,
                features,
                correct=options.index(labels[index]),
                mode=mode,
                superclass=superclass,
            )
        )
    return out


def _trim_options(prompt: str, n: int) -> str:
    """Drop unfilled option slots from the options line."""
    lines = prompt.split("\n")
    i = max(k for k, line in enumerate(lines) if line.startswith("A. "))
    lines[i] = "; ".join([p for p in lines[i].split("; ") if "[" not in p][:n])
    return "\n".join(lines)


def build_mcqs(
    profiles: dict[str, ExplanationProfile],
    labels: Sequence[str],
    text_embs: np.ndarray,
    image_embs: np.ndarray,
    seed: int,
    superclasses: Sequence[str | None] | None = None,
) -> list[Mcq]:
    truth_t, dist_t = load_template(TRUTHFULNESS), load_template(DISTINGUISHABILITY)
    mcqs = []
    for j, label in enumerate(labels):
        profile = profiles.get(label)
        if profile is None or not len(profile):
            continue
        sup = superclasses[j] if superclasses else None
        mcqs += truthfulness_mcqs(profile, truth_t)
        mcqs += distinguishability_mcqs(profile, labels, text_embs, image_embs, seed, sup, dist_t)
    return mcqs


# -- judging and scoring --------------------------------------------------------------

@dataclass
class McqResult:
    mcq: Mcq
    answers: list[int | None]
    majority: int

    @property
    def passed(self) -> bool:
        if self.mcq.kind == TRUTHFULNESS:
            return self.majority == 0
        return self.majority == self.mcq.correct

    def to_dict(self) -> dict:
        return {**self.mcq.to_dict(), "answers": self.answers, "majority": self.majority, "passed": self.passed}


def judge(llm: ConceptLlm, mcqs: Sequence[Mcq]) -> list[McqResult]:
    results = []
    for q in mcqs:
        choice, votes = llm.answer_mcq(q.kind, q.template_args(), q.prompt, len(q.options))
        results.append(McqResult(q, votes, choice))
    return results


@dataclass
class InterpretabilityScore:
    truthfulness: float
    distinguishability: float
    per_label: dict[str, dict[str, float]]
    empty_labels: list[str] = field(default_factory=list)

    @property
    def overall(self) -> float:
        return (self.truthfulness + self.distinguishability) / 2

    def to_dict(self) -> dict:
        return {
            "truthfulness": self.truthfulness,
            "distinguishability": self.distinguishability,
            "overall": self.overall,
            "per_label": self.per_label,
            "empty_labels": self.empty_labels,
        }


def score_interpretability(
    results: Sequence[McqResult], labels: Sequence[str], empty_labels: Sequence[str] = ()
) -> InterpretabilityScore:
    """Uniform mean over labels; labels without an explanation score zero on both metrics."""
    empty = set(empty_labels)
    by_label: dict[str, dict[str, list[bool]]] = {lab: {TRUTHFULNESS: [], DISTINGUISHABILITY: []} for lab in labels}
    for r in results:
        if r.mcq.label not in by_label:
            raise EvaluationError(f"result for unknown label {r.mcq.label!r}")
        by_label[r.mcq.label][r.mcq.kind].append(r.passed)
    missing = [
        f"{lab}/{kind}"
        for lab in labels
        if lab not in empty
        for kind, want in ((TRUTHFULNESS, len(THRESHOLDS)), (DISTINGUISHABILITY, len(MODES)))
        if len(by_label[lab][kind]) != want
    ]
    if missing:
        raise EvaluationError(f"missing judgments: {missing}")
    per_label = {}
    for lab in labels:
        t = float(np.mean(by_label[lab][TRUTHFULNESS])) if lab not in empty else 0.0
        d = float(np.mean(by_label[lab][DISTINGUISHABILITY])) if lab not in empty else 0.0
        per_label[lab] = {"truthfulness": t, "distinguishability": d, "overall": (t + d) / 2}
    truth = float(np.mean([v["truthfulness"] for v in per_label.values()]))
    dist = float(np.mean([v["distinguishability"] for v in per_label.values()]))
    return InterpretabilityScore(truth, dist, per_label, sorted(empty, key=list(labels).index))


# -- end to end ----------------------------------------------------------------------

@dataclass
class EvalReport:
    setting: str
    accuracy: float
    score: InterpretabilityScore
    results: list[McqResult]
    profiles: dict[str, ExplanationProfile]

    def summary(self) -> dict:
        return {"setting": self.setting, "accuracy": self.accuracy, **self.score.to_dict()}


def evaluate(
    scores: np.ndarray,
    logits: np.ndarray,
    targets: np.ndarray,
    labels: Sequence[str],
    concepts: Sequence[str],
    llm: ConceptLlm,
    text_embs: np.ndarray,
    image_embs: np.ndarray,
    seed: int = 0,
    superclasses: Sequence[str | None] | None = None,
    setting: str = "cocobm",
) -> EvalReport:
    predictions = np.argmax(np.asarray(logits), axis=-1)
    accuracy = float((predictions == np.asarray(targets)).mean())
    profiles = extract_explanations(scores, predictions, labels, concepts)
    empty = [lab for lab in labels if lab not in profiles or not len(profiles[lab])]
    mcqs = build_mcqs(profiles, labels, text_embs, image_embs, seed, superclasses)
    results = judge(llm, mcqs)
    score = score_interpretability(results, labels, empty)
    return EvalReport(setting, accuracy, score, results, profiles)


def write_mcqs(mcqs: Sequence[Mcq], path: str | Path) -> None:
    with Path(path).open("w") as fh:
        for q in mcqs:
            fh.write(json.dumps(q.to_dict(), sort_keys=True) + "\n")


def write_results(results: Sequence[McqResult], path: str | Path) -> None:
    with Path(path).open("w") as fh:
        for r in results:
            fh.write(json.dumps(r.to_dict(), sort_keys=True) + "\n")


def write_table(reports: Sequence[EvalReport], path: str | Path) -> None:
    """Plot-ready accuracy vs interpretability table, one row per setting."""
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["setting", "accuracy", "truthfulness", "distinguishability", "interpretability"])
        for r in reports:
            s = r.score
            writer.writerow(
                [r.setting, f"{r.accuracy:.6f}", f"{s.truthfulness:.6f}", f"{s.distinguishability:.6f}", f"{s.overall:.6f}"]
            )
