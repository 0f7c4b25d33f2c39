"""Planted synthetic world: ground-truth concepts, images, scripted LLM fixtures.

Each label owns a set of planted concepts. An image of a label is the
normalized sum of the plain-text embeddings of its planted concepts plus
isotropic Gaussian noise, renormalized. The scripted LLM answers generation,
fact-verification and judging prompts from the same truth table, which makes
every stage of the agent loop checkable against the plant.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from ..bank import CRITICAL, OCCASIONAL, UNRELATED, normalize_text
from .encoders import SyntheticTextEncoder, _seed_from, encode_texts, unit
from .llm import LETTERS, ScriptedLlm

_LETTER_FOR = {CRITICAL: "A", OCCASIONAL: "B", UNRELATED: "C"}


@dataclass
class PlantedWorld:
    labels: list[str]
    concepts: dict[str, dict[str, str]]  # planted phrase -> {label: verdict}
    generation: dict[str, list[str]]  # label -> ordered phrases offered for its prompt
    superclasses: list[str | None] | None = None
    aliases: dict[str, str] = field(default_factory=dict)  # paraphrase -> planted phrase
    decoys: list[str] = field(default_factory=list)
    dim: int = 512
    seed: int = 0
    noise: float = 0.1
    anisotropy: float = 0.25
    token_scale: float = 512.0
    images_per_label: int = 40
    response_size: int = 6
    judge_strictness: float = 1.0

    # -- truth -------------------------------------------------------------

    def base(self, phrase: str) -> str | None:
        key = normalize_text(phrase)
        alias_map = {normalize_text(a): normalize_text(b) for a, b in self.aliases.items()}
        key = alias_map.get(key, key)
        return key if key in self._concept_keys else None

    @property
    def _concept_keys(self) -> dict[str, str]:
        return {normalize_text(c): c for c in self.concepts}

    def verdict(self, phrase: str, label: str) -> str:
        base = self.base(phrase)
        if base is None:
            return UNRELATED
        return self.concepts[self._concept_keys[base]].get(label, UNRELATED)

    def is_true(self, phrase: str, label: str) -> bool:
        return self.verdict(phrase, label) != UNRELATED

    def planted_for(self, label: str) -> list[str]:
        return [c for c, table in self.concepts.items() if table.get(label, UNRELATED) != UNRELATED]

    def add_alias(self, phrase: str, base: str) -> None:
        self.aliases[normalize_text(phrase)] = base

    def recovered(self, texts: Sequence[str]) -> set[str]:
        """Planted concepts represented (directly or by paraphrase) in ``texts``."""
        found = {self.base(t) for t in texts}
        return {self._concept_keys[b] for b in found if b is not None}

    # -- encoders and images -----------------------------------------------

    def text_encoder(self) -> SyntheticTextEncoder:
        return SyntheticTextEncoder(
            dim=self.dim, seed=self.seed, anisotropy=self.anisotropy, token_scale=self.token_scale
        )

    def images(self, noise: float | None = None, per_label: int | None = None, seed: int | None = None) -> dict[str, np.ndarray]:
        """Feature vectors per label, shape (per_label, dim)."""
        noise = self.noise if noise is None else noise
        per_label = per_label or self.images_per_label
        seed = self.seed if seed is None else seed
        encoder = self.text_encoder()
        out = {}
        for label in self.labels:
            planted = self.planted_for(label)
            if not planted:
                raise ValueError(f"label {label!r} has no planted concepts")
            signal = unit(encode_texts(encoder, planted).sum(0)).numpy()
            rng = np.random.default_rng(_seed_from(seed, "images", label))
            x = signal + noise * rng.normal(size=(per_label, self.dim))
            out[label] = x / np.linalg.norm(x, axis=1, keepdims=True)
        return out

    # -- scripted LLM ------------------------------------------------------

    def _respond(self, phrases: Sequence[str], exclusions: Sequence[str]) -> str:
        banned = {normalize_text(e) for e in exclusions}
        kept = [p for p in phrases if normalize_text(p) not in banned]
        return "\n".join(kept[: self.response_size])

    def confusable_phrases(self, labels: Sequence[str]) -> list[str]:
        """Planted phrases, then paraphrases, true for some but not all of ``labels``."""
        def splits(phrase):
            hits = sum(self.is_true(phrase, lab) for lab in labels)
            return 0 < hits < len(labels)

        return [p for p in list(self.concepts) + list(self.aliases) if splits(p)]

    def judge_truthful(self, label: str, features: Sequence[str]) -> bool:
        if not features:
            return False
        share = sum(self.is_true(f, label) for f in features) / len(features)
        return share >= self.judge_strictness

    def judge_pick(self, features: Sequence[str], options: Sequence[str]) -> int:
        def score(option):
            hits = sum(self.is_true(f, option) for f in features)
            return hits - (len(features) - hits)

        scores = [score(o) for o in options]
        return scores.index(max(scores))

    def scripted_llm(self) -> ScriptedLlm:
        def generate_label(args, sample):
            return self._respond(self.generation.get(args["label"], []), args["exclusions"])

        def generate_confusable(args, sample):
            return self._respond(self.confusable_phrases(args["labels"]), args["exclusions"])

        def verify_fact(args, sample):
            return _LETTER_FOR[self.verdict(args["concept"], args["label"])]

        def truthfulness(args, sample):
            return "A" if self.judge_truthful(args["label"], args["features"]) else "B"

        def distinguishability(args, sample):
            return LETTERS[self.judge_pick(args["features"], args["options"])]

        return ScriptedLlm(
            {
                "generate_label": generate_label,
                "generate_confusable": generate_confusable,
                "verify_fact": verify_fact,
                "truthfulness": truthfulness,
                "distinguishability": distinguishability,
            }
        )

    # -- serialization -----------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "labels": [
                {"name": n, "superclass": (self.superclasses[i] if self.superclasses else None)}
                for i, n in enumerate(self.labels)
            ],
            "concepts": self.concepts,
            "generation": self.generation,
            "aliases": self.aliases,
            "decoys": self.decoys,
            "dim": self.dim,
            "seed": self.seed,
            "noise": self.noise,
            "anisotropy": self.anisotropy,
            "token_scale": self.token_scale,
            "images_per_label": self.images_per_label,
            "response_size": self.response_size,
            "judge_strictness": self.judge_strictness,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "PlantedWorld":
        labels = [lab["name"] if isinstance(lab, Mapping) else lab for lab in d["labels"]]
        sup = [lab.get("superclass") if isinstance(lab, Mapping) else None for lab in d["labels"]]
        concepts = {}
        for phrase, table in d["concepts"].items():
            concepts[phrase] = {lab: CRITICAL for lab in table} if isinstance(table, list) else dict(table)
        keys = ("dim", "seed", "noise", "anisotropy", "token_scale", "images_per_label", "response_size", "judge_strictness")
        return cls(
            labels=labels,
            concepts=concepts,
            generation={k: list(v) for k, v in d["generation"].items()},
            superclasses=sup if any(s is not None for s in sup) else None,
            aliases=dict(d.get("aliases", {})),
            decoys=list(d.get("decoys", [])),
            **{k: d[k] for k in keys if k in d},
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path: str | Path) -> "PlantedWorld":
        return cls.from_dict(json.loads(Path(path).read_text()))


def default_world(**overrides) -> PlantedWorld:
    """Six bird labels, four planted concepts each, one confusable pair.

    ``crow`` and ``raven`` share every concept their own prompts surface; the
    concepts that separate them only come back from a prompt naming both.
    """
    labels = ["cardinal", "blue jay", "goldfinch", "robin", "crow", "raven"]
    support = {
        "sturdy thick conical bill": ["cardinal", "blue jay", "crow", "raven"],
        "slender tapered wing tips": ["goldfinch", "robin", "crow", "raven"],
        "short rounded tail feathers": ["cardinal", "goldfinch", "crow", "raven"],
        "bright saturated body coloring": ["cardinal", "blue jay", "goldfinch", "robin"],
        "raised pointed head crest": ["cardinal", "blue jay", "robin"],
        "pale streaked underbelly pattern": ["blue jay", "goldfinch", "robin"],
        "squared fan shaped rump": ["crow"],
        "shaggy bristled throat ruff": ["raven"],
    }
    aliases = {
        "heavy thick conical bill": "sturdy thick conical bill",
        "long slender tapered wing": "slender tapered wing tips",
        "short rounded tail plumes": "short rounded tail feathers",
        "vivid bright saturated body": "bright saturated body coloring",
        "raised pointed crown crest": "raised pointed head crest",
        "pale streaked underbelly markings": "pale streaked underbelly pattern",
        "squared fan shaped back": "squared fan shaped rump",
        "shaggy bristled neck ruff": "shaggy bristled throat ruff",
    }
    decoys = [
        "polished chrome bumper trim",
        "woven wicker basket handle",
        "frosted glass lamp shade",
        "knitted wool scarf fringe",
        "ceramic tile grout lines",
        "brushed steel cabinet hinge",
    ]
    exposed = {
        "cardinal": (["sturdy thick conical bill", "short rounded tail feathers", "bright saturated body coloring",
                      "raised pointed head crest"], [0, 1]),
        "blue jay": (["sturdy thick conical bill", "bright saturated body coloring", "raised pointed head crest",
                      "pale streaked underbelly pattern"], [2, 3]),
        "goldfinch": (["slender tapered wing tips", "short rounded tail feathers", "bright saturated body coloring",
                       "pale streaked underbelly pattern"], [4, 5]),
        "robin": (["slender tapered wing tips", "bright saturated body coloring", "raised pointed head crest",
                   "pale streaked underbelly pattern"], [0, 2]),
        "crow": (["sturdy thick conical bill", "slender tapered wing tips", "short rounded tail feathers"], [1, 3]),
        "raven": (["sturdy thick conical bill", "slender tapered wing tips", "short rounded tail feathers"], [4, 5]),
    }
    by_base = {v: k for k, v in aliases.items()}
    generation = {
        lab: planted + [decoys[i] for i in dec] + [by_base[p] for p in planted]
        for lab, (planted, dec) in exposed.items()
    }
    world = PlantedWorld(
        labels=labels,
        concepts={c: {lab: CRITICAL for lab in labs} for c, labs in support.items()},
        generation=generation,
        superclasses=["bird"] * len(labels),
        aliases=aliases,
        decoys=decoys,
    )
    for key, value in overrides.items():
        setattr(world, key, value)
    return world
