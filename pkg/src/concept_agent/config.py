"""Run configuration: validation, hashing, file loading and backend wiring."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .actions import SelectConfig
from .backends.cache import EmbeddingCache
from .backends.llm import ConceptLlm
from .backends.synthetic import PlantedWorld, default_world
from .cocobm import TrainConfig, config_hash
from .data import EmbeddedDataset, list_images, read_label_manifest, stratified_split, substream
from .planner import AgentConfig

logger = logging.getLogger(__name__)

BACKENDS = ("synthetic", "real")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    backend: str = "synthetic"
    seed: int = 0
    # synthetic backend
    world: str | None = None  # PlantedWorld JSON; None -> built-in bird world
    noise: float | None = None  # overrides the world's noise level
    # real backend
    dataset: str | None = None  # directory with labels.csv and one image folder per label
    cache: str | None = None  # embedding cache file; default <dataset>/embeddings.bin
    encoder: str = "openai/clip-vit-base-patch32"
    llm_model: str = "gpt-4o"
    judge_model: str = "gpt-4-turbo"
    llm_base_url: str = "https://api.openai.com/v1"
    # grounding
    q: int = 8
    t_a: float = 0.1
    t_m: float = 0.3
    beta: int = 16
    k_init: int | None = None
    max_iterations: int = 10
    use_editable: bool = True
    workers: int = 1
    # training
    test_split: float = 0.5
    lr: float = 0.01
    batch_size: int = 2048
    epochs: int = 200
    final_epochs: int | None = None  # full-dataset training; None -> epochs
    patience: int = 20
    select_epochs: int = 100
    out: str | None = None

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        problems = []
        if self.backend not in BACKENDS:
            problems.append(f"backend must be one of {BACKENDS}, got {self.backend!r}")
        if not 0.0 <= self.t_a <= 1.0:
            problems.append(f"t_a must lie in [0, 1], got {self.t_a}")
        if self.t_m < 0:
            problems.append(f"t_m must be non-negative, got {self.t_m}")
        if self.q < 1:
            problems.append(f"q must be at least 1, got {self.q}")
        if self.beta < 2:
            problems.append(f"beta must be at least 2, got {self.beta}")
        if self.max_iterations < 1:
            problems.append("max_iterations must be at least 1")
        if self.k_init is not None and self.k_init < 1:
            problems.append("k_init must be at least 1")
        if not 0.0 < self.test_split < 1.0:
            problems.append(f"test_split must lie in (0, 1), got {self.test_split}")
        if self.noise is not None and self.noise < 0:
            problems.append("noise must be non-negative")
        for name in ("lr", "batch_size", "epochs", "patience", "select_epochs", "workers"):
            if getattr(self, name) <= 0:
                problems.append(f"{name} must be positive")
        if self.final_epochs is not None and self.final_epochs <= 0:
            problems.append("final_epochs must be positive")
        if self.backend == "real" and not self.dataset:
            problems.append("the real backend needs a dataset directory")
        if problems:
            raise ConfigError("; ".join(problems))

    # -- serialization ---------------------------------------------------------

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        return cls(**d)

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            return cls.from_dict(json.loads(path.read_text()))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path} is not valid JSON: {exc}") from exc

    def hash(self) -> str:
        """Hash of everything that affects results; the output location is excluded."""
        d = self.to_dict()
        d.pop("out")
        d.pop("workers")
        return config_hash(d)

    def stamp(self) -> dict:
        return {"config_hash": self.hash(), "seed": self.seed}

    # -- derived configs -------------------------------------------------------

    def train_config(self, final: bool = False) -> TrainConfig:
        epochs = (self.final_epochs or self.epochs) if final else self.epochs
        return TrainConfig(
            q=self.q,
            lr=self.lr,
            batch_size=self.batch_size,
            epochs=epochs,
            patience=self.patience,
            seed=substream(self.seed, "final-train" if final else "perceive"),
        )

    def agent_config(self) -> AgentConfig:
        return AgentConfig(
            t_a=self.t_a,
            t_m=self.t_m,
            beta=self.beta,
            max_iterations=self.max_iterations,
            seed=self.seed,
            k_init=self.k_init,
            use_editable=self.use_editable,
            workers=self.workers,
            train=self.train_config(),
            select=SelectConfig(epochs=self.select_epochs, lr=self.lr),
        )


# -- environment construction ----------------------------------------------------------

@dataclass
class Environment:
    """Everything a command needs: encoder, LLMs and the train/test data."""

    encoder: object
    llm: ConceptLlm
    judge: ConceptLlm
    train: EmbeddedDataset
    test: EmbeddedDataset
    world: PlantedWorld | None = None


def load_world(config: RunConfig) -> PlantedWorld:
    world = PlantedWorld.load(config.world) if config.world else default_world()
    if config.noise is not None:
        world.noise = config.noise
    return world


def synthetic_datasets(world: PlantedWorld) -> tuple[EmbeddedDataset, EmbeddedDataset]:
    """The world's image set for training plus an independent draw for testing."""
    train = EmbeddedDataset.from_groups(world.images(), world.superclasses, prefix="train/")
    test = EmbeddedDataset.from_groups(world.images(seed=world.seed + 1), world.superclasses, prefix="test/")
    return train, test


def cache_path(config: RunConfig) -> Path:
    if config.cache:
        return Path(config.cache)
    if config.backend == "real":
        return Path(config.dataset) / "embeddings.bin"
    raise ConfigError("the synthetic backend needs an explicit cache path")


def real_dataset(config: RunConfig) -> EmbeddedDataset:
    root = Path(config.dataset)
    labels, superclasses = read_label_manifest(root / "labels.csv")
    items = list_images(root, labels)
    path = cache_path(config)
    if not path.exists():
        raise ConfigError(f"no embedding cache at {path}; run `concept-agent embed` first")
    cache = EmbeddingCache.load(path)
    missing = [key for key, _ in items if key not in cache]
    if missing:
        raise ConfigError(f"{len(missing)} images are not embedded yet; rerun `concept-agent embed`")
    feats = np.stack([cache.get(key) for key, _ in items]).astype(np.float64)
    targets = np.asarray([j for _, j in items])
    sup = tuple(superclasses) if any(s is not None for s in superclasses) else None
    return EmbeddedDataset(tuple(labels), feats, targets, tuple(key for key, _ in items), sup)


def build_environment(config: RunConfig) -> Environment:
    if config.backend == "synthetic":
        world = load_world(config)
        llm = ConceptLlm(world.scripted_llm())
        train, test = synthetic_datasets(world)
        return Environment(world.text_encoder(), llm, llm, train, test, world)

    from .backends.encoders import ClipBackend
    from .backends.llm import OpenAIChatLlm

    data = real_dataset(config)
    first, second = stratified_split(data.targets, config.test_split, substream(config.seed, "test-split"))
    encoder = ClipBackend(config.encoder)
    llm = ConceptLlm(OpenAIChatLlm(config.llm_model, config.llm_base_url))
    judge = ConceptLlm(OpenAIChatLlm(config.judge_model, config.llm_base_url))
    return Environment(encoder, llm, judge, data.subset(first), data.subset(second))
