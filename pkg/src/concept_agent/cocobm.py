"""Conditional concept bottleneck model.

Every (label, concept) pair gets its own text prompt
``[t_1 .. t_q][label tokens][concept tokens]`` where the q condition tokens are
learnable and shared by all pairs. A sample therefore yields an N x M score
matrix instead of an M-vector, and label j only reads its own row.
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn

from .backends.encoders import DTYPE, TextEncoder, TokenSequence, encode_texts, pad_sequences
from .bank import ConceptBank, EditableMatrix

logger = logging.getLogger(__name__)


class ModelError(ValueError):
    pass


@dataclass
class TrainConfig:
    q: int = 8
    lr: float = 0.01
    batch_size: int = 2048
    epochs: int = 200
    patience: int = 20
    init_std: float = 0.02
    seed: int = 0
    pos_weight: float | None = None  # None -> number of labels
    logit_scale: float = 10.0
    condition_on_label: bool = True


@dataclass
class ScoreTensor:
    values: np.ndarray  # (N, M) or (K, N, M)
    labels: tuple[str, ...]
    concept_ids: tuple[str, ...]

    def __post_init__(self):
        if self.values.shape[-2:] != (len(self.labels), len(self.concept_ids)):
            raise ModelError(f"score shape {self.values.shape} does not match bank ({len(self.labels)}, {len(self.concept_ids)})")
        if not np.isfinite(self.values).all():
            raise ModelError("score tensor contains non-finite entries")


class ConditionTokens(nn.Module):
    def __init__(self, q: int, token_dim: int, std: float = 0.02, seed: int = 0):
        super().__init__()
        if q < 1:
            raise ModelError("need at least one condition token")
        gen = torch.Generator().manual_seed(seed)
        self.tokens = nn.Parameter(torch.randn(q, token_dim, generator=gen, dtype=DTYPE) * std)

    @property
    def q(self) -> int:
        return self.tokens.shape[0]


def build_prompt(encoder: TextEncoder, label: str, concept: str, cond: ConditionTokens) -> TokenSequence:
    fixed = torch.cat([encoder.tokenize(label).embeddings, encoder.tokenize(concept).embeddings])
    return TokenSequence(torch.cat([cond.tokens, fixed]), (True,) * cond.q + (False,) * fixed.shape[0])


def clamp_scores(raw: torch.Tensor, editable: torch.Tensor) -> torch.Tensor:
    """min(s, 0) wherever E = 1. Written as a select so no gradient reaches clamped entries."""
    return torch.where(editable & (raw > 0), torch.zeros_like(raw), raw)


class CoCoBM(nn.Module):
    def __init__(
        self,
        encoder: TextEncoder,
        labels: Sequence[str],
        concepts: Sequence[str],
        editable: np.ndarray | None = None,
        config: TrainConfig | None = None,
    ):
        super().__init__()
        self.config = config = config or TrainConfig()
        self.encoder = encoder
        self.labels = tuple(labels)
        self.concepts = tuple(concepts)
        n, m = len(self.labels), len(self.concepts)
        if editable is None:
            editable = np.zeros((n, m), dtype=np.uint8)
        if editable.shape != (n, m):
            raise ModelError(f"editable matrix shape {editable.shape} != ({n}, {m})")
        self.register_buffer("editable", torch.as_tensor(np.asarray(editable, dtype=bool)))
        self.cond = ConditionTokens(config.q, encoder.token_dim, config.init_std, config.seed)
        self.weight = nn.Parameter(torch.zeros(n, m, dtype=DTYPE))
        self.bias = nn.Parameter(torch.zeros(n, dtype=DTYPE))

        label_tok = [encoder.tokenize(y).embeddings for y in self.labels]
        concept_tok = [encoder.tokenize(c).embeddings for c in self.concepts]
        fixed = []
        for j in range(n):
            for k in range(m):
                parts = [label_tok[j], concept_tok[k]] if config.condition_on_label else [concept_tok[k]]
                fixed.append(TokenSequence.fixed(torch.cat(parts)))
        if fixed:
            batch, mask = pad_sequences(fixed)
        else:
            batch = torch.zeros(0, 1, encoder.token_dim, dtype=DTYPE)
            mask = torch.zeros(0, 1, dtype=torch.bool)
        self.register_buffer("fixed_tokens", batch)
        self.register_buffer("fixed_mask", mask)

    @property
    def shape(self) -> tuple[int, int]:
        return len(self.labels), len(self.concepts)

    def text_embeddings(self) -> torch.Tensor:
        """Conditional concept embeddings T(p_k^j), shape (N, M, d)."""
        n, m = self.shape
        count = self.fixed_tokens.shape[0]
        cond = self.cond.tokens.unsqueeze(0).expand(count, -1, -1)
        tokens = torch.cat([cond, self.fixed_tokens], dim=1)
        mask = torch.cat([torch.ones(count, self.cond.q, dtype=torch.bool), self.fixed_mask], dim=1)
        return self.encoder.encode_batch(tokens, mask).reshape(n, m, -1)

    def raw_scores(self, images: torch.Tensor) -> torch.Tensor:
        return torch.einsum("bd,nmd->bnm", images, self.text_embeddings())

    def concept_scores(self, images: torch.Tensor) -> torch.Tensor:
        return clamp_scores(self.raw_scores(images), self.editable)

    def forward(self, images: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        scores = self.concept_scores(images)
        logits = aggregate_torch(scores, self.weight, self.bias) * self.config.logit_scale
        return logits, scores


def aggregate_torch(scores: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None) -> torch.Tensor:
    out = (scores * weight).sum(-1)
    return out if bias is None else out + bias


def aggregate(scores: np.ndarray, weight: np.ndarray, bias: np.ndarray | None = None) -> np.ndarray:
    """s_y^j = W[j] . scores[j] (+ b_j); works on (N, M) or batched (K, N, M)."""
    scores, weight = np.asarray(scores), np.asarray(weight)
    if scores.shape[-2:] != weight.shape:
        raise ModelError(f"score shape {scores.shape} incompatible with weights {weight.shape}")
    out = (scores * weight).sum(-1)
    return out if bias is None else out + np.asarray(bias)


def weighted_bce(logits: torch.Tensor, targets: torch.Tensor, pos_weight: float | None = None) -> torch.Tensor:
    """Mean over labels (then samples) of the positive-weighted one-vs-rest BCE.

    ``targets`` holds integer label indices; the positive weight defaults to N.
    """
    if not torch.isfinite(logits).all():
        raise ModelError("non-finite logits")
    logits = torch.atleast_2d(logits)
    targets = torch.as_tensor(targets).reshape(-1)
    n = logits.shape[-1]
    pos_weight = float(n) if pos_weight is None else float(pos_weight)
    onehot = torch.zeros_like(logits)
    onehot[torch.arange(logits.shape[0]), targets] = 1.0
    log_p = nn.functional.logsigmoid(logits)
    log_not_p = nn.functional.logsigmoid(-logits)
    per_label = -(pos_weight * onehot * log_p + (1 - onehot) * log_not_p)
    return per_label.mean()


def predict(logits: np.ndarray) -> np.ndarray:
    """Argmax over labels; np.argmax already resolves ties to the lowest index."""
    return np.argmax(np.asarray(logits), axis=-1)


def score_sample(model: CoCoBM, image_emb) -> ScoreTensor:
    x = torch.as_tensor(np.asarray(image_emb), dtype=DTYPE)
    with torch.no_grad():
        values = model.concept_scores(x.reshape(-1, x.shape[-1])).numpy()
    values = values[0] if x.dim() == 1 else values
    return ScoreTensor(values, model.labels, model.concepts)


# -- baseline: one score vector shared by every label ------------------------

def score_sample_shared(image_emb, concept_embs) -> np.ndarray:
    return np.asarray(concept_embs) @ np.asarray(image_emb)


def aggregate_shared(shared_scores: np.ndarray, weight: np.ndarray, bias: np.ndarray | None = None) -> np.ndarray:
    out = np.asarray(weight) @ np.asarray(shared_scores)
    return out if bias is None else out + bias


# -- training ----------------------------------------------------------------

@dataclass
class TrainResult:
    model: CoCoBM
    losses: list[float] = field(default_factory=list)
    val_losses: list[float] = field(default_factory=list)
    best_epoch: int = -1
    val_accuracy: float = float("nan")
    val_scores: np.ndarray | None = None  # (K, N, M)
    val_logits: np.ndarray | None = None


def _as_tensor(x) -> torch.Tensor:
    return torch.as_tensor(np.asarray(x, dtype=np.float64), dtype=DTYPE)


def train(
    model: CoCoBM,
    x_train,
    y_train,
    x_val=None,
    y_val=None,
    config: TrainConfig | None = None,
    on_step=None,
) -> TrainResult:
    """Adam on condition tokens and W only; the encoders stay frozen.

    With a validation split, the parameters from the epoch with the lowest
    validation loss are restored after early stopping.
    """
    config = config or model.config
    x_train, y_train = _as_tensor(x_train), torch.as_tensor(np.asarray(y_train), dtype=torch.long)
    if x_train.shape[0] == 0:
        raise ModelError("empty training split")
    has_val = x_val is not None and len(x_val) > 0
    if has_val:
        x_val, y_val = _as_tensor(x_val), torch.as_tensor(np.asarray(y_val), dtype=torch.long)

    params = [model.cond.tokens, model.weight, model.bias]
    opt = torch.optim.Adam(params, lr=config.lr)
    gen = torch.Generator().manual_seed(config.seed)
    result = TrainResult(model)
    best_loss, best_state, stale = float("inf"), None, 0

    for epoch in range(config.epochs):
        order = torch.randperm(x_train.shape[0], generator=gen)
        total = 0.0
        for start in range(0, len(order), config.batch_size):
            idx = order[start : start + config.batch_size]
            logits, scores = model(x_train[idx])
            loss = weighted_bce(logits, y_train[idx], config.pos_weight)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            if on_step is not None:
                on_step(model, scores.detach())
        result.losses.append(total / x_train.shape[0])
        if not has_val:
            continue
        with torch.no_grad():
            val_loss = weighted_bce(model(x_val)[0], y_val, config.pos_weight).item()
        result.val_losses.append(val_loss)
        if val_loss < best_loss - 1e-12:
            best_loss, best_state, stale = val_loss, copy.deepcopy(model.state_dict()), 0
            result.best_epoch = epoch
        else:
            stale += 1
            if stale >= config.patience:
                logger.debug("early stop at epoch %d (best %d)", epoch, result.best_epoch)
                break

    if best_state is not None:
        model.load_state_dict(best_state)
    if has_val:
        with torch.no_grad():
            logits, scores = model(x_val)
        result.val_logits = logits.numpy()
        result.val_scores = scores.numpy()
        result.val_accuracy = float((predict(result.val_logits) == y_val.numpy()).mean())
    return result


def evaluate_accuracy(model: CoCoBM, x, y) -> float:
    with torch.no_grad():
        logits, _ = model(_as_tensor(x))
    return float((predict(logits.numpy()) == np.asarray(y)).mean())


def make_model(
    encoder: TextEncoder,
    bank: ConceptBank,
    editable: EditableMatrix | None,
    config: TrainConfig,
) -> CoCoBM:
    entries = None if editable is None else editable.entries
    if editable is not None and (editable.labels != bank.labels or editable.concept_ids != tuple(bank.ids)):
        raise ModelError("editable matrix was built for a different bank")
    return CoCoBM(encoder, bank.labels, bank.texts, entries, config)


# -- checkpoints ---------------------------------------------------------------

def save_checkpoint(model: CoCoBM, bank: ConceptBank, path: str | Path, extra: dict | None = None) -> None:
    payload = {
        "q": model.cond.q,
        "d_tok": model.cond.tokens.shape[1],
        "condition_tokens": model.cond.tokens.detach().tolist(),
        "W": model.weight.detach().tolist(),
        "bias": model.bias.detach().tolist(),
        "editable": model.editable.to(torch.uint8).tolist(),
        "bank_version": bank.version,
        "bank_hash": bank.content_hash(),
        "config": asdict(model.config),
    }
    payload.update(extra or {})
    Path(path).write_text(json.dumps(payload))


def load_checkpoint(path: str | Path, encoder: TextEncoder, bank: ConceptBank) -> tuple[CoCoBM, dict]:
    data = json.loads(Path(path).read_text())
    if data["bank_hash"] != bank.content_hash():
        raise ModelError(
            f"checkpoint {path} was trained on bank v{data['bank_version']} ({data['bank_hash']}), "
            f"not bank v{bank.version} ({bank.content_hash()})"
        )
    config = TrainConfig(**data["config"])
    model = CoCoBM(encoder, bank.labels, bank.texts, np.asarray(data["editable"], dtype=np.uint8), config)
    with torch.no_grad():
        model.cond.tokens.copy_(torch.tensor(data["condition_tokens"], dtype=DTYPE))
        model.weight.copy_(torch.tensor(data["W"], dtype=DTYPE).reshape(model.weight.shape))
        model.bias.copy_(torch.tensor(data["bias"], dtype=DTYPE))
    return model, data


def config_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]


def plain_concept_embeddings(encoder: TextEncoder, concepts: Sequence[str]) -> np.ndarray:
    return encode_texts(encoder, list(concepts)).numpy()
