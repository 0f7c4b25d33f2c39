"""Image and text encoders.

Every encoder returns unit-normalized vectors so that cosine similarity and dot
product coincide. Text encoders expose a token-level path (``tokenize`` then
``encode_batch``) so that learnable condition tokens can be spliced in front of
the fixed label and concept tokens and trained by backpropagation.
"""

from __future__ import annotations

import hashlib
import logging
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np
import torch

logger = logging.getLogger(__name__)

DTYPE = torch.float64

_TOKEN_RE = re.compile(r"[a-z0-9]+")


class EncoderError(ValueError):
    pass


@dataclass(frozen=True)
class TokenSequence:
    embeddings: torch.Tensor  # (L, token_dim)
    learnable: tuple[bool, ...]

    def __post_init__(self):
        n = self.embeddings.shape[0]
        if n < 1:
            raise EncoderError("token sequence must contain at least one token")
        if len(self.learnable) != n:
            raise EncoderError("learnable flags must cover every position")
        q = sum(self.learnable)
        if any(self.learnable[q:]) or not all(self.learnable[:q]):
            raise EncoderError("learnable positions must form a contiguous prefix")

    def __len__(self) -> int:
        return self.embeddings.shape[0]

    @property
    def num_learnable(self) -> int:
        return sum(self.learnable)

    @classmethod
    def fixed(cls, embeddings: torch.Tensor) -> "TokenSequence":
        return cls(embeddings, (False,) * embeddings.shape[0])


class TextEncoder(Protocol):
    dim: int
    token_dim: int

    def tokenize(self, text: str) -> TokenSequence: ...

    def encode_batch(self, embeddings: torch.Tensor, mask: torch.Tensor) -> torch.Tensor: ...


class ImageEncoder(Protocol):
    dim: int

    def encode_image(self, image) -> torch.Tensor: ...


def unit(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    return x / x.norm(dim=dim, keepdim=True).clamp_min(1e-12)


def pad_sequences(seqs: Sequence[TokenSequence]) -> tuple[torch.Tensor, torch.Tensor]:
    """Right-pad sequences to a (B, L, token_dim) batch plus a boolean mask."""
    longest = max(len(s) for s in seqs)
    token_dim = seqs[0].embeddings.shape[1]
    batch = torch.zeros(len(seqs), longest, token_dim, dtype=seqs[0].embeddings.dtype)
    mask = torch.zeros(len(seqs), longest, dtype=torch.bool)
    for i, s in enumerate(seqs):
        batch[i, : len(s)] = s.embeddings
        mask[i, : len(s)] = True
    return batch, mask


def encode_text_sequence(encoder: TextEncoder, seq: TokenSequence) -> torch.Tensor:
    batch, mask = pad_sequences([seq])
    return encoder.encode_batch(batch, mask)[0]


def encode_texts(encoder: TextEncoder, texts: Sequence[str]) -> torch.Tensor:
    """Plain-text embeddings (no condition tokens), shape (n, dim)."""
    if not texts:
        return torch.zeros(0, encoder.dim, dtype=DTYPE)
    batch, mask = pad_sequences([encoder.tokenize(t) for t in texts])
    with torch.no_grad():
        return encoder.encode_batch(batch, mask)


def _seed_from(*parts) -> int:
    digest = hashlib.sha256(":".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(digest[:8], "little")


class SyntheticTextEncoder:
    """Deterministic stand-in for a text tower.

    Token vectors are drawn from a generator keyed by (seed, token) and share a
    common offset along one seeded direction, so that unrelated texts keep a
    positive baseline similarity the way contrastive encoders do. A sequence is
    encoded as ``normalize(P @ mean(tokens))`` with a fixed seeded projection P.
    """

    def __init__(
        self,
        dim: int = 64,
        token_dim: int | None = None,
        seed: int = 0,
        anisotropy: float = 0.25,
        token_scale: float = 1.0,
    ):
        self.dim = dim
        self.token_dim = token_dim or dim
        self.seed = seed
        self.anisotropy = anisotropy
        self.token_scale = token_scale
        rng = np.random.default_rng(_seed_from(seed, "projection"))
        self.projection = torch.tensor(
            rng.normal(0.0, 1.0 / np.sqrt(self.token_dim), (dim, self.token_dim)), dtype=DTYPE
        )
        common = np.random.default_rng(_seed_from(seed, "common")).normal(size=self.token_dim)
        self.common = common / np.linalg.norm(common)
        self._table: dict[str, torch.Tensor] = {}

    def token_vector(self, token: str) -> torch.Tensor:
        vec = self._table.get(token)
        if vec is None:
            rng = np.random.default_rng(_seed_from(self.seed, "token", token))
            raw = rng.normal(0.0, 1.0 / np.sqrt(self.token_dim), self.token_dim) + self.anisotropy * self.common
            vec = self._table[token] = torch.tensor(self.token_scale * raw, dtype=DTYPE)
        return vec

    def tokenize(self, text: str) -> TokenSequence:
        tokens = _TOKEN_RE.findall(text.lower())
        if not tokens:
            raise EncoderError(f"cannot tokenize empty text {text!r}")
        return TokenSequence.fixed(torch.stack([self.token_vector(t) for t in tokens]))

    def encode_batch(self, embeddings: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        weights = mask.to(embeddings.dtype).unsqueeze(-1)
        pooled = (embeddings * weights).sum(1) / weights.sum(1)
        return unit(pooled @ self.projection.T)


class SyntheticImageEncoder:
    """Images are precomputed feature vectors; encoding only normalizes them."""

    def __init__(self, dim: int = 64):
        self.dim = dim

    def encode_image(self, image) -> torch.Tensor:
        x = torch.as_tensor(np.asarray(image, dtype=np.float64), dtype=DTYPE)
        if x.shape != (self.dim,):
            raise EncoderError(f"expected a feature of shape ({self.dim},), got {tuple(x.shape)}")
        if not torch.isfinite(x).all():
            raise EncoderError("image feature contains non-finite values")
        return unit(x)

    def encode_images(self, images) -> torch.Tensor:
        return torch.stack([self.encode_image(im) for im in images])


class ClipBackend:
    """Optional real encoder backed by a Hugging Face CLIP checkpoint.

    Learnable condition tokens are placed right after the start token, CoOp
    style; the pooled state is read at the end-of-text position.
    """

    def __init__(self, model="openai/clip-vit-base-patch32", processor=None, device: str = "cpu"):
        from transformers import CLIPModel

        if isinstance(model, str):
            from transformers import CLIPProcessor

            processor = processor or CLIPProcessor.from_pretrained(model)
            model = CLIPModel.from_pretrained(model)
        self.model = model.to(device).eval()
        for p in self.model.parameters():
            p.requires_grad_(False)
        self.processor = processor
        self.device = device
        text_cfg = self.model.config.text_config
        self.dim = self.model.config.projection_dim
        self.token_dim = text_cfg.hidden_size
        self.bos_id = text_cfg.bos_token_id
        self.eos_id = text_cfg.eos_token_id
        self._embed = self.model.text_model.embeddings.token_embedding

    def _ids(self, text: str) -> list[int]:
        if self.processor is None:
            raise EncoderError("a tokenizer/processor is required to tokenize text")
        tok = getattr(self.processor, "tokenizer", self.processor)
        ids = tok(text, add_special_tokens=False)["input_ids"]
        return list(ids)

    def tokenize(self, text: str) -> TokenSequence:
        if not text.strip():
            raise EncoderError("cannot tokenize empty text")
        ids = torch.tensor(self._ids(text), device=self.device)
        with torch.no_grad():
            emb = self._embed(ids).to(DTYPE)
        return TokenSequence.fixed(emb)

    def encode_batch(self, embeddings: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        text_model = self.model.text_model
        dtype = next(text_model.parameters()).dtype
        b, _, _ = embeddings.shape
        lengths = mask.sum(1)
        total = int(lengths.max()) + 2
        bos = self._embed(torch.tensor([self.bos_id], device=self.device)).to(dtype)
        eos = self._embed(torch.tensor([self.eos_id], device=self.device)).to(dtype)
        rows = []
        for i in range(b):
            n = int(lengths[i])
            parts = [bos, embeddings[i, :n].to(dtype), eos]
            pad = total - n - 2
            if pad:
                parts.append(eos.expand(pad, -1))
            rows.append(torch.cat(parts))
        x = text_model.embeddings(inputs_embeds=torch.stack(rows))
        causal = torch.full((total, total), float("-inf"), dtype=dtype, device=self.device).triu(1)
        hidden = text_model.encoder(inputs_embeds=x, attention_mask=causal[None, None].expand(b, 1, -1, -1))
        hidden = text_model.final_layer_norm(hidden.last_hidden_state)
        pooled = hidden[torch.arange(b), lengths + 1]
        return unit(self.model.text_projection(pooled).to(DTYPE))

    def encode_image(self, image) -> torch.Tensor:
        from PIL import Image

        try:
            if isinstance(image, (str, Path)):
                with Image.open(image) as im:
                    image = im.convert("RGB")
        except OSError as exc:
            raise EncoderError(f"cannot read image {image}: {exc}") from exc
        if self.processor is None:
            raise EncoderError("an image processor is required to encode raw images")
        pixels = self.processor(images=image, return_tensors="pt")["pixel_values"].to(self.device)
        with torch.no_grad():
            feats = self.model.get_image_features(pixel_values=pixels)
        if not isinstance(feats, torch.Tensor):
            feats = feats.pooler_output
        return unit(feats[0].to(DTYPE))
