"""Pluggable encoders and LLM clients, with deterministic offline stand-ins."""

from .cache import CacheError, EmbeddingCache
from .encoders import (
    ClipBackend,
    EncoderError,
    SyntheticImageEncoder,
    SyntheticTextEncoder,
    TokenSequence,
    encode_text_sequence,
    encode_texts,
    pad_sequences,
)
from .llm import ConceptLlm, LlmError, LlmExchange, OpenAIChatLlm, ScriptedLlm, majority_vote
from .synthetic import PlantedWorld, default_world

__all__ = [
    "CacheError",
    "ClipBackend",
    "ConceptLlm",
    "EmbeddingCache",
    "EncoderError",
    "LlmError",
    "LlmExchange",
    "OpenAIChatLlm",
    "PlantedWorld",
    "ScriptedLlm",
    "SyntheticImageEncoder",
    "SyntheticTextEncoder",
    "TokenSequence",
    "default_world",
    "encode_text_sequence",
    "encode_texts",
    "majority_vote",
    "pad_sequences",
]
