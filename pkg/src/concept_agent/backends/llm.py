"""LLM access: prompt templates, response validation, retries, caching."""

from __future__ import annotations

import json
import logging
import os
import re
import threading
import time
from collections import Counter
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Any, Callable, Mapping, Protocol, Sequence

from ..bank import CRITICAL, OCCASIONAL, UNRELATED, normalize_text

logger = logging.getLogger(__name__)

TEMPLATE_IDS = (
    "generate_label",
    "generate_confusable",
    "exclusion_note",
    "verify_fact",
    "truthfulness",
    "distinguishability",
)
LETTERS = "ABCDE"
VERDICT_BY_LETTER = {"A": CRITICAL, "B": OCCASIONAL, "C": UNRELATED}
DEFAULT_SUPERCLASS = "objects"
API_KEY_ENV = "CONCEPT_AGENT_LLM_KEY"

_LETTER_RE = re.compile(r"^\W*(?:answer|option)?\s*[:\-]?\s*\(?([A-E])(?:[\s).:;,]|$)", re.IGNORECASE)
_LIST_MARKER_RE = re.compile(r"^\s*(?:[-*•]+|\d+[.)])\s*")


class LlmError(RuntimeError):
    def __init__(self, message: str, last_response: str | None = None):
        super().__init__(message)
        self.last_response = last_response


class FormatError(ValueError):
    pass


class LlmBackend(Protocol):
    def complete(self, prompt: str, *, template: str, args: Mapping[str, Any], temperature: float, sample: int) -> str: ...


@dataclass
class LlmExchange:
    template: str
    args: dict
    prompt: str
    raw_response: str
    parsed: Any = None
    retries_used: int = 0

    def to_dict(self) -> dict:
        return {
            "template": self.template,
            "args": self.args,
            "response": self.raw_response,
            "parsed": self.parsed,
            "retries_used": self.retries_used,
        }


def load_template(name: str) -> str:
    return resources.files("concept_agent").joinpath("templates", f"{name}.txt").read_text()


def fill(template: str, slots: Mapping[str, str]) -> str:
    out = template
    for key, value in slots.items():
        out = out.replace(f"[{key}]", value)
    return out


def render_options_line(options: Sequence[str]) -> str:
    return "; ".join(f"{LETTERS[i]}. {opt}" for i, opt in enumerate(options))


def parse_letter(text: str, n_options: int) -> int:
    m = _LETTER_RE.match(text.strip())
    if not m:
        raise FormatError(f"no option letter in {text!r}")
    idx = LETTERS.index(m.group(1).upper())
    if idx >= n_options:
        raise FormatError(f"option {m.group(1)} out of range for {n_options} options")
    return idx


def parse_feature_lines(text: str) -> list[str]:
    phrases = []
    for line in text.splitlines():
        line = _LIST_MARKER_RE.sub("", line).strip().strip('"').strip()
        if line:
            phrases.append(line)
    if not phrases:
        raise FormatError("response contained no feature lines")
    return phrases


def majority_vote(votes: Sequence[int | None]) -> int:
    """Most frequent parsed vote; ties go to the lowest option index."""
    counts = Counter(v for v in votes if v is not None)
    if not counts:
        raise LlmError("no parseable votes")
    best = max(counts.values())
    return min(v for v, c in counts.items() if c == best)


class ScriptedLlm:
    """Offline backend that answers through per-template callables.

    Each handler receives the template arguments and the sample index and
    returns the raw response text.
    """

    def __init__(self, handlers: Mapping[str, Callable[[Mapping[str, Any], int], str]]):
        self.handlers = dict(handlers)
        self.calls: Counter = Counter()
        self.prompts: list[tuple[str, str]] = []
        self._lock = threading.Lock()

    def complete(self, prompt, *, template, args, temperature, sample):
        with self._lock:
            self.calls[template] += 1
            self.prompts.append((template, prompt))
        handler = self.handlers.get(template)
        if handler is None:
            raise LlmError(f"scripted backend has no handler for template {template!r}")
        return handler(args, sample)


class OpenAIChatLlm:
    """Minimal chat-completions client for any OpenAI-compatible endpoint."""

    def __init__(
        self,
        model: str,
        base_url: str = "https://api.openai.com/v1",
        api_key: str | None = None,
        timeout: float = 60.0,
        min_interval: float = 0.2,
    ):
        import httpx

        self.model = model
        self.api_key = api_key or os.environ.get(API_KEY_ENV) or os.environ.get("OPENAI_API_KEY")
        if not self.api_key:
            raise LlmError(f"no LLM credentials: set {API_KEY_ENV} or OPENAI_API_KEY")
        self.client = httpx.Client(base_url=base_url, timeout=timeout)
        self.min_interval = min_interval
        self._lock = threading.Lock()
        self._last = 0.0

    def complete(self, prompt, *, template, args, temperature, sample):
        with self._lock:
            wait = self._last + self.min_interval - time.monotonic()
            if wait > 0:
                time.sleep(wait)
            self._last = time.monotonic()
        resp = self.client.post(
            "/chat/completions",
            headers={"Authorization": f"Bearer {self.api_key}"},
            json={
                "model": self.model,
                "temperature": temperature,
                "messages": [{"role": "user", "content": prompt}],
            },
        )
        resp.raise_for_status()
        return resp.json()["choices"][0]["message"]["content"]


class ConceptLlm:
    """Template-aware client shared by the agent's actions and the evaluator.

    Responses are validated per template; invalid ones are retried with
    exponential backoff. Successful parses are cached by (template, args,
    sample, temperature), so repeated identical requests never hit the backend.
    """

    def __init__(
        self,
        backend: LlmBackend,
        *,
        generation_temperature: float = 0.7,
        judge_temperature: float = 0.0,
        attempts: int = 3,
        backoff: float = 0.5,
        votes: int = 3,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.backend = backend
        self.generation_temperature = generation_temperature
        self.judge_temperature = judge_temperature
        self.attempts = attempts
        self.backoff = backoff
        self.votes = votes
        self.sleep = sleep
        self.transcripts: list[LlmExchange] = []
        self.backend_calls = 0
        self._cache: dict[str, Any] = {}
        self._lock = threading.Lock()
        self._templates = {name: load_template(name) for name in TEMPLATE_IDS}

    def template(self, name: str) -> str:
        return self._templates[name]

    def _request(self, template: str, args: dict, prompt: str, parser, temperature: float, sample: int = 0):
        key = json.dumps([template, args, sample, temperature], sort_keys=True)
        with self._lock:
            if key in self._cache:
                return self._cache[key]
        raw = None
        for attempt in range(self.attempts):
            if attempt:
                self.sleep(self.backoff * 2 ** (attempt - 1))
            with self._lock:
                self.backend_calls += 1
            raw = self.backend.complete(prompt, template=template, args=args, temperature=temperature, sample=sample)
            try:
                parsed = parser(raw or "")
            except FormatError as exc:
                logger.warning("invalid %s response (attempt %d): %s", template, attempt + 1, exc)
                continue
            with self._lock:
                self._cache[key] = parsed
                self.transcripts.append(LlmExchange(template, args, prompt, raw, parsed, attempt))
            return parsed
        with self._lock:
            self.transcripts.append(LlmExchange(template, args, prompt, raw or "", None, self.attempts - 1))
        raise LlmError(f"{template}: no valid response after {self.attempts} attempts", last_response=raw)

    # -- rendering ---------------------------------------------------------

    def _with_exclusions(self, prompt: str, exclusions: Sequence[str]) -> str:
        if not exclusions:
            return prompt
        return prompt + fill(self._templates["exclusion_note"], {"exclusions": "\n".join(exclusions)})

    def render_generation(self, label: str, superclass: str | None, exclusions: Sequence[str] = ()) -> str:
        prompt = fill(
            self._templates["generate_label"],
            {"class name": label, "superclass": superclass or DEFAULT_SUPERCLASS},
        )
        return self._with_exclusions(prompt, exclusions)

    def render_confusable(self, labels: Sequence[str], exclusions: Sequence[str] = ()) -> str:
        names = '", "'.join(labels)
        prompt = fill(self._templates["generate_confusable"], {"class name list": names})
        return self._with_exclusions(prompt, exclusions)

    def render_verification(self, concept: str, label: str) -> str:
        return fill(self._templates["verify_fact"], {"concept": concept, "class name": label})

    # -- operations --------------------------------------------------------

    def _feature_parser(self, exclusions: Sequence[str]):
        banned = {normalize_text(e) for e in exclusions}

        def parse(text: str) -> list[str]:
            seen, out = set(), []
            for phrase in parse_feature_lines(text):
                key = normalize_text(phrase)
                if key in banned or key in seen:
                    continue
                seen.add(key)
                out.append(phrase)
            return out

        return parse

    def generate_concepts(self, label: str, superclass: str | None, exclusions: Sequence[str] = ()) -> list[str]:
        if not label:
            raise ValueError("label must be non-empty")
        args = {"label": label, "superclass": superclass or DEFAULT_SUPERCLASS, "exclusions": list(exclusions)}
        prompt = self.render_generation(label, superclass, exclusions)
        return self._request("generate_label", args, prompt, self._feature_parser(exclusions), self.generation_temperature)

    def generate_confusable(self, labels: Sequence[str], exclusions: Sequence[str] = ()) -> list[str]:
        if len(labels) < 2:
            raise ValueError("confusable generation needs at least two labels")
        args = {"labels": list(labels), "exclusions": list(exclusions)}
        prompt = self.render_confusable(labels, exclusions)
        return self._request(
            "generate_confusable", args, prompt, self._feature_parser(exclusions), self.generation_temperature
        )

    def verify_fact(self, concept: str, label: str) -> str:
        if not concept or not label:
            raise ValueError("concept and label must be non-empty")
        prompt = self.render_verification(concept, label)

        def parse(text: str) -> str:
            return VERDICT_BY_LETTER[LETTERS[parse_letter(text, 3)]]

        return self._request("verify_fact", {"concept": concept, "label": label}, prompt, parse, self.judge_temperature)

    def answer_mcq(self, template: str, args: Mapping[str, Any], prompt: str, n_options: int) -> tuple[int, list[int | None]]:
        """Majority vote over independent samples; returns (choice, per-sample votes)."""
        if not 2 <= n_options <= 5:
            raise ValueError(f"MCQs need 2-5 options, got {n_options}")
        votes: list[int | None] = []
        for sample in range(self.votes):
            try:
                votes.append(
                    self._request(
                        template, dict(args), prompt, lambda t: parse_letter(t, n_options), self.judge_temperature, sample
                    )
                )
            except LlmError:
                votes.append(None)
        if all(v is None for v in votes):
            raise LlmError(f"{template}: all {self.votes} samples unparseable")
        return majority_vote(votes), votes

    def save_transcripts(self, path: str | Path) -> None:
        with Path(path).open("w") as fh:
            for ex in self.transcripts:
                fh.write(json.dumps(ex.to_dict()) + "\n")
