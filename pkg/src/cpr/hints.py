"""Relation-hint providers for retrieval.

Every provider is total: transport or parse failures are logged and
degrade to an empty hint set so retrieval always proceeds.
"""

from __future__ import annotations

import json
import logging
import os
import urllib.error
import urllib.request
from typing import Protocol

from .embed import tokenize

log = logging.getLogger(__name__)

MAX_CHAINS = 4

HINT_PROMPT = (
    "You are helping a Freebase-style KGQA system.\n"
    "Given a question, propose up to 4 likely relation chains (1 to {H} hops).\n"
    'Relations must be in dot-separated format like "common.topic.image".\n'
    "Output STRICT JSON ONLY in this exact format:\n"
    '{{"chains":[["relation1"],["relationA","relationB"]]}}\n'
    "Example of correct output:\n"
    '{{"chains":[["people.person.place_of_birth"], '
    '["location.location.contains","people.person.nationality"]]}}\n'
    "Question: {question}\n"
    "JSON:"
)

ENV_URL = "CPR_HINT_URL"
ENV_KEY = "CPR_HINT_API_KEY"
ENV_MODEL = "CPR_HINT_MODEL"


class HintParseError(ValueError):
    pass


class HintProvider(Protocol):
    def hints(self, question: str, max_hop: int) -> list[list[str]]: ...


def build_prompt(question: str, max_hop: int) -> str:
    return HINT_PROMPT.format(H=max_hop, question=question)


def parse_hint_json(text: str) -> list[list[str]]:
    """Parse ``{"chains": [[...], ...]}``; keeps the first four chains."""
    try:
        obj = json.loads(text.strip())
    except (json.JSONDecodeError, AttributeError) as exc:
        raise HintParseError(f"hint reply is not JSON: {exc}") from None
    if not isinstance(obj, dict) or not isinstance(obj.get("chains"), list):
        raise HintParseError('hint reply must be an object with a "chains" list')
    chains = obj["chains"]
    for ch in chains:
        if not isinstance(ch, list) or not all(isinstance(r, str) for r in ch):
            raise HintParseError("every chain must be a list of relation strings")
    if len(chains) > MAX_CHAINS:
        log.warning("hint reply has %d chains; keeping the first %d", len(chains), MAX_CHAINS)
        chains = chains[:MAX_CHAINS]
    return [list(ch) for ch in chains]


def flatten_chains(chains) -> frozenset[str]:
    return frozenset(r.strip() for ch in chains for r in ch if r.strip())


def generate_hints(provider: HintProvider | None, question: str, max_hop: int) -> frozenset[str]:
    if provider is None:
        return frozenset()
    try:
        return flatten_chains(provider.hints(question, max_hop))
    except Exception as exc:  # noqa: BLE001 - hints must never abort retrieval
        log.warning("hint provider failed (%s); continuing without hints", exc)
        return frozenset()


class NullHints:
    def hints(self, question, max_hop):
        return []


class StaticHints:
    """Fixed chains per question, e.g. read from a hint cache file."""

    def __init__(self, table: dict[str, list[list[str]]], default=()):
        self.table = table
        self.default = [list(c) for c in default]

    def hints(self, question, max_hop):
        return self.table.get(question, self.default)

    @classmethod
    def from_file(cls, path, key_to_question: dict[str, str] | None = None):
        """Load a JSON Lines cache of ``{"query_id", "chains"}`` records."""
        table = {}
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                if not line.strip():
                    continue
                rec = json.loads(line)
                key = rec["query_id"]
                if key_to_question is not None:
                    key = key_to_question.get(key, key)
                chains = rec.get("chains")
                if chains is None:
                    chains = [[r] for r in rec.get("hints", [])]
                table[key] = chains
        return cls(table)


class LexicalHints:
    """Offline stand-in for a language model.

    Proposes the relations whose label tokens overlap the question most,
    one single-relation chain each, up to four.
    """

    def __init__(self, relation_labels, limit: int = MAX_CHAINS, min_overlap: int = 2):
        self.labels = sorted(relation_labels)
        self._tokens = {lbl: set(tokenize(lbl)) for lbl in self.labels}
        self.limit = limit
        self.min_overlap = min_overlap

    def hints(self, question, max_hop):
        qtok = set(tokenize(question))
        scored = []
        for lbl in self.labels:
            k = len(self._tokens[lbl] & qtok)
            if k >= self.min_overlap:
                scored.append((-k, lbl))
        scored.sort()
        return [[lbl] for _, lbl in scored[: self.limit]]


class HttpHints:
    """OpenAI-compatible chat-completions client, temperature 0.

    Endpoint, key and model come from ``CPR_HINT_URL``, ``CPR_HINT_API_KEY``
    and ``CPR_HINT_MODEL`` unless given explicitly.
    """

    def __init__(self, base_url=None, api_key=None, model=None, timeout=30.0):
        self.base_url = (base_url or os.environ.get(ENV_URL, "")).rstrip("/")
        self.api_key = api_key if api_key is not None else os.environ.get(ENV_KEY, "")
        self.model = model or os.environ.get(ENV_MODEL, "default")
        self.timeout = timeout

    def request_body(self, question, max_hop) -> dict:
        return {
            "model": self.model,
            "temperature": 0,
            "messages": [{"role": "user", "content": build_prompt(question, max_hop)}],
            "chat_template_kwargs": {"enable_thinking": False},
        }

    def _post(self, body: dict) -> dict:
        if not self.base_url:
            raise RuntimeError(f"no hint endpoint configured (set {ENV_URL})")
        req = urllib.request.Request(
            self.base_url + "/chat/completions",
            data=json.dumps(body).encode(),
            headers={"Content-Type": "application/json",
                     **({"Authorization": f"Bearer {self.api_key}"} if self.api_key else {})},
        )
        with urllib.request.urlopen(req, timeout=self.timeout) as resp:
            return json.loads(resp.read().decode())

    def hints(self, question, max_hop):
        reply = self._post(self.request_body(question, max_hop))
        try:
            text = reply["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError):
            raise HintParseError("unexpected chat-completions response shape") from None
        return parse_hint_json(text)


def write_hint_cache(path, entries) -> None:
    """``entries`` is an iterable of ``(query_id, chains)``."""
    with open(path, "w", encoding="utf-8") as fh:
        for qid, chains in entries:
            fh.write(json.dumps({"query_id": qid, "chains": chains}, ensure_ascii=False) + "\n")
