"""Chat-completion and embedding access, with a scripted offline mock.

Every agent in the pipeline goes through :class:`LlmGateway`. The gateway
owns JSON parsing and retries; backends only move text.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import random
import re
import threading
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Mapping, Protocol

import numpy as np

logger = logging.getLogger(__name__)

EMBED_DIM = 256
DEFAULT_JSON_RETRIES = 3
DEFAULT_MAX_IN_FLIGHT = 8


class Role(str, Enum):
    OBSERVER = "observer"
    VERIFIER = "verifier"
    CRITIC = "critic"
    SYNTHESIZER = "synthesizer"
    GENERATOR = "generator"
    JUDGE = "judge"
    ANSWERER = "answerer"


class LlmError(RuntimeError):
    pass


class TransportError(LlmError):
    """Backend unreachable or returned a non-success status; safe to retry."""


class MalformedOutputError(LlmError):
    def __init__(self, message: str, last_text: str, attempt_count: int):
        self.last_text = last_text
        self.attempt_count = attempt_count
        super().__init__(f"{message} after {attempt_count} attempt(s); last output: {last_text[:200]!r}")


class FixtureMissError(LlmError):
    def __init__(self, digest: str, role: str):
        self.digest = digest
        super().__init__(f"no fixture for {role} request digest {digest}")


@dataclass(frozen=True)
class LlmRequest:
    role_tag: Role
    system_prompt: str
    user_payload: str
    temperature: float = 0.0
    seed: int = 0
    expects_json: bool = True

    def __post_init__(self):
        object.__setattr__(self, "role_tag", Role(self.role_tag))
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")

    @property
    def digest(self) -> str:
        return request_digest(self.role_tag, self.system_prompt, self.user_payload)


@dataclass(frozen=True)
class LlmResponse:
    text: str
    parsed: Any = None
    backend_id: str = ""
    attempt_count: int = 1


@dataclass(frozen=True)
class EmbeddingVector:
    values: np.ndarray

    def __post_init__(self):
        arr = np.array(self.values, dtype=float)
        if arr.ndim != 1 or arr.size == 0:
            raise ValueError("embedding must be a non-empty 1-d vector")
        if not np.all(np.isfinite(arr)):
            raise ValueError("embedding has non-finite entries")
        arr.setflags(write=False)
        object.__setattr__(self, "values", arr)

    @property
    def dim(self) -> int:
        return int(self.values.shape[0])

    def __array__(self, dtype=None, copy=None):
        return self.values if dtype is None else self.values.astype(dtype)


def request_digest(role_tag: Role | str, system_prompt: str, user_payload: str) -> str:
    """Stable hash of what the model sees. Temperature and seed are left out on purpose."""
    blob = json.dumps([Role(role_tag).value, system_prompt, user_payload], ensure_ascii=False)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


_FENCE = re.compile(r"^\s*```(?:json)?\s*\n(.*?)\n?```\s*$", re.DOTALL)


def parse_json_object(text: str) -> dict:
    """Parse a response that must be exactly one JSON object (a markdown fence is tolerated)."""
    m = _FENCE.match(text)
    body = m.group(1) if m else text
    value = json.loads(body)
    if not isinstance(value, dict):
        raise ValueError(f"expected a JSON object, got {type(value).__name__}")
    return value


_TOKEN = re.compile(r"[a-z0-9]+")


def tokenize(text: str) -> list[str]:
    return _TOKEN.findall(text.lower())


def hashed_token_embedding(text: str, dim: int = EMBED_DIM) -> np.ndarray:
    """L2-normalized bag of hashed tokens. Shared words raise cosine; disjoint buckets give 0."""
    tokens = tokenize(text)
    if not tokens:
        raise ValueError(f"text {text!r} has no tokens to embed")
    vec = np.zeros(dim)
    for tok in tokens:
        bucket = int.from_bytes(hashlib.blake2b(tok.encode(), digest_size=8).digest(), "big") % dim
        vec[bucket] += 1.0
    return vec / np.linalg.norm(vec)


class Backend(Protocol):
    backend_id: str

    def chat(self, req: LlmRequest) -> str: ...

    def embed(self, text: str) -> np.ndarray: ...


class MockBackend:
    """Replays fixture text by request digest.

    In strict mode an unknown digest raises :class:`FixtureMissError`; otherwise
    a canned reply is derived from ``fallback_seed`` and the digest alone, so
    it does not depend on call order or thread scheduling.
    """

    backend_id = "mock"

    def __init__(self, fixtures: Mapping[str, str] | None = None, fallback_seed: int = 0, strict: bool = False):
        self.fixtures = dict(fixtures or {})
        self.fallback_seed = fallback_seed
        self.strict = strict

    @classmethod
    def from_file(cls, path, **kwargs) -> "MockBackend":
        with open(path, encoding="utf-8") as fh:
            return cls(json.load(fh), **kwargs)

    def chat(self, req: LlmRequest) -> str:
        digest = req.digest
        if digest in self.fixtures:
            return self.fixtures[digest]
        if self.strict:
            raise FixtureMissError(digest, req.role_tag.value)
        rng = random.Random(f"{self.fallback_seed}:{digest}")
        return json.dumps(_canned_reply(req, rng), sort_keys=True)

    def embed(self, text: str) -> np.ndarray:
        return hashed_token_embedding(text)


def _canned_reply(req: LlmRequest, rng: random.Random) -> dict:
    try:
        payload = json.loads(req.user_payload)
    except ValueError:
        payload = {}
    conf = round(rng.random(), 3)
    role = req.role_tag
    if role is Role.OBSERVER:
        pairs = payload.get("pairs", []) if isinstance(payload, dict) else []
        return {"scores": [{"from": a, "to": b, "confidence": round(rng.random(), 3)} for a, b in pairs]}
    if role in (Role.VERIFIER, Role.CRITIC):
        return {"causal": conf >= 0.5, "confidence": conf, "rationale": "canned mock verdict"}
    if role is Role.SYNTHESIZER:
        return {"is_causal": conf >= 0.5, "confidence": conf, "rationale": "canned mock decision"}
    if role is Role.GENERATOR:
        return {"level1": [], "level2": [], "level3": []}
    if role is Role.ANSWERER:
        return {"answer": rng.choice(["yes", "no", "premise_invalid"]), "explanation": "canned mock answer"}
    if role is Role.JUDGE:
        return {"claims": [], "events": [], "category": "other"}
    return {"mock": True}


class HttpBackend:
    """OpenAI-compatible ``/chat/completions`` and ``/embeddings`` client.

    ``models`` maps role names (plus ``"embedding"``) to model identifiers;
    ``"default"`` covers roles without their own entry.
    """

    def __init__(self, base_url: str, models: Mapping[str, str], api_key: str | None = None, timeout: float = 120.0):
        import httpx

        key = api_key if api_key is not None else os.environ.get("LLM_API_KEY")
        if not key:
            raise LlmError("LLM_API_KEY is not set")
        self.base_url = base_url.rstrip("/")
        self.models = dict(models)
        self.backend_id = f"http:{self.base_url}"
        self._client = httpx.Client(timeout=timeout, headers={"Authorization": f"Bearer {key}"})
        self._httpx = httpx

    def _model(self, role: str) -> str:
        try:
            return self.models.get(role) or self.models["default"]
        except KeyError:
            raise LlmError(f"no model configured for role {role!r}") from None

    def _post(self, path: str, body: dict) -> dict:
        try:
            resp = self._client.post(f"{self.base_url}{path}", json=body)
        except self._httpx.HTTPError as exc:
            raise TransportError(str(exc)) from exc
        if resp.status_code >= 500 or resp.status_code == 429:
            raise TransportError(f"HTTP {resp.status_code} from {path}")
        if resp.status_code >= 400:
            raise LlmError(f"HTTP {resp.status_code} from {path}: {resp.text[:200]}")
        return resp.json()

    def chat(self, req: LlmRequest) -> str:
        body = {
            "model": self._model(req.role_tag.value),
            "messages": [
                {"role": "system", "content": req.system_prompt},
                {"role": "user", "content": req.user_payload},
            ],
            "temperature": req.temperature,
            "seed": req.seed,
        }
        if req.expects_json:
            body["response_format"] = {"type": "json_object"}
        data = self._post("/chat/completions", body)
        return data["choices"][0]["message"]["content"]

    def embed(self, text: str) -> np.ndarray:
        data = self._post("/embeddings", {"model": self._model("embedding"), "input": text})
        return np.asarray(data["data"][0]["embedding"], dtype=float)


@dataclass
class LlmGateway:
    """Uniform entry point for completions and embeddings.

    ``json_retries`` bounds attempts at getting a parseable object;
    ``transport_retries`` bounds attempts after :class:`TransportError`, with
    exponential backoff starting at ``backoff_s``.
    """

    backend: Backend
    json_retries: int = DEFAULT_JSON_RETRIES
    transport_retries: int = 3
    backoff_s: float = 0.5
    max_in_flight: int = DEFAULT_MAX_IN_FLIGHT
    sleep: Callable[[float], None] = time.sleep
    _slots: threading.BoundedSemaphore = field(init=False, repr=False)
    _dim: int | None = field(default=None, init=False, repr=False)

    def __post_init__(self):
        if self.json_retries < 1 or self.transport_retries < 1:
            raise ValueError("retry limits must be >= 1")
        if self.max_in_flight < 1:
            raise ValueError("max_in_flight must be >= 1")
        self._slots = threading.BoundedSemaphore(self.max_in_flight)

    def __deepcopy__(self, memo):
        # a gateway is a shared connection + in-flight cap; cloned estimators share it
        return self

    def _call(self, req: LlmRequest) -> str:
        delay = self.backoff_s
        for attempt in range(1, self.transport_retries + 1):
            try:
                with self._slots:
                    return self.backend.chat(req)
            except TransportError:
                if attempt == self.transport_retries:
                    raise
                logger.warning("transport error on %s call (attempt %d), retrying", req.role_tag.value, attempt)
                self.sleep(delay)
                delay *= 2
        raise AssertionError("unreachable")

    def complete(self, req: LlmRequest) -> LlmResponse:
        if not req.expects_json:
            return LlmResponse(self._call(req), None, self.backend.backend_id, 1)
        text = ""
        for attempt in range(1, self.json_retries + 1):
            text = self._call(req)
            try:
                parsed = parse_json_object(text)
            except ValueError:
                logger.warning("unparseable %s output (attempt %d/%d)", req.role_tag.value, attempt, self.json_retries)
                continue
            return LlmResponse(text, parsed, self.backend.backend_id, attempt)
        raise MalformedOutputError(f"{req.role_tag.value} output is not a JSON object", text, self.json_retries)

    def embed(self, text: str) -> EmbeddingVector:
        if not text or not text.strip():
            raise ValueError("cannot embed empty text")
        vec = EmbeddingVector(self.backend.embed(text))
        if self._dim is None:
            self._dim = vec.dim
        elif vec.dim != self._dim:
            raise LlmError(f"embedding dimension changed from {self._dim} to {vec.dim}")
        return vec

    def embed_array(self, text: str) -> np.ndarray:
        return self.embed(text).values


def cosine(a, b) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("cosine of a zero vector is undefined")
    return float(np.dot(a, b) / (na * nb))


class RecordingBackend:
    """Wraps a responder callable and keeps every digest -> text it produced.

    Used to author fixture files: run a pipeline once against a scripted
    responder, then dump :attr:`recorded` for strict replay.
    """

    backend_id = "recording"

    def __init__(self, responder: Callable[[LlmRequest], str | dict]):
        self.responder = responder
        self.recorded: dict[str, str] = {}
        self._lock = threading.Lock()

    def chat(self, req: LlmRequest) -> str:
        out = self.responder(req)
        text = out if isinstance(out, str) else json.dumps(out, ensure_ascii=False, sort_keys=True)
        with self._lock:
            self.recorded[req.digest] = text
        return text

    def embed(self, text: str) -> np.ndarray:
        return hashed_token_embedding(text)
