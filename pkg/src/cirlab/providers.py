"""External model access: captioning, instruction generation and text embedding.

Each capability has a deterministic mock and an HTTP JSON client. All calls go
through :class:`Gateway`, which adds a content-addressed on-disk cache, retry
with bounded exponential backoff, and call accounting.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from cirlab.errors import (EmptyCompletion, ProviderError, ProviderMalformedResponse,
                           ProviderTimeout)

log = logging.getLogger(__name__)


@dataclass
class ProviderConfig:
    endpoint: str = ""
    model_name: str = "mock"
    timeout_seconds: float = 30.0
    max_retries: int = 3
    api_key_env_var: str = ""
    # JSON field the input goes into, and dotted path to the output in the response
    request_field: str = "input"
    response_path: str = "output"
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.timeout_seconds <= 0:
            raise ValueError("timeout_seconds must be positive")
        if not 0 <= self.max_retries <= 10:
            raise ValueError("max_retries must be within [0, 10]")


def content_hash(payload) -> str:
    if isinstance(payload, bytes):
        data = payload
    elif isinstance(payload, str):
        data = payload.encode("utf-8")
    else:
        data = json.dumps(payload, sort_keys=True).encode("utf-8")
    return hashlib.sha256(data).hexdigest()


class ResponseCache:
    """Directory of hash-named JSON files: ``<root>/<namespace>/<h[:2]>/<h>.json``."""

    def __init__(self, root):
        self.root = Path(root)
        self._lock = threading.Lock()

    def _path(self, namespace: str, key: str) -> Path:
        return self.root / namespace / key[:2] / f"{key}.json"

    def get(self, namespace: str, key: str):
        path = self._path(namespace, key)
        try:
            entry = json.loads(path.read_text(encoding="utf-8"))
        except (FileNotFoundError, json.JSONDecodeError):
            return None
        return entry["value"]

    def put(self, namespace: str, key: str, value) -> None:
        path = self._path(namespace, key)
        entry = {"key": key, "value": value, "created_at": time.time()}
        with self._lock:
            path.parent.mkdir(parents=True, exist_ok=True)
            tmp = path.with_name(f"{path.name}.{threading.get_ident()}.tmp")
            tmp.write_text(json.dumps(entry), encoding="utf-8")
            os.replace(tmp, path)


class MemoryCache(ResponseCache):
    def __init__(self):
        self._data: dict[tuple[str, str], Any] = {}
        self._lock = threading.Lock()

    def get(self, namespace, key):
        return self._data.get((namespace, key))

    def put(self, namespace, key, value):
        with self._lock:
            self._data[(namespace, key)] = value


# --- mock providers -------------------------------------------------------

_COLORS = ["red", "blue", "green", "white", "black", "yellow", "brown", "gray"]
_OBJECTS = ["dog", "cat", "car", "train", "bicycle", "horse", "boat", "bird", "bus", "clock"]
_SCENES = ["on a street", "in a park", "next to a forest", "on the beach", "in a kitchen",
           "under a bridge", "in the snow", "near a lake"]


def _hash_int(text: str) -> int:
    return int(hashlib.sha256(text.encode("utf-8")).hexdigest()[:16], 16)


class MockCaptioner:
    """``a <color> <object> <scene>`` picked by hashing the image id.

    Object and scene come from the id's group prefix (text before the last ``_``) and
    the color from the full id, so images of one planted group differ in one attribute.
    """

    def __call__(self, image_ref) -> str:
        key = image_ref.hex() if isinstance(image_ref, bytes) else str(image_ref)
        g = _hash_int(key.rsplit("_", 1)[0])
        h = _hash_int(key)
        return (f"a {_COLORS[h % len(_COLORS)]} {_OBJECTS[g % len(_OBJECTS)]} "
                f"{_SCENES[(g >> 16) % len(_SCENES)]}")


_PROMPT_CAPTIONS = re.compile(r"Source sentence: (.*)\nTarget sentence: (.*?)\n", re.S)


class MockInstructor:
    """Answers the instruction prompt with ``change <removed words> to <added words>``."""

    def __call__(self, prompt: str) -> str:
        m = _PROMPT_CAPTIONS.search(prompt)
        if m is None:
            return f"edit {_hash_int(prompt) % 1000}"
        src, tgt = m.group(1).split(), m.group(2).split()
        removed = [w for w in src if w not in tgt]
        added = [w for w in tgt if w not in src]
        if not removed and not added:
            return "keep it the same"
        return f"change {' '.join(removed) or 'it'} to {' '.join(added) or 'less'}"


class MockTextEmbedder:
    """Bag of words: the normalized sum of one seeded random vector per word.

    Texts sharing words get similar vectors, so caption arithmetic behaves roughly
    like it does with a real sentence encoder.
    """

    def __init__(self, dim: int = 64):
        self.dim = dim

    def _word(self, word: str) -> np.ndarray:
        return np.random.default_rng(_hash_int(word)).standard_normal(self.dim)

    def __call__(self, text: str) -> list[float]:
        words = text.lower().split() or [text]
        v = np.sum([self._word(w) for w in words], axis=0)
        return (v / np.linalg.norm(v)).tolist()


class TableTextEmbedder:
    """Embedder backed by a fixed text -> vector table (handy for planted experiments)."""

    def __init__(self, table: dict[str, Sequence[float]]):
        self.table = {k: [float(x) for x in v] for k, v in table.items()}

    def __call__(self, text: str) -> list[float]:
        try:
            return self.table[text]
        except KeyError:
            raise ProviderMalformedResponse(f"no vector for {text!r}") from None


# --- HTTP providers -------------------------------------------------------

class TransientError(Exception):
    """Raised by a transport for conditions worth retrying."""


def _dig(obj, path: str):
    for part in path.split("."):
        if isinstance(obj, list):
            obj = obj[int(part)]
        else:
            obj = obj[part]
    return obj


def requests_transport(url: str, payload: dict, headers: dict, timeout: float) -> Any:
    import requests

    try:
        resp = requests.post(url, json=payload, headers=headers, timeout=timeout)
    except (requests.Timeout, requests.ConnectionError) as exc:
        raise TransientError(str(exc)) from exc
    if resp.status_code >= 500 or resp.status_code == 429:
        raise TransientError(f"HTTP {resp.status_code}")
    resp.raise_for_status()
    return resp.json()


class HTTPProvider:
    """POSTs ``{"model": ..., <request_field>: input, **extra}`` and reads ``response_path``."""

    def __init__(self, config: ProviderConfig, transport: Callable = requests_transport):
        self.config = config
        self.transport = transport

    def _headers(self) -> dict:
        headers = {"Content-Type": "application/json"}
        if self.config.api_key_env_var:
            key = os.environ.get(self.config.api_key_env_var)
            if key:
                headers["Authorization"] = f"Bearer {key}"
        return headers

    def __call__(self, value):
        if isinstance(value, bytes):
            import base64
            value = base64.b64encode(value).decode("ascii")
        payload = {"model": self.config.model_name, self.config.request_field: value,
                   **self.config.extra}
        body = self.transport(self.config.endpoint, payload, self._headers(),
                              self.config.timeout_seconds)
        try:
            return _dig(body, self.config.response_path)
        except (KeyError, IndexError, TypeError, ValueError) as exc:
            raise ProviderMalformedResponse(
                f"response lacks {self.config.response_path!r}") from exc


# --- gateway --------------------------------------------------------------

def clean_instruction(text: str) -> str:
    """First non-empty paragraph, whitespace collapsed, surrounding quotes stripped."""
    paragraphs = [" ".join(p.split()) for p in re.split(r"\n\s*\n", str(text))]
    text = next((p for p in paragraphs if p.strip("\"'` ")), "")
    while len(text) >= 2 and text[0] == text[-1] and text[0] in "\"'`":
        text = text[1:-1].strip()
    return text.strip("\"'` ")


@dataclass
class CallStats:
    calls: int = 0
    hits: int = 0
    errors: int = 0


class Gateway:
    """Uniform cached, retrying access to the caption, instruction and embedding providers."""

    def __init__(self, captioner: Callable, instructor: Callable, embedder: Callable,
                 cache: ResponseCache | None = None, configs: dict | None = None,
                 sleep: Callable[[float], None] = time.sleep, backoff_base: float = 0.5,
                 backoff_max: float = 8.0, max_workers: int = 4):
        self.providers = {"caption": captioner, "instruction": instructor, "embedding": embedder}
        self.configs = {k: ProviderConfig() for k in self.providers}
        self.configs.update(configs or {})
        self.cache = cache if cache is not None else MemoryCache()
        self.sleep = sleep
        self.backoff_base = backoff_base
        self.backoff_max = backoff_max
        self.max_workers = max_workers
        self.stats = {k: CallStats() for k in self.providers}
        self._stats_lock = threading.Lock()

    @classmethod
    def mock(cls, cache: ResponseCache | None = None, embed_dim: int = 64, **kwargs) -> "Gateway":
        return cls(MockCaptioner(), MockInstructor(), MockTextEmbedder(embed_dim), cache=cache,
                   **kwargs)

    @property
    def provider_calls(self) -> int:
        return sum(s.calls for s in self.stats.values())

    def backoff(self, attempt: int) -> float:
        return min(self.backoff_base * (2 ** attempt), self.backoff_max)

    def _bump(self, kind: str, attr: str) -> None:
        with self._stats_lock:
            setattr(self.stats[kind], attr, getattr(self.stats[kind], attr) + 1)

    def _call(self, kind: str, payload, validate: Callable):
        cfg = self.configs[kind]
        namespace = f"{kind}-{re.sub(r'[^A-Za-z0-9_.-]', '_', cfg.model_name)}"
        key = content_hash(payload)
        cached = self.cache.get(namespace, key)
        if cached is not None:
            self._bump(kind, "hits")
            return cached
        last: Exception | None = None
        for attempt in range(cfg.max_retries + 1):
            if attempt:
                self.sleep(self.backoff(attempt - 1))
            self._bump(kind, "calls")
            try:
                value = validate(self.providers[kind](payload))
            except (TransientError, TimeoutError, ConnectionError) as exc:
                last = ProviderTimeout(f"{kind}: {exc}")
            except EmptyCompletion:
                self._bump(kind, "errors")
                raise
            except ProviderError as exc:
                last = exc
            else:
                self.cache.put(namespace, key, value)
                return value
        self._bump(kind, "errors")
        log.warning("%s failed after %d attempts: %s", kind, cfg.max_retries + 1, last)
        raise last

    def caption_image(self, image_ref) -> str:
        def check(out):
            if not isinstance(out, str) or not out.strip():
                raise ProviderMalformedResponse("caption must be a non-empty string")
            return out.strip()
        return self._call("caption", image_ref, check)

    def generate_instruction(self, prompt: str) -> str:
        if not prompt:
            raise ValueError("prompt must be non-empty")

        def check(out):
            if not isinstance(out, str):
                raise ProviderMalformedResponse("instruction must be a string")
            text = clean_instruction(out)
            if not text:
                raise EmptyCompletion("provider returned a blank instruction")
            return text
        return self._call("instruction", prompt, check)

    def embed_text(self, text: str) -> np.ndarray:
        if not text:
            raise ValueError("text must be non-empty")

        def check(out):
            try:
                vec = [float(x) for x in out]
            except (TypeError, ValueError) as exc:
                raise ProviderMalformedResponse("embedding must be a list of numbers") from exc
            if not vec or not all(np.isfinite(vec)):
                raise ProviderMalformedResponse("embedding is empty or non-finite")
            return vec
        return np.asarray(self._call("embedding", text, check), dtype=np.float64)

    def map(self, fn: Callable, items: Sequence) -> list:
        """Apply ``fn`` with bounded concurrency; results keep input order.

        Each slot holds either the value or the :class:`ProviderError` raised for that item.
        """
        def guarded(item):
            try:
                return fn(item)
            except ProviderError as exc:
                return exc
        if self.max_workers <= 1 or len(items) <= 1:
            return [guarded(it) for it in items]
        with ThreadPoolExecutor(self.max_workers) as pool:
            return list(pool.map(guarded, items))
