"""Pluggable generation backends.

Five contracts drive the evolutionary loop: random text generation, text
variation, text-to-image rendering, image encoding, and image captioning.
Two implementations ship here: a deterministic mock world where texts are
serialized latent vectors and rendering is a fixed orthogonal map (used for
desk-scale verification), and an HTTP client suite speaking the common
chat-completion / image-generation / embedding JSON conventions.
"""

from __future__ import annotations

import base64
import json
import logging
import os
import re
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from .dp_voting import EmbeddingSet
from .errors import BackendError, ConfigError
from .seeding import DOMAIN_MOCK_BACKEND, substream

logger = logging.getLogger(__name__)

ENV_API_KEY = "PTE_API_KEY"
ENV_API_BASE_URL = "PTE_API_BASE_URL"
ENV_IMAGE_BASE_URL = "PTE_IMAGE_BASE_URL"
ENV_EMBED_BASE_URL = "PTE_EMBED_BASE_URL"

TEXT_PREFIX = "v:"


@dataclass
class BackendSuite:
    """The callable contracts a run needs.

    ``variation_api(texts, n_per_text)`` returns children grouped
    parent-major: the variants of ``texts[i]`` occupy positions
    ``i*n_per_text .. (i+1)*n_per_text - 1``. ``encode_text`` defaults to
    rendering then encoding, which suffices wherever no dedicated text
    embedder exists.
    """

    random_api: Callable[[int], list[str]]
    variation_api: Callable[[Sequence[str], int], list[str]]
    text_to_image: Callable[[Sequence[str]], Any]
    encode_image: Callable[[Any], EmbeddingSet]
    caption: Callable[[Any], list[str]]
    encode_text: Callable[[Sequence[str]], EmbeddingSet] | None = None

    def __post_init__(self):
        if self.encode_text is None:
            self.encode_text = lambda texts: self.encode_image(self.text_to_image(texts))


# ---------------------------------------------------------------------------
# Mock vector world
# ---------------------------------------------------------------------------


def serialize_vector(theta: np.ndarray) -> str:
    """Canonical text form of a latent vector; parses back exactly."""
    return TEXT_PREFIX + ",".join(repr(float(x)) for x in theta)


def parse_vector(text: str, dim: int | None = None) -> np.ndarray:
    """Strict inverse of serialize_vector."""
    if not text.startswith(TEXT_PREFIX):
        raise ValueError(f"not a vector text (missing {TEXT_PREFIX!r} prefix): {text[:40]!r}")
    parts = text[len(TEXT_PREFIX) :].split(",")
    try:
        values = np.array([float(p) for p in parts], dtype=np.float64)
    except ValueError as exc:
        raise ValueError(f"unparseable vector text {text[:60]!r}: {exc}") from None
    if not np.isfinite(values).all():
        raise ValueError(f"vector text contains non-finite components: {text[:60]!r}")
    if dim is not None and values.shape[0] != dim:
        raise ValueError(f"expected {dim} components, got {values.shape[0]}")
    return values


@dataclass(frozen=True)
class MixtureComponent:
    mean: tuple[float, ...]
    std: float
    weight: float


@dataclass(frozen=True)
class MockWorldConfig:
    """Parameters of the deterministic stand-in world."""

    latent_dim: int
    variation_scale: float
    render_matrix_seed: int
    private_mixture: tuple[MixtureComponent, ...]

    def __post_init__(self):
        if self.latent_dim < 1:
            raise ValueError(f"latent_dim must be >= 1, got {self.latent_dim}")
        if not self.variation_scale > 0:
            raise ValueError(f"variation_scale must be positive, got {self.variation_scale}")
        if not self.private_mixture:
            raise ValueError("private_mixture must have at least one component")
        total = sum(c.weight for c in self.private_mixture)
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"mixture weights must sum to 1, got {total}")
        for c in self.private_mixture:
            if len(c.mean) != self.latent_dim:
                raise ValueError(
                    f"mixture mean has {len(c.mean)} components, expected {self.latent_dim}"
                )
            if not c.std >= 0:
                raise ValueError(f"mixture std must be nonnegative, got {c.std}")


def _orthogonal_matrix(dim: int, seed: int) -> np.ndarray:
    """A fixed orthogonal matrix from a seeded QR factorization."""
    rng = np.random.default_rng(seed)
    q, r = np.linalg.qr(rng.standard_normal((dim, dim)))
    return q * np.sign(np.diag(r))


class MockWorld:
    """Texts carry latent vectors; rendering is a fixed orthogonal map.

    random_api draws latents from Uniform[-1, 1]^m, variation_api adds
    Gaussian noise of scale ``variation_scale``, text_to_image applies the
    render matrix, encode_image is the identity on rendered vectors, and
    caption inverts rendering through the pseudo-inverse. Everything is
    deterministic given (seed, config).
    """

    def __init__(self, config: MockWorldConfig, seed: int, metric: str = "euclidean"):
        self.config = config
        self.metric = metric
        self._rng = substream(seed, DOMAIN_MOCK_BACKEND)
        self._render = _orthogonal_matrix(config.latent_dim, config.render_matrix_seed)
        self._unrender = np.linalg.pinv(self._render)

    # -- the five contracts -------------------------------------------------

    def random_api(self, n: int) -> list[str]:
        if n < 1:
            raise ValueError(f"n must be >= 1, got {n}")
        thetas = self._rng.uniform(-1.0, 1.0, size=(n, self.config.latent_dim))
        return [serialize_vector(t) for t in thetas]

    def variation_api(self, texts: Sequence[str], n_per_text: int) -> list[str]:
        if n_per_text < 1:
            raise ValueError(f"n_per_text must be >= 1, got {n_per_text}")
        thetas = np.stack([parse_vector(t, self.config.latent_dim) for t in texts])
        noise = self._rng.standard_normal((len(texts), n_per_text, self.config.latent_dim))
        children = thetas[:, None, :] + self.config.variation_scale * noise
        return [serialize_vector(children[i, k]) for i in range(len(texts)) for k in range(n_per_text)]

    def text_to_image(self, texts: Sequence[str]) -> np.ndarray:
        thetas = np.stack([parse_vector(t, self.config.latent_dim) for t in texts])
        return thetas @ self._render.T

    def encode_image(self, images) -> EmbeddingSet:
        return EmbeddingSet(vectors=np.asarray(images, dtype=np.float64), metric=self.metric)

    def caption(self, images) -> list[str]:
        thetas = np.asarray(images, dtype=np.float64) @ self._unrender.T
        return [serialize_vector(t) for t in thetas]

    # -- private-world helpers ----------------------------------------------

    def sample_private_latents(self, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        """Draw n latents from the configured Gaussian mixture, with labels."""
        comps = self.config.private_mixture
        weights = np.array([c.weight for c in comps])
        means = np.array([c.mean for c in comps])
        stds = np.array([c.std for c in comps])
        labels = rng.choice(len(comps), size=n, p=weights / weights.sum())
        noise = rng.standard_normal((n, self.config.latent_dim))
        latents = means[labels] + stds[labels, None] * noise
        return latents, labels

    def render_private(self, latents: np.ndarray) -> np.ndarray:
        return np.asarray(latents, dtype=np.float64) @ self._render.T

    def suite(self) -> BackendSuite:
        return BackendSuite(
            random_api=self.random_api,
            variation_api=self.variation_api,
            text_to_image=self.text_to_image,
            encode_image=self.encode_image,
            caption=self.caption,
        )


# ---------------------------------------------------------------------------
# HTTP suite
# ---------------------------------------------------------------------------

DEFAULT_RANDOM_TEMPLATE = (
    "Write {n} short, varied captions describing plausible photographs. "
    "Output exactly one caption per line with no numbering."
)
DEFAULT_VARIATION_TEMPLATE = (
    "Rewrite the following image caption {n} different ways, keeping the "
    "subject and composition but varying wording and details. Output one "
    "caption per line with no numbering.\n\nCaption: {caption}"
)
DEFAULT_CAPTION_INSTRUCTION = (
    "Describe this image in one concise caption focused on its visible content."
)

_ENUMERATION = re.compile(r"^\s*(?:[-*•]|\(?\d+[.)])\s*")


class TransportFailure(Exception):
    """One transport attempt failed (network error, timeout)."""


class MalformedResponseError(BackendError):
    """The endpoint answered but the body did not match the documented schema."""


@dataclass
class TransportResult:
    status: int
    body: str


class RequestsTransport:
    """Live HTTP POST via requests."""

    def post(self, url: str, payload: dict, headers: dict, timeout: float) -> TransportResult:
        import requests

        try:
            resp = requests.post(url, json=payload, headers=headers, timeout=timeout)
        except requests.RequestException as exc:
            raise TransportFailure(str(exc)) from exc
        return TransportResult(status=resp.status_code, body=resp.text)


def _request_key(url: str, payload: dict) -> str:
    return json.dumps({"url": url, "payload": payload}, sort_keys=True)


class RecordingTransport:
    """Wraps a live transport, appending every exchange to a JSONL transcript."""

    def __init__(self, inner, path: str | Path):
        self._inner = inner
        self._path = Path(path)
        self._lock = threading.Lock()

    def post(self, url: str, payload: dict, headers: dict, timeout: float) -> TransportResult:
        result = self._inner.post(url, payload, headers, timeout)
        entry = {
            "request": {"url": url, "payload": payload},
            "response": {"status": result.status, "body": result.body},
            "timestamp": datetime.now(timezone.utc).isoformat(),
        }
        with self._lock:
            with open(self._path, "a") as fh:
                fh.write(json.dumps(entry, sort_keys=True) + "\n")
        return result


class ReplayTransport:
    """Serves recorded responses keyed by request content; order-independent."""

    def __init__(self, path: str | Path):
        self._queues: dict[str, list[TransportResult]] = {}
        self._lock = threading.Lock()
        for line in Path(path).read_text().splitlines():
            if not line.strip():
                continue
            entry = json.loads(line)
            key = _request_key(entry["request"]["url"], entry["request"]["payload"])
            self._queues.setdefault(key, []).append(
                TransportResult(status=entry["response"]["status"], body=entry["response"]["body"])
            )

    def post(self, url: str, payload: dict, headers: dict, timeout: float) -> TransportResult:
        key = _request_key(url, payload)
        with self._lock:
            queue = self._queues.get(key)
            if not queue:
                raise TransportFailure(f"no recorded response for POST {url}")
            return queue.pop(0)


@dataclass
class HttpSuiteConfig:
    """Wiring for the HTTP backends; the API key comes from the environment only."""

    api_key: str
    chat_base_url: str
    image_base_url: str
    embed_base_url: str
    chat_model: str = "default-chat"
    caption_model: str = "default-vision"
    image_model: str = "default-image"
    embed_model: str = "default-embed"
    random_template: str = DEFAULT_RANDOM_TEMPLATE
    variation_template: str = DEFAULT_VARIATION_TEMPLATE
    caption_instruction: str = DEFAULT_CAPTION_INSTRUCTION
    max_inflight: int = 8
    timeout: float = 60.0
    retries: int = 3
    backoff: float = 0.5
    metric: str = "euclidean"

    @classmethod
    def from_env(cls, **overrides) -> "HttpSuiteConfig":
        api_key = os.environ.get(ENV_API_KEY)
        if not api_key:
            raise ConfigError(f"missing required environment variable {ENV_API_KEY}")
        base = os.environ.get(ENV_API_BASE_URL)
        if not base:
            raise ConfigError(f"missing required environment variable {ENV_API_BASE_URL}")
        image_base = os.environ.get(ENV_IMAGE_BASE_URL, base)
        embed_base = os.environ.get(ENV_EMBED_BASE_URL, base)
        return cls(
            api_key=api_key,
            chat_base_url=base.rstrip("/"),
            image_base_url=image_base.rstrip("/"),
            embed_base_url=embed_base.rstrip("/"),
            **overrides,
        )


def load_template(path: str | Path) -> str:
    return Path(path).read_text().strip()


def parse_caption_lines(content: str, expected: int) -> list[str]:
    """Split a completion into caption lines, stripping list markers."""
    lines = [_ENUMERATION.sub("", ln).strip() for ln in content.splitlines()]
    lines = [ln for ln in lines if ln]
    if len(lines) < expected:
        raise MalformedResponseError(
            f"expected {expected} captions, parsed {len(lines)}: {content[:200]!r}"
        )
    return lines[:expected]


class HttpBackendSuite:
    """Chat / image / embedding clients behind the five backend contracts."""

    def __init__(self, config: HttpSuiteConfig, transport=None):
        self.config = config
        self.transport = transport if transport is not None else RequestsTransport()

    # -- plumbing ------------------------------------------------------------

    def _post(self, url: str, payload: dict) -> str:
        headers = {"Authorization": f"Bearer {self.config.api_key}"}
        last = "no attempt made"
        for attempt in range(self.config.retries):
            if attempt:
                time.sleep(self.config.backoff * (2 ** (attempt - 1)))
            started = time.monotonic()
            try:
                result = self.transport.post(url, payload, headers, self.config.timeout)
            except TransportFailure as exc:
                last = str(exc)
                logger.warning("POST %s attempt %d failed: %s", url, attempt + 1, exc)
                continue
            elapsed_ms = (time.monotonic() - started) * 1e3
            logger.info("POST %s -> %d (%.1f ms)", url, result.status, elapsed_ms)
            if 200 <= result.status < 300:
                return result.body
            last = f"status {result.status}"
        raise BackendError(f"{url}: {last} after {self.config.retries} attempts")

    def _post_json(self, url: str, payload: dict) -> dict:
        body = self._post(url, payload)
        try:
            return json.loads(body)
        except json.JSONDecodeError as exc:
            raise MalformedResponseError(f"{url}: invalid JSON ({exc}): {body[:200]!r}") from None

    def _chat(self, messages: list[dict], model: str) -> str:
        url = f"{self.config.chat_base_url}/chat/completions"
        obj = self._post_json(url, {"model": model, "messages": messages})
        try:
            return obj["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError):
            raise MalformedResponseError(
                f"{url}: missing choices[0].message.content: {json.dumps(obj)[:200]!r}"
            ) from None

    def _map(self, fn, items):
        if not items:
            return []
        workers = min(self.config.max_inflight, len(items))
        if workers <= 1:
            return [fn(item) for item in items]
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, items))

    # -- the five contracts --------------------------------------------------

    def random_api(self, n: int) -> list[str]:
        prompt = self.config.random_template.format(n=n)
        content = self._chat([{"role": "user", "content": prompt}], self.config.chat_model)
        return parse_caption_lines(content, n)

    def variation_api(self, texts: Sequence[str], n_per_text: int) -> list[str]:
        def vary(text: str) -> list[str]:
            prompt = self.config.variation_template.format(caption=text, n=n_per_text)
            content = self._chat([{"role": "user", "content": prompt}], self.config.chat_model)
            return parse_caption_lines(content, n_per_text)

        grouped = self._map(vary, list(texts))
        return [child for group in grouped for child in group]

    def text_to_image(self, texts: Sequence[str]) -> list[bytes]:
        url = f"{self.config.image_base_url}/images/generations"

        def render(text: str) -> bytes:
            obj = self._post_json(url, {"model": self.config.image_model, "prompt": text, "n": 1})
            try:
                return base64.b64decode(obj["data"][0]["b64_json"])
            except (KeyError, IndexError, TypeError, ValueError):
                raise MalformedResponseError(
                    f"{url}: missing data[0].b64_json: {json.dumps(obj)[:200]!r}"
                ) from None

        return self._map(render, list(texts))

    def encode_image(self, images: Sequence[bytes]) -> EmbeddingSet:
        url = f"{self.config.embed_base_url}/embeddings"
        payload = {
            "model": self.config.embed_model,
            "input": [base64.b64encode(img).decode("ascii") for img in images],
        }
        obj = self._post_json(url, payload)
        try:
            vectors = np.array([row["embedding"] for row in obj["data"]], dtype=np.float64)
        except (KeyError, TypeError, ValueError):
            raise MalformedResponseError(
                f"{url}: missing data[*].embedding: {json.dumps(obj)[:200]!r}"
            ) from None
        if vectors.ndim != 2 or vectors.shape[0] != len(images):
            raise MalformedResponseError(
                f"{url}: expected {len(images)} embeddings, got shape {vectors.shape}"
            )
        return EmbeddingSet(vectors=vectors, metric=self.config.metric)

    def encode_text(self, texts: Sequence[str]) -> EmbeddingSet:
        url = f"{self.config.embed_base_url}/embeddings"
        obj = self._post_json(url, {"model": self.config.embed_model, "input": list(texts)})
        try:
            vectors = np.array([row["embedding"] for row in obj["data"]], dtype=np.float64)
        except (KeyError, TypeError, ValueError):
            raise MalformedResponseError(
                f"{url}: missing data[*].embedding: {json.dumps(obj)[:200]!r}"
            ) from None
        return EmbeddingSet(vectors=vectors, metric=self.config.metric)

    def caption(self, images: Sequence[bytes]) -> list[str]:
        def describe(image: bytes) -> str:
            data_url = "data:image/png;base64," + base64.b64encode(image).decode("ascii")
            messages = [
                {
                    "role": "user",
                    "content": [
                        {"type": "text", "text": self.config.caption_instruction},
                        {"type": "image_url", "image_url": {"url": data_url}},
                    ],
                }
            ]
            return self._chat(messages, self.config.caption_model).strip()

        return self._map(describe, list(images))

    def suite(self) -> BackendSuite:
        return BackendSuite(
            random_api=self.random_api,
            variation_api=self.variation_api,
            text_to_image=self.text_to_image,
            encode_image=self.encode_image,
            caption=self.caption,
            encode_text=self.encode_text,
        )
