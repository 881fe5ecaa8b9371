"""Next-token-distribution backends.

Three implementations of the same contract: a deterministic scripted table,
a character-level n-gram model with additive smoothing, and a client for a
remote logits endpoint. Decoding never looks inside a backend; it only
consumes the distribution over the next token.
"""

from __future__ import annotations

import json
import os
from abc import ABC, abstractmethod
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import requests

from . import kernels
from .errors import (
    BackendUnavailableError,
    ContextOverflowError,
    InvalidInputError,
    ProtocolViolationError,
)
from .vocab import TokenStream, Vocabulary

DEFAULT_CONTEXT_LIMIT = 2048
_SUM_TOLERANCE = 1e-9
_REMOTE_SUM_TOLERANCE = 1e-6

ENV_BACKEND_URL = "SELF_INFILL_BACKEND_URL"


@dataclass(frozen=True, eq=False)
class NextTokenDistribution:
    """Probability vector over the vocabulary; entries >= 0, sums to 1 (+-1e-9)."""

    probs: np.ndarray

    @classmethod
    def validated(cls, probs: np.ndarray | Sequence[float]) -> "NextTokenDistribution":
        arr = np.ascontiguousarray(probs, dtype=np.float64)
        if arr.ndim != 1 or arr.size == 0:
            raise InvalidInputError("distribution must be a non-empty 1-D vector")
        if np.any(arr < 0.0):
            raise InvalidInputError("distribution entries must be non-negative")
        total = float(arr.sum())
        if abs(total - 1.0) > _SUM_TOLERANCE:
            raise InvalidInputError(f"distribution sums to {total!r}, not 1 within {_SUM_TOLERANCE}")
        arr.flags.writeable = False
        return cls(probs=arr)

    @property
    def size(self) -> int:
        return int(self.probs.shape[0])


class Backend(ABC):
    """A map from a token context to a next-token distribution."""

    vocab: Vocabulary
    context_limit: int

    @abstractmethod
    def next_distribution(self, context: TokenStream) -> NextTokenDistribution:
        """Return the next-token distribution for the given context."""

    def _check_context(self, context: Sequence[int]) -> None:
        self.vocab.validate_ids(context)
        if len(context) > self.context_limit:
            raise ContextOverflowError(
                f"context of {len(context)} tokens exceeds limit {self.context_limit}"
            )


class TableBackend(Backend):
    """Scripted backend: exact-context entries, per-length entries, and a default.

    Lookup order is exact context, then context length, then the default
    row. Keying by length makes per-step scripts expressible while the
    backend stays a pure function of the context.
    """

    def __init__(
        self,
        vocab: Vocabulary,
        entries: Mapping[tuple[int, ...], Sequence[float]] | None = None,
        by_length: Mapping[int, Sequence[float]] | None = None,
        default: Sequence[float] | None = None,
        context_limit: int = DEFAULT_CONTEXT_LIMIT,
    ):
        self.vocab = vocab
        self.context_limit = context_limit
        self._entries = {
            tuple(ctx): self._row(vec) for ctx, vec in (entries or {}).items()
        }
        self._by_length = {int(n): self._row(vec) for n, vec in (by_length or {}).items()}
        self._default = self._row(default) if default is not None else None

    def _row(self, vec: Sequence[float]) -> NextTokenDistribution:
        dist = NextTokenDistribution.validated(vec)
        if dist.size != self.vocab.size:
            raise InvalidInputError(
                f"table row has {dist.size} entries for a vocabulary of {self.vocab.size}"
            )
        return dist

    def next_distribution(self, context: TokenStream) -> NextTokenDistribution:
        self._check_context(context)
        key = tuple(context)
        dist = self._entries.get(key)
        if dist is None:
            dist = self._by_length.get(len(key))
        if dist is None:
            dist = self._default
        if dist is None:
            raise InvalidInputError(f"no table entry for context of length {len(key)}")
        return dist


class NgramBackend(Backend):
    """Character-level n-gram model with additive (Laplace) smoothing.

    ``order`` is the n in n-gram: distributions condition on the last
    ``order - 1`` tokens. Sentinels never occur in training text, so their
    mass comes entirely from smoothing; with ``alpha == 0`` an unseen
    context degrades to the uniform distribution.
    """

    def __init__(
        self,
        vocab: Vocabulary,
        order: int,
        alpha: float,
        counts: dict[tuple[int, ...], np.ndarray],
        context_limit: int = DEFAULT_CONTEXT_LIMIT,
    ):
        self.vocab = vocab
        self.order = order
        self.alpha = alpha
        self.context_limit = context_limit
        self._counts = counts
        self._zeros = np.zeros(vocab.size, dtype=np.int64)
        self._zeros.flags.writeable = False

    def next_distribution(self, context: TokenStream) -> NextTokenDistribution:
        self._check_context(context)
        window = tuple(context[-(self.order - 1):]) if self.order > 1 else ()
        row = self._counts.get(window, self._zeros)
        probs = kernels.laplace_row(row, self.alpha, self.vocab.size)
        return NextTokenDistribution.validated(probs)


def train_ngram(
    corpus_text: str,
    order: int,
    alpha: float = 1.0,
    context_limit: int = DEFAULT_CONTEXT_LIMIT,
) -> NgramBackend:
    """Fit an NgramBackend on plain text; vocabulary is the corpus characters plus sentinels."""
    if not corpus_text:
        raise InvalidInputError("corpus must be non-empty")
    if order < 1:
        raise InvalidInputError(f"order must be >= 1, got {order}")
    if alpha < 0:
        raise InvalidInputError(f"alpha must be >= 0, got {alpha}")
    vocab = Vocabulary.char_vocab(corpus_text)
    ids = vocab.tokenize(corpus_text)
    counts: dict[tuple[int, ...], np.ndarray] = {}
    for i in range(order - 1, len(ids)):
        window = ids[i - order + 1 : i]
        row = counts.get(window)
        if row is None:
            row = np.zeros(vocab.size, dtype=np.int64)
            counts[window] = row
        row[ids[i]] += 1
    return NgramBackend(vocab, order, alpha, counts, context_limit)


def remote_query(
    endpoint: str,
    context: Sequence[int],
    timeout_ms: float,
    expected_size: int,
) -> NextTokenDistribution:
    """Issue one next-token request to a remote logits server.

    Wire protocol: POST {"tokens": [int, ...]} to <endpoint>/v1/next_token,
    answered by {"probs": [float, ...]} of vocabulary length. A response
    whose sum deviates from 1 by at most 1e-6 is renormalized; larger
    deviations, wrong lengths and negative entries are protocol violations.
    """
    url = endpoint.rstrip("/") + "/v1/next_token"
    try:
        resp = requests.post(url, json={"tokens": list(context)}, timeout=timeout_ms / 1000.0)
    except requests.RequestException as exc:
        raise BackendUnavailableError(f"request to {url} failed: {exc}") from exc
    if resp.status_code != 200:
        raise BackendUnavailableError(f"{url} answered with status {resp.status_code}")
    try:
        payload = resp.json()
        probs = payload["probs"]
    except (ValueError, KeyError, TypeError) as exc:
        raise BackendUnavailableError(f"malformed response from {url}: {exc}") from exc
    arr = np.asarray(probs, dtype=np.float64)
    if arr.ndim != 1 or arr.shape[0] != expected_size:
        raise ProtocolViolationError(
            f"expected {expected_size} probabilities, got shape {arr.shape}"
        )
    if np.any(arr < 0.0):
        raise ProtocolViolationError("response contains negative probabilities")
    total = float(arr.sum())
    if abs(total - 1.0) > _REMOTE_SUM_TOLERANCE:
        raise ProtocolViolationError(
            f"response sums to {total!r}, outside tolerance {_REMOTE_SUM_TOLERANCE}"
        )
    return NextTokenDistribution.validated(arr / total)


class RemoteBackend(Backend):
    """Client for a remote next-token endpoint.

    Unlike the table and n-gram backends, no determinism guarantee is made:
    the server may answer the same context differently across calls.
    """

    def __init__(
        self,
        vocab: Vocabulary,
        endpoint: str,
        timeout_ms: float = 5000.0,
        context_limit: int = DEFAULT_CONTEXT_LIMIT,
    ):
        if timeout_ms <= 0:
            raise InvalidInputError(f"timeout must be > 0, got {timeout_ms}")
        self.vocab = vocab
        self.endpoint = endpoint
        self.timeout_ms = timeout_ms
        self.context_limit = context_limit

    def next_distribution(self, context: TokenStream) -> NextTokenDistribution:
        self._check_context(context)
        return remote_query(self.endpoint, context, self.timeout_ms, self.vocab.size)


# -- descriptors and file loading ------------------------------------------

BACKEND_KINDS = ("table", "ngram", "remote")


@dataclass(frozen=True)
class BackendDescriptor:
    """Declarative backend selection: a kind plus kind-specific parameters."""

    kind: str
    parameters: Mapping[str, object]

    def __post_init__(self) -> None:
        if self.kind not in BACKEND_KINDS:
            raise InvalidInputError(f"unknown backend kind {self.kind!r}, expected one of {BACKEND_KINDS}")
        if self.kind == "ngram":
            order = self.parameters.get("order", 1)
            if not isinstance(order, int) or order < 1:
                raise InvalidInputError(f"ngram order must be a positive integer, got {order!r}")
        if self.kind == "remote":
            timeout = self.parameters.get("timeout_ms", 5000.0)
            if not isinstance(timeout, (int, float)) or timeout <= 0:
                raise InvalidInputError(f"remote timeout_ms must be > 0, got {timeout!r}")


def vocab_from_obj(obj: Mapping[str, object]) -> Vocabulary:
    return Vocabulary(tokens=tuple(obj["tokens"]), sentinels=dict(obj["sentinels"]))


def vocab_to_obj(vocab: Vocabulary) -> dict:
    return {"tokens": list(vocab.tokens), "sentinels": dict(vocab.sentinels)}


def load_table_backend(path: str | Path) -> TableBackend:
    """Load a scripted table from JSON: a vocab, context entries and optional defaults."""
    with open(path, encoding="utf-8") as fh:
        obj = json.load(fh)
    vocab = vocab_from_obj(obj["vocab"])
    entries = {tuple(e["context"]): e["probs"] for e in obj.get("entries", [])}
    by_length = {int(k): v for k, v in obj.get("by_length", {}).items()}
    return TableBackend(
        vocab,
        entries=entries,
        by_length=by_length,
        default=obj.get("default"),
        context_limit=obj.get("context_limit", DEFAULT_CONTEXT_LIMIT),
    )


def build_backend(descriptor: BackendDescriptor, base_dir: str | Path = ".") -> Backend:
    """Materialize a backend from its descriptor; file paths resolve against base_dir."""
    params = dict(descriptor.parameters)
    base = Path(base_dir)
    if descriptor.kind == "table":
        if "path" in params:
            return load_table_backend(base / str(params["path"]))
        vocab = vocab_from_obj(params["vocab"])
        return TableBackend(
            vocab,
            entries={tuple(e["context"]): e["probs"] for e in params.get("entries", [])},
            by_length={int(k): v for k, v in params.get("by_length", {}).items()},
            default=params.get("default"),
            context_limit=params.get("context_limit", DEFAULT_CONTEXT_LIMIT),
        )
    if descriptor.kind == "ngram":
        if "corpus_text" in params:
            corpus = str(params["corpus_text"])
        else:
            corpus = (base / str(params["corpus_path"])).read_text(encoding="utf-8")
        return train_ngram(
            corpus,
            order=int(params.get("order", 2)),
            alpha=float(params.get("alpha", 1.0)),
            context_limit=params.get("context_limit", DEFAULT_CONTEXT_LIMIT),
        )
    # remote
    url = params.get("url") or os.environ.get(ENV_BACKEND_URL)
    if not url:
        raise InvalidInputError(f"remote backend needs a url (or the {ENV_BACKEND_URL} env var)")
    if "vocab" in params:
        vocab = vocab_from_obj(params["vocab"])
    else:
        with open(base / str(params["vocab_path"]), encoding="utf-8") as fh:
            vocab = vocab_from_obj(json.load(fh))
    return RemoteBackend(
        vocab,
        endpoint=str(url),
        timeout_ms=float(params.get("timeout_ms", 5000.0)),
        context_limit=params.get("context_limit", DEFAULT_CONTEXT_LIMIT),
    )


def load_backend(path: str | Path) -> Backend:
    """Load a backend from a descriptor JSON file ({"kind": ..., ...parameters})."""
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        obj = json.load(fh)
    kind = obj.pop("kind")
    params = obj.pop("parameters", obj)
    return build_backend(BackendDescriptor(kind=kind, parameters=params), base_dir=path.parent)
