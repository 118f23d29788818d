"""Bag-of-embeddings dual encoder with hand-derived gradients.

Forward path for one text: mean of token embeddings, affine projection,
tanh, then optional L2 normalisation.  Queries and documents share one
tower unless ``EncoderParams.doc_tower`` is set.
"""

from __future__ import annotations

import hashlib
import json
import os
import re
import tempfile
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from npc_lab.errors import ContractViolation, DataParseError, NumericFailure
from npc_lab.numerics import SIMILARITY_KINDS, log_softmax_rows

UNK = "[unk]"
CHECKPOINT_FORMAT = "npc-lab-checkpoint"
CHECKPOINT_VERSION = 1

_TOKEN_RE = re.compile(r"\w+")


def split_words(text):
    return _TOKEN_RE.findall(text.lower())


@dataclass
class Vocabulary:
    tokens: list[str]
    index: dict[str, int] = field(init=False, repr=False, compare=False)
    _memo: dict[str, tuple[int, ...]] = field(init=False, repr=False, compare=False, default_factory=dict)

    def __post_init__(self):
        if not self.tokens or self.tokens[0] != UNK:
            raise ContractViolation("index 0 must be the unknown token")
        self.index = {tok: i for i, tok in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ContractViolation("duplicate tokens in vocabulary")

    @classmethod
    def build(cls, texts, min_freq=1):
        counts = Counter()
        for text in texts:
            counts.update(split_words(text))
        kept = sorted(t for t, c in counts.items() if c >= min_freq and t != UNK)
        return cls([UNK, *kept])

    def __len__(self):
        return len(self.tokens)


def tokenize(text, vocab):
    """Lowercased word ids; unknown words map to 0 and empty text to ``(0,)``."""
    ids = vocab._memo.get(text)
    if ids is None:
        ids = tuple(vocab.index.get(w, 0) for w in split_words(text)) or (0,)
        vocab._memo[text] = ids
    return ids


@dataclass
class EncoderParams:
    """Trainable arrays of one tower, plus an optional separate document tower.

    The same class doubles as the gradient accumulator: gradients are an
    ``EncoderParams`` of identical shapes.
    """

    embedding: np.ndarray  # V x h
    projection: np.ndarray  # h x h
    bias: np.ndarray  # h
    doc_tower: EncoderParams | None = None

    @property
    def hidden(self):
        return self.embedding.shape[1]

    @property
    def vocab_size(self):
        return self.embedding.shape[0]

    @property
    def shared(self):
        return self.doc_tower is None

    def query_side(self):
        return self

    def doc_side(self):
        return self if self.doc_tower is None else self.doc_tower

    def arrays(self):
        out = {"embedding": self.embedding, "projection": self.projection, "bias": self.bias}
        if self.doc_tower is not None:
            for name, arr in self.doc_tower.arrays().items():
                out[f"doc.{name}"] = arr
        return out

    @classmethod
    def from_arrays(cls, arrays):
        doc = None
        if "doc.embedding" in arrays:
            doc = cls(arrays["doc.embedding"], arrays["doc.projection"], arrays["doc.bias"])
        return cls(arrays["embedding"], arrays["projection"], arrays["bias"], doc)

    def map(self, fn):
        return EncoderParams.from_arrays({k: fn(v) for k, v in self.arrays().items()})

    def copy(self):
        return self.map(np.array)

    def zeros_like(self):
        return self.map(np.zeros_like)

    def validate(self):
        v, h = self.embedding.shape
        if self.projection.shape != (h, h) or self.bias.shape != (h,):
            raise ContractViolation("inconsistent parameter shapes")
        for name, arr in self.arrays().items():
            if not np.all(np.isfinite(arr)):
                raise NumericFailure(f"non-finite entries in {name}")
        if self.doc_tower is not None:
            if self.doc_tower.embedding.shape != (v, h):
                raise ContractViolation("document tower shape differs from query tower")
            self.doc_tower.validate()


def init_params(vocab_size, hidden=64, seed=0, shared=True, scale=0.1):
    rng = np.random.default_rng(seed)

    def tower():
        return EncoderParams(
            rng.uniform(-scale, scale, size=(vocab_size, hidden)),
            rng.uniform(-scale, scale, size=(hidden, hidden)),
            rng.uniform(-scale, scale, size=hidden),
        )

    params = tower()
    if not shared:
        params.doc_tower = tower()
    return params


@dataclass
class EmbeddingVector:
    values: np.ndarray
    normalized: bool


class _Cache:
    """Intermediate activations of a batched forward pass."""

    __slots__ = ("rows", "toks", "weights", "mean", "act", "norms", "out")


def _forward(tower, token_lists, normalize):
    n = len(token_lists)
    lengths = np.fromiter((len(t) for t in token_lists), dtype=np.int64, count=n)
    if n and lengths.min() < 1:
        raise ContractViolation("empty token sequence; tokenize() yields [0] for empty text")
    toks = np.fromiter((i for t in token_lists for i in t), dtype=np.int64, count=int(lengths.sum()))
    if toks.size and (toks.min() < 0 or toks.max() >= tower.vocab_size):
        raise ContractViolation(f"token index out of range [0, {tower.vocab_size})")
    rows = np.repeat(np.arange(n), lengths)
    weights = 1.0 / lengths[rows]

    c = _Cache()
    c.rows, c.toks, c.weights = rows, toks, weights
    mean = np.zeros((n, tower.hidden))
    np.add.at(mean, rows, tower.embedding[toks] * weights[:, None])
    c.mean = mean
    c.act = np.tanh(mean @ tower.projection.T + tower.bias)
    if normalize:
        norms = np.linalg.norm(c.act, axis=1)
        if np.any(norms == 0):
            raise NumericFailure("degenerate norm: encoded vector is exactly zero")
        c.norms = norms
        c.out = c.act / norms[:, None]
    else:
        c.norms = None
        c.out = c.act
    return c


def _backward(tower, cache, d_out, grads):
    """Accumulate d(loss)/d(tower) into ``grads`` given d(loss)/d(output)."""
    if cache.norms is not None:
        v = cache.out
        d_act = (d_out - v * np.sum(v * d_out, axis=1, keepdims=True)) / cache.norms[:, None]
    else:
        d_act = d_out
    d_z = d_act * (1.0 - cache.act**2)
    grads.projection += d_z.T @ cache.mean
    grads.bias += d_z.sum(axis=0)
    d_mean = d_z @ tower.projection
    np.add.at(grads.embedding, cache.toks, d_mean[cache.rows] * cache.weights[:, None])


def encode(tokens, params, normalize):
    """Encode one token sequence with the query-side tower."""
    return EmbeddingVector(encode_batch([tokens], params, normalize)[0], bool(normalize))


def encode_batch(token_lists, tower, normalize):
    """Encode many sequences with ``tower``; returns an ``(n, h)`` array."""
    return _forward(tower, token_lists, normalize).out


def encode_texts(texts, vocab, params, normalize, side="query"):
    tower = params.query_side() if side == "query" else params.doc_side()
    return encode_batch([tokenize(t, vocab) for t in texts], tower, normalize)


def similarity_matrix(queries, docs, kind):
    """Entry (i, j) is the similarity of query i to document j."""
    q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    d = np.atleast_2d(np.asarray(docs, dtype=np.float64))
    if q.shape[1] != d.shape[1]:
        raise ContractViolation("query and document dimensions differ")
    if kind == "inner_product":
        return q @ d.T
    if kind != "cosine":
        raise ContractViolation(f"unknown similarity kind {kind!r}")
    qn = np.linalg.norm(q, axis=1)
    dn = np.linalg.norm(d, axis=1)
    if np.any(qn == 0) or np.any(dn == 0):
        raise ContractViolation("cosine similarity of a zero vector")
    return np.clip((q / qn[:, None]) @ (d / dn[:, None]).T, -1.0, 1.0)


@dataclass
class LossBatch:
    """Token-level view of one training batch.

    ``doc_tokens`` is the pool of candidate documents shared by every query
    in the batch; ``positive_index[i]`` is the pool column holding query i's
    annotated positive.
    """

    pair_ids: list[int]
    query_tokens: list[list[int]]
    doc_tokens: list[list[int]]
    positive_index: np.ndarray

    def __post_init__(self):
        self.positive_index = np.asarray(self.positive_index, dtype=np.int64)
        if len(self.query_tokens) != len(self.positive_index):
            raise ContractViolation("one positive index per query required")
        if len(self.doc_tokens) < 2:
            raise ContractViolation("candidate pool needs at least 2 documents")


def batch_logits(batch, params, temperature, similarity):
    """Tempered score matrix ``tau * f(q_i, d_j)`` over the batch pool."""
    normalize = similarity == "cosine"
    q = _forward(params.query_side(), batch.query_tokens, normalize).out
    d = _forward(params.doc_side(), batch.doc_tokens, normalize).out
    return temperature * (q @ d.T)


def loss_and_gradients(
    batch,
    params,
    teacher_log_probs,
    flags,
    *,
    temperature,
    similarity="cosine",
    reverse_kl=False,
):
    """Mean over queries of ``flag * L_cont + L_cons`` and its exact gradient.

    ``teacher_log_probs`` (B x M) is a constant target; pass ``None`` when
    no teacher exists (warmup, baseline), in which case the consistency
    term is absent.  ``reverse_kl`` swaps the KL arguments to
    KL(teacher || student).
    """
    if similarity not in SIMILARITY_KINDS:
        raise ContractViolation(f"unknown similarity kind {similarity!r}")
    normalize = similarity == "cosine"
    qt, dt = params.query_side(), params.doc_side()
    qc = _forward(qt, batch.query_tokens, normalize)
    dc = _forward(dt, batch.doc_tokens, normalize)
    logits = temperature * (qc.out @ dc.out.T)
    b, m = logits.shape
    rows = np.arange(b)
    flags = np.asarray(flags, dtype=np.float64)
    if flags.shape != (b,):
        raise ContractViolation("one flag per query required")

    log_p = log_softmax_rows(logits)
    p = np.exp(log_p)
    per_query = -flags * log_p[rows, batch.positive_index]
    d_logits = p * flags[:, None]
    d_logits[rows, batch.positive_index] -= flags

    if teacher_log_probs is not None:
        log_t = np.asarray(teacher_log_probs, dtype=np.float64)
        if log_t.shape != (b, m):
            raise ContractViolation(f"teacher distribution shape {log_t.shape} != {(b, m)}")
        if reverse_kl:
            t = np.exp(log_t)
            per_query = per_query + np.sum(t * (log_t - log_p), axis=1)
            d_logits += p - t
        else:
            g = log_p - log_t
            per_query = per_query + np.sum(p * g, axis=1)
            d_logits += p * (g - np.sum(p * g, axis=1, keepdims=True))

    bad = ~np.isfinite(per_query)
    if np.any(bad):
        pid = batch.pair_ids[int(np.argmax(bad))]
        raise NumericFailure(f"non-finite loss for pair {pid}")
    loss = float(per_query.mean())

    d_sim = d_logits * (temperature / b)
    grads = params.zeros_like()
    _backward(qt, qc, d_sim @ dc.out, grads.query_side())
    _backward(dt, dc, d_sim.T @ qc.out, grads.doc_side())
    return loss, grads


# -- checkpoints -------------------------------------------------------------


def config_hash(config):
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def atomic_write_text(path, text):
    """Write via a temp file in the same directory, then rename over ``path``."""
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=".part")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def checkpoint_record(vocab, params, config, extra=None):
    record = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config_hash": config_hash(config),
        "config": config,
        "vocab": vocab.tokens,
        "params": {
            name: {"shape": list(arr.shape), "data": arr.ravel().tolist()}
            for name, arr in params.arrays().items()
        },
    }
    if extra:
        record.update(extra)
    return record


def save_checkpoint(path, vocab, params, config, extra=None):
    record = checkpoint_record(vocab, params, config, extra)
    atomic_write_text(path, json.dumps(record, sort_keys=True) + "\n")


def load_checkpoint(path):
    """Return ``(vocab, params, record)``; ``record`` holds config and extras."""
    with open(path, encoding="utf-8") as fh:
        try:
            record = json.load(fh)
        except json.JSONDecodeError as exc:
            raise DataParseError(f"{path}: not a JSON checkpoint ({exc})") from exc
    if record.get("format") != CHECKPOINT_FORMAT:
        raise DataParseError(f"{path}: not an npc-lab checkpoint")
    if record.get("version") != CHECKPOINT_VERSION:
        raise DataParseError(f"{path}: unsupported checkpoint version {record.get('version')}")
    arrays = {
        name: np.asarray(spec["data"], dtype=np.float64).reshape(spec["shape"])
        for name, spec in record["params"].items()
    }
    params = EncoderParams.from_arrays(arrays)
    params.validate()
    return Vocabulary(record["vocab"]), params, record
