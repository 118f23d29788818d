"""Training pairs, JSONL I/O, synthetic topic corpora and mismatched-pair noise."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace

import numpy as np

from npc_lab.encoder import atomic_write_text
from npc_lab.errors import (
    ConfigurationError,
    ContractViolation,
    DataParseError,
    InjectionError,
    IntegrityError,
)

# share of the synthetic vocabulary reserved for background words
BACKGROUND_SHARE = 0.2
# fraction of tokens in a synthetic text drawn from the background block
BACKGROUND_FRACTION = 0.2
# of the topical tokens, fraction drawn from the pair's private signature
SIGNATURE_FRACTION = 0.8
SIGNATURE_SIZE = 3


@dataclass(frozen=True)
class TrainingPair:
    pair_id: int
    query_id: str
    query_text: str
    doc_id: str
    doc_text: str
    truth_clean: bool | None = None
    # synthetic data only; used to keep injected replacements off-topic
    topic: int | None = None
    doc_topic: int | None = None


@dataclass(frozen=True)
class NoiseSpec:
    ratio: float
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.ratio <= 1.0:
            raise ConfigurationError(f"noise ratio must lie in [0, 1], got {self.ratio}")


class DocumentCollection(dict):
    """``doc_id -> doc_text``, iterated in insertion order."""

    def check_pairs(self, pairs):
        for pair in pairs:
            if pair.doc_id not in self:
                raise IntegrityError(f"pair {pair.pair_id} references unknown doc_id {pair.doc_id!r}")


# -- JSONL -------------------------------------------------------------------

_PAIR_FIELDS = ("query_id", "query", "doc_id", "doc")


def _read_jsonl(path):
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataParseError(f"invalid JSON ({exc.msg})", line=lineno) from None
            if not isinstance(record, dict):
                raise DataParseError("record is not an object", line=lineno)
            yield lineno, record


def parse_pair(record, pair_id, lineno=None):
    missing = [f for f in _PAIR_FIELDS if f not in record]
    if missing:
        raise DataParseError(f"missing field(s) {', '.join(missing)}", line=lineno)
    for f in _PAIR_FIELDS:
        if not isinstance(record[f], str):
            raise DataParseError(f"field {f} must be a string", line=lineno)
    truth = record.get("truth_clean")
    if truth is not None and not isinstance(truth, bool):
        raise DataParseError("truth_clean must be a boolean", line=lineno)
    return TrainingPair(
        pair_id=pair_id,
        query_id=record["query_id"],
        query_text=record["query"],
        doc_id=record["doc_id"],
        doc_text=record["doc"],
        truth_clean=truth,
        topic=record.get("topic"),
        doc_topic=record.get("doc_topic"),
    )


def load_collection(path):
    collection = DocumentCollection()
    for lineno, record in _read_jsonl(path):
        if not isinstance(record.get("doc_id"), str) or not isinstance(record.get("doc"), str):
            raise DataParseError("collection records need string doc_id and doc", line=lineno)
        if record["doc_id"] in collection:
            raise IntegrityError(f"line {lineno}: duplicate doc_id {record['doc_id']!r}")
        collection[record["doc_id"]] = record["doc"]
    return collection


def load_pairs(path, collection_path=None):
    """Read a pairs file; the collection is the pairs' own documents unless given.

    When no collection file is supplied, a pair's ``doc`` text becomes the
    collection entry for its ``doc_id`` (conflicting texts are an error).
    """
    pairs = []
    for lineno, record in _read_jsonl(path):
        pairs.append(parse_pair(record, len(pairs), lineno))
    seen = set()
    for pair in pairs:
        if pair.query_id in seen:
            raise IntegrityError(f"duplicate query_id {pair.query_id!r}")
        seen.add(pair.query_id)
    if collection_path is not None:
        collection = load_collection(collection_path)
        collection.check_pairs(pairs)
        return pairs, collection
    collection = DocumentCollection()
    for pair in pairs:
        if collection.setdefault(pair.doc_id, pair.doc_text) != pair.doc_text:
            raise IntegrityError(f"doc_id {pair.doc_id!r} has conflicting texts")
    return pairs, collection


def pair_record(pair):
    record = {"query_id": pair.query_id, "query": pair.query_text, "doc_id": pair.doc_id, "doc": pair.doc_text}
    if pair.truth_clean is not None:
        record["truth_clean"] = pair.truth_clean
    if pair.topic is not None:
        record["topic"] = pair.topic
        record["doc_topic"] = pair.doc_topic
    return record


def write_pairs(path, pairs):
    atomic_write_text(path, "".join(json.dumps(pair_record(p), sort_keys=True) + "\n" for p in pairs))


def write_collection(path, collection):
    lines = (json.dumps({"doc": text, "doc_id": doc_id}, sort_keys=True) + "\n" for doc_id, text in collection.items())
    atomic_write_text(path, "".join(lines))


# -- synthetic corpus --------------------------------------------------------


def topic_blocks(num_topics, vocab_size):
    """Token-id layout: ``num_topics`` disjoint topic blocks, then a background block.

    Blocks have even size; the first half holds query-side words and the
    second half the matching document-side words (id ``j`` pairs with
    ``j + half``).  The background block may be empty when the vocabulary
    is tight.
    """
    block = max(2, int(vocab_size * (1 - BACKGROUND_SHARE)) // num_topics)
    block -= block % 2
    topics = [range(t * block, (t + 1) * block) for t in range(num_topics)]
    return topics, range(num_topics * block, vocab_size)


def token_word(token_id):
    return f"w{token_id:05d}"


def generate_synthetic(num_topics, pairs_per_topic, vocab_size, tokens_per_text=16, seed=0):
    """Sample a topic-structured pair corpus.

    Each topic block is a set of concepts, every concept having one
    query-side and one document-side word.  A pair draws a small private
    signature of concepts; its query and its document each mix signature
    concepts, other concepts of the topic and background words, rendered
    with query-side and document-side words respectively.  Matching a query
    to its document therefore requires learning the concept alignment, and
    texts from different topics share only background words.
    """
    if num_topics < 1 or pairs_per_topic < 1 or tokens_per_text < 1:
        raise ConfigurationError("num_topics, pairs_per_topic and tokens_per_text must be >= 1")
    if vocab_size < 2 * num_topics:
        raise ConfigurationError(f"vocab_size must be >= 2*num_topics ({2 * num_topics}), got {vocab_size}")
    rng = np.random.default_rng(seed)
    topics, background = topic_blocks(num_topics, vocab_size)
    bg = np.asarray(background)

    def text(block, signature, side):
        start, half = block.start, len(block) // 2
        offset = start + side * half
        out = []
        for u in rng.random(tokens_per_text):
            if u < BACKGROUND_FRACTION and bg.size:
                out.append(int(rng.choice(bg)))
            elif u < BACKGROUND_FRACTION + (1 - BACKGROUND_FRACTION) * SIGNATURE_FRACTION:
                out.append(offset + int(rng.choice(signature)))
            else:
                out.append(offset + int(rng.integers(half)))
        return " ".join(token_word(i) for i in out)

    pairs = []
    collection = DocumentCollection()
    for t, block in enumerate(topics):
        half = len(block) // 2
        for _ in range(pairs_per_topic):
            n = len(pairs)
            signature = rng.choice(half, size=min(SIGNATURE_SIZE, half), replace=False)
            qid, did = f"q{n:06d}", f"d{n:06d}"
            query = text(block, signature, 0)
            doc = text(block, signature, 1)
            pairs.append(TrainingPair(n, qid, query, did, doc, True, t, t))
            collection[did] = doc
    return pairs, collection


def split_dev(pairs, fraction, seed=0):
    """Seeded random hold-out; returns ``(train, dev)`` with train pair_ids renumbered."""
    if not 0.0 <= fraction < 1.0:
        raise ConfigurationError("dev fraction must lie in [0, 1)")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(pairs))
    n_dev = int(math.floor(fraction * len(pairs)))
    dev_idx = set(order[:n_dev].tolist())
    train = [p for i, p in enumerate(pairs) if i not in dev_idx]
    dev = [p for i, p in enumerate(pairs) if i in dev_idx]
    train = [replace(p, pair_id=i) for i, p in enumerate(train)]
    dev = [replace(p, pair_id=i) for i, p in enumerate(dev)]
    return train, dev


# -- noise injection ----------------------------------------------------------


def inject_noise(pairs, spec):
    """Replace the positive of ``floor(ratio*N)`` seeded-random pairs with an unrelated document.

    Replacements are drawn (with replacement) from the other pairs' original
    documents; when topic labels exist, same-topic candidates are redrawn.
    """
    if not pairs:
        raise ContractViolation("cannot inject noise into an empty pair list")
    n = len(pairs)
    n_noisy = int(math.floor(spec.ratio * n))
    rng = np.random.default_rng(spec.seed)
    chosen = rng.choice(n, size=n_noisy, replace=False) if n_noisy else np.empty(0, dtype=np.int64)
    noisy = set(chosen.tolist())
    out = [replace(p, truth_clean=True) for p in pairs]
    for i in sorted(noisy):
        original = pairs[i]
        candidates = [
            j
            for j in range(n)
            if pairs[j].doc_id != original.doc_id
            and (original.topic is None or pairs[j].topic != original.topic)
        ]
        if not candidates:
            raise InjectionError(f"no unrelated replacement document for pair {original.pair_id}")
        j = candidates[int(rng.integers(len(candidates)))]
        donor = pairs[j]
        out[i] = replace(
            original,
            doc_id=donor.doc_id,
            doc_text=donor.doc_text,
            truth_clean=False,
            doc_topic=donor.topic,
        )
    return out


# -- batching ----------------------------------------------------------------


def epoch_rng(seed, epoch, stream=0):
    return np.random.default_rng([int(seed), int(epoch), int(stream)])


def batches(pairs, batch_size, seed, epoch, stream=0):
    """Shuffle with a (seed, epoch, stream)-keyed generator and cut into contiguous chunks.

    A trailing chunk of one pair is merged into the previous chunk.
    """
    if batch_size < 2:
        raise ConfigurationError(f"batch_size must be >= 2, got {batch_size}")
    order = epoch_rng(seed, epoch, stream).permutation(len(pairs))
    chunks = [order[i : i + batch_size] for i in range(0, len(order), batch_size)]
    if len(chunks) > 1 and len(chunks[-1]) < 2:
        tail = chunks.pop()
        chunks[-1] = np.concatenate([chunks[-1], tail])
    return [[pairs[k] for k in chunk] for chunk in chunks]
