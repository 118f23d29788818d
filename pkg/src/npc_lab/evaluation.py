"""Exact brute-force retrieval, Recall@k / MRR, and perplexity histogram export."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from npc_lab.encoder import encode_texts
from npc_lab.errors import ConfigurationError, ContractViolation

DEFAULT_KS = (1, 5, 20)
DEFAULT_DEPTH = 100


@dataclass
class RetrievalRun:
    """query_id -> ranked doc ids and their scores (best first)."""

    ranked: dict[str, list[str]]
    scores: dict[str, list[float]]


def rank_scores(scores, doc_ids, depth):
    """Top-``depth`` column indices per row; ties broken by ascending doc_id."""
    doc_rank = np.argsort(np.argsort(np.asarray(doc_ids, dtype=object), kind="stable"), kind="stable")
    out = []
    for row in np.atleast_2d(scores):
        order = np.lexsort((doc_rank, -row))
        out.append(order[:depth])
    return out


def retrieve(params, vocab, queries, collection, k=DEFAULT_DEPTH, similarity="cosine"):
    """Score every (query, document) pair and keep the exact top ``k``.

    ``queries`` maps query_id -> text.
    """
    if k > len(collection):
        raise ConfigurationError(f"k={k} exceeds collection size {len(collection)}")
    if k < 1:
        raise ConfigurationError("k must be >= 1")
    doc_ids = list(collection.keys())
    normalize = similarity == "cosine"
    d = encode_texts([collection[i] for i in doc_ids], vocab, params, normalize, side="doc")
    qids = list(queries.keys())
    q = encode_texts([queries[i] for i in qids], vocab, params, normalize, side="query")
    scores = q @ d.T
    ranked, kept = {}, {}
    for qid, row, order in zip(qids, scores, rank_scores(scores, doc_ids, k)):
        ranked[qid] = [doc_ids[j] for j in order]
        kept[qid] = [float(row[j]) for j in order]
    return RetrievalRun(ranked, kept)


def _gold_ranks(run, gold):
    ranks = []
    for qid, ranked in run.ranked.items():
        if qid not in gold:
            raise ContractViolation(f"query {qid!r} has no gold document")
        g = gold[qid]
        ranks.append(ranked.index(g) + 1 if g in ranked else None)
    return ranks


def recall_at_k(run, gold, k):
    ranks = _gold_ranks(run, gold)
    if not ranks:
        return 0.0
    return sum(1 for r in ranks if r is not None and r <= k) / len(ranks)


def mrr(run, gold):
    ranks = _gold_ranks(run, gold)
    if not ranks:
        return 0.0
    return sum(1.0 / r for r in ranks if r is not None) / len(ranks)


def metrics_report(run, gold, ks=DEFAULT_KS):
    report = {f"recall@{k}": recall_at_k(run, gold, k) for k in ks}
    report["mrr"] = mrr(run, gold)
    report["num_queries"] = len(run.ranked)
    return report


def evaluate_pairs(params, vocab, pairs, collection, similarity="cosine", ks=DEFAULT_KS, depth=DEFAULT_DEPTH):
    """Retrieval metrics for ``pairs`` whose annotated documents are the gold."""
    depth = min(depth, len(collection))
    queries = {p.query_id: p.query_text for p in pairs}
    gold = {p.query_id: p.doc_id for p in pairs}
    run = retrieve(params, vocab, queries, collection, depth, similarity)
    return metrics_report(run, gold, ks)


HISTOGRAM_HEADER = ("pair_id", "ppl", "truth_clean", "flag")


def export_ppl_histogram(records, flags, truth, path):
    """Write one CSV row per perplexity record.

    ``truth`` maps pair_id -> bool or None; ``flags`` is a FlagSet or None.
    Missing values are written as empty fields.
    """
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(HISTOGRAM_HEADER)
        for r in records:
            t = truth.get(r.pair_id) if truth else None
            f = flags.flags.get(r.pair_id) if flags is not None else None
            writer.writerow([r.pair_id, repr(float(r.ppl)), "" if t is None else int(t), "" if f is None else f])


def read_ppl_histogram(path):
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            rows.append(
                {
                    "pair_id": int(row["pair_id"]),
                    "ppl": float(row["ppl"]),
                    "truth_clean": None if row["truth_clean"] == "" else bool(int(row["truth_clean"])),
                    "flag": None if row["flag"] == "" else int(row["flag"]),
                }
            )
    return rows
