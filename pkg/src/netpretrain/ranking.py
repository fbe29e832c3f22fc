"""Okapi BM25 lexical retrieval and the evaluation metrics.

Queries whose relevance set is empty are excluded from metric means; the
caller can read how many were skipped via :func:`count_empty_relevance`.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence


@dataclass
class RankingQuery:
    """One query of a ranking run: ordered candidates plus the relevance set."""

    query_id: int
    ranked: list[int]
    relevant: set[int]
    scores: list[float] | None = None


RankingRun = list  # list[RankingQuery]


def save_run(run: Sequence[RankingQuery], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for q in run:
            fh.write(json.dumps(
                {"query_id": q.query_id, "ranked": q.ranked, "relevant": sorted(q.relevant)},
                sort_keys=True,
            ) + "\n")


def load_run(path: str | Path) -> list[RankingQuery]:
    run = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            run.append(RankingQuery(
                query_id=int(obj["query_id"]),
                ranked=[int(x) for x in obj["ranked"]],
                relevant={int(x) for x in obj["relevant"]},
            ))
    return run


def count_empty_relevance(run: Sequence[RankingQuery]) -> int:
    return sum(1 for q in run if not q.relevant)


# ---------------------------------------------------------------------------
# BM25
# ---------------------------------------------------------------------------


@dataclass
class Bm25Index:
    """Inverted document-frequency table plus per-document term counts."""

    doc_ids: list[int]
    term_freqs: list[Counter] = field(repr=False)
    doc_lens: list[int] = field(repr=False)
    df: Counter = field(repr=False)
    avgdl: float = 0.0
    k1: float = 1.5
    b: float = 0.75

    @property
    def size(self) -> int:
        return len(self.doc_ids)

    def idf(self, term: str) -> float:
        n = self.df.get(term, 0)
        return math.log((self.size - n + 0.5) / (n + 0.5) + 1.0)


def build_bm25(docs: Sequence[tuple[int, Sequence[str]]], k1: float = 1.5, b: float = 0.75) -> Bm25Index:
    """Index tokenized documents given as (doc_id, tokens) pairs."""
    if not docs:
        raise ValueError("build_bm25: empty document collection")
    doc_ids = []
    term_freqs = []
    doc_lens = []
    df: Counter = Counter()
    for doc_id, tokens in docs:
        if len(tokens) == 0:
            raise ValueError(f"build_bm25: document {doc_id} has no tokens")
        tf = Counter(tokens)
        doc_ids.append(doc_id)
        term_freqs.append(tf)
        doc_lens.append(len(tokens))
        df.update(tf.keys())
    return Bm25Index(
        doc_ids=doc_ids,
        term_freqs=term_freqs,
        doc_lens=doc_lens,
        df=df,
        avgdl=sum(doc_lens) / len(doc_lens),
        k1=k1,
        b=b,
    )


def bm25_scores(index: Bm25Index, query: Sequence[str]) -> list[float]:
    scores = [0.0] * index.size
    idfs = {t: index.idf(t) for t in set(query)}
    for i, tf in enumerate(index.term_freqs):
        norm = index.k1 * (1.0 - index.b + index.b * index.doc_lens[i] / index.avgdl)
        s = 0.0
        for t in query:
            f = tf.get(t, 0)
            if f:
                s += idfs[t] * f * (index.k1 + 1.0) / (f + norm)
        scores[i] = s
    return scores


def bm25_rank(index: Bm25Index, query: Sequence[str], top_n: int) -> list[tuple[int, float]]:
    """Top ``top_n`` documents as (doc_id, score), best first, ties broken by
    lower doc id. Zero-score documents participate; an empty query returns
    an empty result."""
    if not query:
        return []
    scores = bm25_scores(index, query)
    order = sorted(range(index.size), key=lambda i: (-scores[i], index.doc_ids[i]))
    return [(index.doc_ids[i], scores[i]) for i in order[:top_n]]


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


def macro_micro_f1(predictions: Sequence[int], gold: Sequence[int], num_classes: int) -> tuple[float, float]:
    """Macro = unweighted mean of per-class F1 over the whole label space;
    micro = global-count F1 (accuracy for single-label prediction)."""
    if len(predictions) != len(gold):
        raise ValueError(f"length mismatch: {len(predictions)} predictions, {len(gold)} gold")
    tp = [0] * num_classes
    fp = [0] * num_classes
    fn = [0] * num_classes
    for p, g in zip(predictions, gold):
        if not (0 <= p < num_classes and 0 <= g < num_classes):
            raise ValueError(f"label out of range [0, {num_classes}): pred {p}, gold {g}")
        if p == g:
            tp[p] += 1
        else:
            fp[p] += 1
            fn[g] += 1
    per_class = []
    for c in range(num_classes):
        denom = 2 * tp[c] + fp[c] + fn[c]
        per_class.append(2 * tp[c] / denom if denom else 0.0)
    macro = sum(per_class) / num_classes
    total_tp = sum(tp)
    micro_denom = 2 * total_tp + sum(fp) + sum(fn)
    micro = 2 * total_tp / micro_denom if micro_denom else 0.0
    return macro, micro


def recall_at_k(run: Sequence[RankingQuery], k: int) -> float:
    """Mean over queries of |relevant in top-k| / |relevant|."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    vals = []
    for q in sorted(run, key=lambda q: q.query_id):
        if not q.relevant:
            continue
        hit = sum(1 for c in q.ranked[:k] if c in q.relevant)
        vals.append(hit / len(q.relevant))
    return float(sum(vals) / len(vals)) if vals else 0.0


def ndcg_at_k(run: Sequence[RankingQuery], k: int) -> float:
    """Binary-gain NDCG: DCG@k over ideal DCG given the query's relevant count."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    vals = []
    for q in sorted(run, key=lambda q: q.query_id):
        if not q.relevant:
            continue
        dcg = sum(
            1.0 / math.log2(i + 2)
            for i, c in enumerate(q.ranked[:k])
            if c in q.relevant
        )
        ideal = sum(1.0 / math.log2(i + 2) for i in range(min(k, len(q.relevant))))
        vals.append(dcg / ideal)
    return float(sum(vals) / len(vals)) if vals else 0.0


def prec1_mrr(run: Sequence[RankingQuery]) -> tuple[float, float]:
    """PREC@1 and MRR under the one-relevant-target protocol."""
    p1 = []
    rr = []
    for q in sorted(run, key=lambda q: q.query_id):
        if len(q.relevant) != 1:
            raise ValueError(f"query {q.query_id}: expected exactly one relevant target, got {len(q.relevant)}")
        target = next(iter(q.relevant))
        if target not in q.ranked:
            raise ValueError(f"query {q.query_id}: relevant target {target} absent from candidates")
        rank = q.ranked.index(target) + 1
        p1.append(1.0 if rank == 1 else 0.0)
        rr.append(1.0 / rank)
    if not p1:
        raise ValueError("prec1_mrr: empty run")
    return float(sum(p1) / len(p1)), float(sum(rr) / len(rr))
