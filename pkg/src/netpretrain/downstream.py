"""Finetuning pipelines: k-shot classification, dense retrieval, reranking,
and link prediction, all consuming the encoder's final [CLS] representation.

Nodes in the network are encoded with their sampled neighbors; label names
and any other out-of-network text are encoded with blank neighbor slots.
Every pipeline finetunes all encoder weights, validates on its headline
metric at a fixed interval, keeps the best snapshot (ties go to the earlier
step), and evaluates that snapshot on the test split. Evaluation is
exhaustive and exact (every candidate scored, no approximate search) and
internally sorts queries so reports do not depend on input order.

NETPRETRAIN_THREADS caps the worker count used to shard evaluation
encoding; the default is serial.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import netdata, ranking, tokenizer
from .autodiff import Tape, Tensor, add, backward, cross_entropy_logits, matmul, transpose
from .graphformer import ModelParams, encode_batch
from .netdata import EgoBatch, TextRichNetwork
from .objectives import AdamState, adamw_update, mnp_loss
from .tokenizer import TokenSequence, Vocab
from .trainer import linear_schedule

# rng stream tags (shared master seed per task run)
STREAM_SPLIT = 10
STREAM_HEAD = 11
STREAM_EPOCH = 12
STREAM_STEP = 13
STREAM_EVAL = 14

TASK_KINDS = ("classify", "retrieve", "rerank", "linkpred")


@dataclass
class TaskConfig:
    kind: str = "classify"
    shots: int = 8
    epochs: int = 100
    peak_lr: float = 1e-5
    warmup_frac: float = 0.1
    batch_size: int = 32
    eval_batch_size: int = 256
    eval_interval: int = 25
    seed: int = 7
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_norm: float = 1.0
    weight_decay: float = 0.0
    bm25_top_n: int = 100
    hard_negatives: int = 4

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ValueError(f"task kind must be one of {TASK_KINDS}, got {self.kind!r}")
        if self.shots <= 0:
            raise ValueError(f"shots must be positive, got {self.shots}")

    @classmethod
    def from_dict(cls, d: dict) -> "TaskConfig":
        return cls(**d)


def _eval_workers() -> int:
    raw = os.environ.get("NETPRETRAIN_THREADS", "")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


# ---------------------------------------------------------------------------
# encoding helpers
# ---------------------------------------------------------------------------


def _blank_batch(seqs: Sequence[TokenSequence], k: int) -> EgoBatch:
    """A batch with every neighbor slot invalid (the out-of-network path)."""
    b = len(seqs)
    t = len(seqs[0].ids)
    return EgoBatch(
        center_node_ids=np.arange(b, dtype=np.int64),
        center_ids=np.stack([s.ids for s in seqs]).astype(np.int32),
        center_flags=np.stack([s.flags for s in seqs]).astype(np.int8),
        neighbor_ids=np.full((b, k, t), tokenizer.PAD, dtype=np.int32),
        neighbor_flags=np.zeros((b, k, t), dtype=np.int8),
        validity=np.zeros((b, k), dtype=np.int8),
        mlm_labels=np.full((b, t), -1, dtype=np.int32),
    )


def encode_out_of_network(params: ModelParams, text: str, vocab: Vocab) -> np.ndarray:
    """Final-layer [CLS] of a single sequence encoded with zero valid
    neighbors; identical to encode_batch on a one-node all-invalid batch."""
    seq = tokenizer.encode(text, vocab, params.config.max_len)
    batch = _blank_batch([seq], params.config.neighbors)
    _, reps, _ = encode_batch(batch, params)
    return np.array(reps.data[0])


def encode_node_reps(
    params: ModelParams,
    net: TextRichNetwork,
    node_ids: Sequence[int],
    sample_seed,
    batch_size: int = 64,
) -> np.ndarray:
    """Inference-mode representations for in-network nodes (with sampled
    neighbors). Deterministic given the sampling seed."""
    chunks = [list(node_ids[i:i + batch_size]) for i in range(0, len(node_ids), batch_size)]

    def encode_chunk(args):
        idx, ids = args
        rng = np.random.default_rng((hash_seed(sample_seed), idx))
        batch = netdata.make_ego_batch(net, ids, params.config.neighbors, mlm=False, rng_seed=rng)
        _, reps, _ = encode_batch(batch, params)
        return idx, np.array(reps.data)

    workers = _eval_workers()
    results: dict[int, np.ndarray] = {}
    if workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            for idx, reps in pool.map(encode_chunk, enumerate(chunks)):
                results[idx] = reps
    else:
        for item in enumerate(chunks):
            idx, reps = encode_chunk(item)
            results[idx] = reps
    return np.concatenate([results[i] for i in range(len(chunks))], axis=0)


def encode_text_reps(params: ModelParams, seqs: Sequence[TokenSequence],
                     batch_size: int = 128) -> np.ndarray:
    """Blank-neighbor representations for out-of-network texts. A single
    invalid slot is used; invalid slots contribute exactly zero, so the
    result matches the configured neighbor count bit for bit."""
    out = []
    for i in range(0, len(seqs), batch_size):
        batch = _blank_batch(seqs[i:i + batch_size], k=1)
        _, reps, _ = encode_batch(batch, params)
        out.append(np.array(reps.data))
    return np.concatenate(out, axis=0)


def hash_seed(seed) -> int:
    if isinstance(seed, (int, np.integer)):
        return int(seed)
    return abs(hash(seed)) % (2**31)


# ---------------------------------------------------------------------------
# splits
# ---------------------------------------------------------------------------


def derive_classification_splits(labels: dict[int, int], shots: int, seed: int) -> dict[int, str]:
    """shots train + shots valid nodes per class, the rest test."""
    by_class: dict[int, list[int]] = {}
    for nid in sorted(labels):
        by_class.setdefault(labels[nid], []).append(nid)
    rng = np.random.default_rng((seed, STREAM_SPLIT))
    splits: dict[int, str] = {}
    for cls in sorted(by_class):
        nodes = by_class[cls]
        if len(nodes) < 2 * shots:
            raise ValueError(
                f"class {cls} has {len(nodes)} labeled nodes, needs {2 * shots} "
                f"for {shots}-shot train and validation"
            )
        order = rng.permutation(len(nodes))
        for rank, idx in enumerate(order):
            if rank < shots:
                splits[nodes[idx]] = "train"
            elif rank < 2 * shots:
                splits[nodes[idx]] = "valid"
            else:
                splits[nodes[idx]] = "test"
    return splits


def derive_query_splits(node_ids: Sequence[int], shots: int, seed: int) -> dict[int, str]:
    """shots train + shots valid query nodes in total, the rest test."""
    nodes = sorted(node_ids)
    if len(nodes) < 2 * shots + 1:
        raise ValueError(f"need more than {2 * shots} labeled nodes, got {len(nodes)}")
    rng = np.random.default_rng((seed, STREAM_SPLIT))
    order = rng.permutation(len(nodes))
    splits: dict[int, str] = {}
    for rank, idx in enumerate(order):
        splits[nodes[idx]] = "train" if rank < shots else "valid" if rank < 2 * shots else "test"
    return splits


def split_members(splits: dict[int, str], name: str) -> list[int]:
    return sorted(nid for nid, s in splits.items() if s == name)


# ---------------------------------------------------------------------------
# shared finetuning machinery
# ---------------------------------------------------------------------------


class _BestSnapshot:
    """Tracks the best validation metric; ties keep the earlier step."""

    def __init__(self):
        self.metric = -math.inf
        self.step = None
        self.params: Optional[ModelParams] = None
        self.extra: dict = {}

    def offer(self, metric: float, step: int, params: ModelParams, **extra) -> None:
        if metric > self.metric:
            self.metric = metric
            self.step = step
            self.params = params.copy()
            self.extra = {k: {n: np.array(t.data) for n, t in v.items()} if isinstance(v, dict) else v
                          for k, v in extra.items()}


def _opt_kwargs(cfg: TaskConfig) -> dict:
    return dict(
        betas=(cfg.adam_beta1, cfg.adam_beta2),
        eps=cfg.adam_eps,
        weight_decay=cfg.weight_decay,
        clip_norm=cfg.clip_norm,
    )


def _epoch_batches(items: list, batch_size: int, epochs: int, seed: int):
    """Yield (step, batch) over shuffled epochs."""
    step = 0
    for epoch in range(epochs):
        rng = np.random.default_rng((seed, STREAM_EPOCH, epoch))
        order = rng.permutation(len(items))
        for lo in range(0, len(items), batch_size):
            yield step, [items[i] for i in order[lo:lo + batch_size]]
            step += 1


def _total_steps(n_items: int, batch_size: int, epochs: int) -> int:
    return epochs * max(1, math.ceil(n_items / batch_size))


def base_report(task: str, cfg: TaskConfig, metrics: dict, checkpoint_step,
                config_digest: str = "") -> dict:
    return {
        "task": task,
        "metrics": metrics,
        "config_digest": config_digest,
        "checkpoint_step": checkpoint_step,
        "seed": cfg.seed,
    }


# ---------------------------------------------------------------------------
# classification
# ---------------------------------------------------------------------------


def finetune_classification(
    params: ModelParams,
    net: TextRichNetwork,
    cfg: TaskConfig,
    splits: Optional[dict[int, str]] = None,
) -> tuple[dict[str, Tensor], dict]:
    """Linear head over the node representation; encoder and head are
    finetuned jointly with cross entropy. Returns (head tensors, report)."""
    if net.labels is None:
        raise ValueError("classification needs a labeled network")
    labels = net.labels
    num_classes = max(labels.values()) + 1
    if splits is None:
        splits = derive_classification_splits(labels, cfg.shots, cfg.seed)
    train_ids = split_members(splits, "train")
    valid_ids = split_members(splits, "valid")
    test_ids = split_members(splits, "test")

    params = params.copy()
    d = params.config.hidden_dim
    head_rng = np.random.default_rng((cfg.seed, STREAM_HEAD))
    head = {
        "head_w": Tensor(head_rng.normal(0, 0.02, (d, num_classes)).astype(np.float32),
                         requires_grad=True),
        "head_b": Tensor(np.zeros(num_classes, dtype=np.float32), requires_grad=True),
    }
    trainable = {**params.named(), **head}
    state = AdamState()
    total = _total_steps(len(train_ids), cfg.batch_size, cfg.epochs)
    best = _BestSnapshot()

    def predict(snapshot_params, snapshot_head, ids):
        reps = encode_node_reps(snapshot_params, net, ids, (cfg.seed, STREAM_EVAL))
        logits = reps @ snapshot_head["head_w"].data + snapshot_head["head_b"].data
        return logits.argmax(axis=1)

    def validate(step):
        pred = predict(params, head, valid_ids)
        gold = [labels[n] for n in valid_ids]
        _, micro = ranking.macro_micro_f1(pred.tolist(), gold, num_classes)
        best.offer(micro, step, params, head={n: t for n, t in head.items()})

    for step, batch_ids in _epoch_batches(train_ids, cfg.batch_size, cfg.epochs, cfg.seed):
        step_rng = np.random.default_rng((cfg.seed, STREAM_STEP, step))
        batch = netdata.make_ego_batch(net, batch_ids, params.config.neighbors,
                                       mlm=False, rng_seed=step_rng)
        gold = np.array([labels[n] for n in batch_ids], dtype=np.int64)
        lr = linear_schedule(step, total, cfg.peak_lr, cfg.warmup_frac)
        with Tape():
            _, reps, _ = encode_batch(batch, params,
                                      train_rng=step_rng if params.config.dropout > 0 else None)
            logits = add(matmul(reps, head["head_w"]), head["head_b"])
            loss = cross_entropy_logits(logits, gold)
            backward(loss)
        grads = {n: t.grad for n, t in trainable.items() if t.grad is not None}
        adamw_update(trainable, grads, state, lr, **_opt_kwargs(cfg))
        for t in trainable.values():
            t.zero_grad()
        if (step + 1) % cfg.eval_interval == 0 or (step + 1) == total:
            validate(step + 1)

    best_head = {n: Tensor(a, requires_grad=True) for n, a in best.extra["head"].items()}
    pred = predict(best.params, best_head, test_ids)
    gold = [labels[n] for n in test_ids]
    macro, micro = ranking.macro_micro_f1(pred.tolist(), gold, num_classes)
    report = base_report("classify", cfg, {
        "macro_f1": macro,
        "micro_f1": micro,
        "valid_micro_f1": best.metric,
        "num_test": len(test_ids),
    }, best.step)
    return best_head, report


# ---------------------------------------------------------------------------
# label-space tasks (retrieval / reranking)
# ---------------------------------------------------------------------------


@dataclass
class LabelSpace:
    """Dense label-id -> name map with its encoded sequences and BM25 index."""

    names: dict[int, str]
    seqs: list[TokenSequence]
    tokens: list[list[str]]
    index: ranking.Bm25Index

    @property
    def ids(self) -> list[int]:
        return sorted(self.names)


def build_label_space(names: dict[int, str], vocab: Vocab, max_len: int) -> LabelSpace:
    ids = sorted(names)
    if ids != list(range(len(ids))):
        raise ValueError("label ids must be dense from 0")
    tokens = []
    seqs = []
    for lid in ids:
        toks = tokenizer.normalize(names[lid])
        if not toks:
            raise ValueError(f"label {lid} has empty text")
        tokens.append(toks)
        seqs.append(tokenizer.encode(names[lid], vocab, max_len))
    index = ranking.build_bm25([(lid, tokens[lid]) for lid in ids])
    return LabelSpace(names=names, seqs=seqs, tokens=tokens, index=index)


def node_tokens(net: TextRichNetwork, vocab: Vocab, nid: int) -> list[str]:
    row = net.row_of[nid]
    return [vocab.token(int(i)) for i in net.ids_matrix[row] if int(i) >= tokenizer.NUM_RESERVED]


def _hard_negatives(space: LabelSpace, query_tokens: list[str], positive: int, n: int) -> list[int]:
    ranked = ranking.bm25_rank(space.index, query_tokens, top_n=n + 1)
    return [lid for lid, _ in ranked if lid != positive][:n]


def _dual_encoder_train(
    params: ModelParams,
    net: TextRichNetwork,
    vocab: Vocab,
    space: LabelSpace,
    cfg: TaskConfig,
    splits: dict[int, str],
    validate_metric,
) -> _BestSnapshot:
    """Shared contrastive trainer for retrieval and reranking: per query one
    positive label, BM25 hard negatives, plus everything else in the batch
    as in-batch negatives."""
    labels = net.labels
    train_ids = split_members(splits, "train")
    hard = {
        q: _hard_negatives(space, node_tokens(net, vocab, q), labels[q], cfg.hard_negatives)
        for q in train_ids
    }
    state = AdamState()
    total = _total_steps(len(train_ids), cfg.batch_size, cfg.epochs)
    best = _BestSnapshot()

    for step, batch_ids in _epoch_batches(train_ids, cfg.batch_size, cfg.epochs, cfg.seed):
        step_rng = np.random.default_rng((cfg.seed, STREAM_STEP, step))
        cand: list[int] = []
        seen = set()
        for q in batch_ids:
            for lid in [labels[q]] + hard[q]:
                if lid not in seen:
                    seen.add(lid)
                    cand.append(lid)
        targets = np.array([cand.index(labels[q]) for q in batch_ids], dtype=np.int64)
        batch = netdata.make_ego_batch(net, batch_ids, params.config.neighbors,
                                       mlm=False, rng_seed=step_rng)
        label_batch = _blank_batch([space.seqs[lid] for lid in cand], k=1)
        lr = linear_schedule(step, total, cfg.peak_lr, cfg.warmup_frac)
        train_rng = step_rng if params.config.dropout > 0 else None
        with Tape():
            _, q_reps, _ = encode_batch(batch, params, train_rng=train_rng)
            _, l_reps, _ = encode_batch(label_batch, params, train_rng=train_rng)
            scores = matmul(q_reps, transpose(l_reps, (1, 0)))
            loss = cross_entropy_logits(scores, targets)
            backward(loss)
        grads = {n: t.grad for n, t in params.named().items() if t.grad is not None}
        adamw_update(params.named(), grads, state, lr, **_opt_kwargs(cfg))
        params.zero_grads()
        if (step + 1) % cfg.eval_interval == 0 or (step + 1) == total:
            best.offer(validate_metric(params), step + 1, params)
    return best


def _label_run(params: ModelParams, net: TextRichNetwork, space: LabelSpace,
               query_ids: list[int], cfg: TaskConfig,
               candidates: Optional[dict[int, list[int]]] = None) -> list[ranking.RankingQuery]:
    """Rank labels for each query by exact dot product; ``candidates``
    restricts the pool per query (reranking), otherwise all labels are
    ranked. Ties go to the lower label id."""
    labels = net.labels
    q_reps = encode_node_reps(params, net, query_ids, (cfg.seed, STREAM_EVAL))
    l_reps = encode_text_reps(params, space.seqs)
    run = []
    for qi, q in enumerate(query_ids):
        pool = candidates[q] if candidates is not None else space.ids
        if not pool:
            run.append(ranking.RankingQuery(query_id=q, ranked=[], relevant=set()))
            continue
        scores = q_reps[qi] @ l_reps[pool].T
        order = sorted(range(len(pool)), key=lambda i: (-scores[i], pool[i]))
        relevant = {labels[q]} if q in labels else set()
        run.append(ranking.RankingQuery(
            query_id=q,
            ranked=[pool[i] for i in order],
            relevant=relevant,
            scores=[float(scores[i]) for i in order],
        ))
    return run


def finetune_retrieval(
    params: ModelParams,
    net: TextRichNetwork,
    vocab: Vocab,
    cfg: TaskConfig,
    splits: Optional[dict[int, str]] = None,
) -> tuple[ModelParams, dict]:
    """DPR-style dual encoder over the fine label space; evaluation ranks
    every label exactly. Returns (finetuned encoder, report)."""
    if net.labels is None or net.label_names is None:
        raise ValueError("retrieval needs fine labels and label names")
    space = build_label_space(net.label_names, vocab, params.config.max_len)
    if splits is None:
        splits = derive_query_splits(sorted(net.labels), cfg.shots, cfg.seed)
    valid_ids = split_members(splits, "valid")
    test_ids = split_members(splits, "test")
    params = params.copy()

    def valid_metric(p):
        return ranking.recall_at_k(_label_run(p, net, space, valid_ids, cfg), 100)

    best = _dual_encoder_train(params, net, vocab, space, cfg, splits, valid_metric)
    run = _label_run(best.params, net, space, test_ids, cfg)
    report = base_report("retrieve", cfg, {
        "recall@50": ranking.recall_at_k(run, 50),
        "recall@100": ranking.recall_at_k(run, 100),
        "valid_recall@100": best.metric,
        "skipped_empty_relevance": ranking.count_empty_relevance(run),
        "num_test": len(test_ids),
        "num_labels": len(space.ids),
    }, best.step)
    return best.params, report


def _contains_subsequence(haystack: list[str], needle: list[str]) -> bool:
    if not needle or len(needle) > len(haystack):
        return False
    for i in range(len(haystack) - len(needle) + 1):
        if haystack[i:i + len(needle)] == needle:
            return True
    return False


def rerank_candidates(net: TextRichNetwork, vocab: Vocab, space: LabelSpace,
                      query_ids: list[int], top_n: int) -> dict[int, list[int]]:
    """Per query: BM25 top-N labels joined with exact name matches (label
    name appearing verbatim as a token subsequence of the node text)."""
    out = {}
    for q in query_ids:
        toks = node_tokens(net, vocab, q)
        pool = [lid for lid, _ in ranking.bm25_rank(space.index, toks, top_n)]
        seen = set(pool)
        for lid in space.ids:
            if lid not in seen and _contains_subsequence(toks, space.tokens[lid]):
                pool.append(lid)
                seen.add(lid)
        out[q] = pool
    return out


def finetune_rerank(
    params: ModelParams,
    net: TextRichNetwork,
    vocab: Vocab,
    cfg: TaskConfig,
    splits: Optional[dict[int, str]] = None,
) -> dict:
    """Dual-encoder finetuning, then reranking of each query's retrieved
    candidate list by dot product. Binary-relevance NDCG@5/10."""
    if net.labels is None or net.label_names is None:
        raise ValueError("reranking needs fine labels and label names")
    space = build_label_space(net.label_names, vocab, params.config.max_len)
    if splits is None:
        splits = derive_query_splits(sorted(net.labels), cfg.shots, cfg.seed)
    valid_ids = split_members(splits, "valid")
    test_ids = split_members(splits, "test")
    params = params.copy()
    valid_cands = rerank_candidates(net, vocab, space, valid_ids, cfg.bm25_top_n)

    def valid_metric(p):
        return ranking.ndcg_at_k(_label_run(p, net, space, valid_ids, cfg, valid_cands), 10)

    best = _dual_encoder_train(params, net, vocab, space, cfg, splits, valid_metric)
    test_cands = rerank_candidates(net, vocab, space, test_ids, cfg.bm25_top_n)
    run = _label_run(best.params, net, space, test_ids, cfg, test_cands)
    empty = sum(1 for q in run if not q.ranked)
    scored = [q for q in run if q.ranked]
    return base_report("rerank", cfg, {
        "ndcg@5": ranking.ndcg_at_k(scored, 5),
        "ndcg@10": ranking.ndcg_at_k(scored, 10),
        "valid_ndcg@10": best.metric,
        "skipped_empty_candidates": empty,
        "num_test": len(test_ids),
    }, best.step)


# ---------------------------------------------------------------------------
# link prediction
# ---------------------------------------------------------------------------


def split_pairs(pairs: list[tuple[int, int]], shots: int, seed: int
                ) -> tuple[list, list, list]:
    if len(pairs) < 2 * shots + 2:
        raise ValueError(f"need more than {2 * shots} pairs, got {len(pairs)}")
    rng = np.random.default_rng((seed, STREAM_SPLIT))
    order = rng.permutation(len(pairs))
    train = [pairs[i] for i in order[:shots]]
    valid = [pairs[i] for i in order[shots:2 * shots]]
    test = [pairs[i] for i in order[2 * shots:]]
    return train, valid, test


def _pair_run(params: ModelParams, net: TextRichNetwork, pairs: Sequence[tuple[int, int]],
              cfg: TaskConfig, batch_index: int) -> list[ranking.RankingQuery]:
    """In-batch evaluation: each query ranks all batch targets, ties broken
    by lower target position."""
    queries = [p[0] for p in pairs]
    targets = [p[1] for p in pairs]
    q_reps = encode_node_reps(params, net, queries, (cfg.seed, STREAM_EVAL, batch_index, 0))
    t_reps = encode_node_reps(params, net, targets, (cfg.seed, STREAM_EVAL, batch_index, 1))
    scores = q_reps @ t_reps.T
    run = []
    for i in range(len(pairs)):
        order = sorted(range(len(targets)), key=lambda j: (-scores[i, j], j))
        run.append(ranking.RankingQuery(query_id=batch_index * cfg.eval_batch_size + i,
                                        ranked=order, relevant={i}))
    return run


def finetune_linkpred(
    params: ModelParams,
    net: TextRichNetwork,
    task_pairs: list[tuple[int, int]],
    cfg: TaskConfig,
) -> dict:
    """Contrastive finetuning on a second edge type, evaluated in batches
    where each query must pick its true partner among the batch targets."""
    train_pairs, valid_pairs, test_pairs = split_pairs(task_pairs, cfg.shots, cfg.seed)
    if len(test_pairs) < 2:
        raise ValueError(f"link prediction test set needs >= 2 pairs, got {len(test_pairs)}")
    params = params.copy()
    state = AdamState()
    total = _total_steps(len(train_pairs), cfg.batch_size, cfg.epochs)
    best = _BestSnapshot()

    def valid_metric(p):
        _, mrr = ranking.prec1_mrr(_pair_run(p, net, valid_pairs, cfg, batch_index=0))
        return mrr

    for step, batch_pairs in _epoch_batches(train_pairs, cfg.batch_size, cfg.epochs, cfg.seed):
        if len(batch_pairs) < 2:
            continue
        step_rng = np.random.default_rng((cfg.seed, STREAM_STEP, step))
        n = len(batch_pairs)
        centers = [p[0] for p in batch_pairs] + [p[1] for p in batch_pairs]
        batch = netdata.make_ego_batch(net, centers, params.config.neighbors,
                                       mlm=False, rng_seed=step_rng)
        batch.pairs = [(i, n + i) for i in range(n)]
        lr = linear_schedule(step, total, cfg.peak_lr, cfg.warmup_frac)
        with Tape():
            _, reps, _ = encode_batch(batch, params,
                                      train_rng=step_rng if params.config.dropout > 0 else None)
            loss = mnp_loss(reps, batch.pairs)
            backward(loss)
        grads = {n_: t.grad for n_, t in params.named().items() if t.grad is not None}
        adamw_update(params.named(), grads, state, lr, **_opt_kwargs(cfg))
        params.zero_grads()
        if (step + 1) % cfg.eval_interval == 0 or (step + 1) == total:
            best.offer(valid_metric(params), step + 1, params)

    run: list[ranking.RankingQuery] = []
    for b, lo in enumerate(range(0, len(test_pairs), cfg.eval_batch_size)):
        chunk = test_pairs[lo:lo + cfg.eval_batch_size]
        if len(chunk) < 2:
            break
        run.extend(_pair_run(best.params, net, chunk, cfg, batch_index=b))
    prec1, mrr = ranking.prec1_mrr(run)
    return base_report("linkpred", cfg, {
        "prec@1": prec1,
        "mrr": mrr,
        "valid_mrr": best.metric,
        "num_test_pairs": len(run),
    }, best.step)
