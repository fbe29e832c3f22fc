"""Pretraining objectives and their optimizer.

Two losses are trained jointly with equal weight:

  * token loss: masked-language-model cross entropy over center sequences,
    conditioned on neighbor context because the encoder folds neighbor
    [CLS] states into every layer;
  * node loss: recovering a held-out linked partner by pairwise dot-product
    scores against in-batch negatives (softmax cross entropy with the
    positive at index 0).

``mnp_posterior_bruteforce`` is the slow exact posterior over a full
candidate set (product of pairwise exponentials), kept as an independent
oracle for the cheap in-batch loss.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .autodiff import (
    GradientError,
    Tape,
    Tensor,
    add,
    backward,
    cross_entropy_logits,
    gather_2d,
    matmul,
    reshape,
    take_rows,
    transpose,
)
from .graphformer import ModelParams, encode_batch
from .tokenizer import MASK, NUM_RESERVED, TokenSequence

MLM_IGNORE = -1
NEG_BLOCK = -1e30  # additive mask that zeroes a softmax column exactly


# ---------------------------------------------------------------------------
# masking
# ---------------------------------------------------------------------------


def mask_token_ids(
    ids: np.ndarray,
    flags: np.ndarray,
    ratio: float,
    rng: np.random.Generator,
    vocab_size: int,
) -> tuple[np.ndarray, np.ndarray]:
    """Mask one id row in place-free fashion; returns (masked ids, labels).

    Each maskable position (real token, never the leading [CLS] and never
    padding) is independently selected with probability ``ratio``. Selected
    positions become [MASK] with probability 0.8, a uniform random
    non-reserved vocab token with probability 0.1, and stay unchanged with
    probability 0.1. Labels carry the original id at selected positions and
    MLM_IGNORE elsewhere.
    """
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"mask ratio must be in (0, 1), got {ratio}")
    t = len(ids)
    maskable = flags.astype(bool).copy()
    maskable[0] = False
    select = (rng.random(t) < ratio) & maskable
    kind = rng.random(t)
    replacement = rng.integers(NUM_RESERVED, vocab_size, size=t)

    masked = ids.copy()
    labels = np.full(t, MLM_IGNORE, dtype=np.int32)
    labels[select] = ids[select]
    masked[select & (kind < 0.8)] = MASK
    swap = select & (kind >= 0.8) & (kind < 0.9)
    masked[swap] = replacement[swap]
    return masked, labels


def mask_tokens(
    seq: TokenSequence, ratio: float, rng_seed, vocab_size: int
) -> tuple[TokenSequence, np.ndarray]:
    """TokenSequence wrapper around :func:`mask_token_ids`."""
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    masked, labels = mask_token_ids(seq.ids, seq.flags, ratio, rng, vocab_size)
    return TokenSequence(ids=masked, flags=seq.flags.copy()), labels


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def mlm_logits(token_states: Tensor, params: ModelParams) -> Tensor:
    """Vocabulary logits for every token position: states @ embeddings^T + bias."""
    b, t, d = token_states.data.shape
    flat = reshape(token_states, (b * t, d))
    logits = matmul(flat, transpose(params["token_embedding"], (1, 0)))
    return add(logits, params["mlm_bias"])


def masked_position_logits(
    token_states: Tensor, mlm_labels: np.ndarray, params: ModelParams
) -> tuple[Tensor, np.ndarray]:
    """Vocabulary logits at masked positions only, plus their target ids.

    Projecting just the masked rows keeps the head cost proportional to the
    mask count instead of the full sequence length.
    """
    labels = mlm_labels.reshape(-1)
    idx = np.nonzero(labels != MLM_IGNORE)[0]
    b, t, d = token_states.data.shape
    picked = take_rows(reshape(token_states, (b * t, d)), idx)
    logits = matmul(picked, transpose(params["token_embedding"], (1, 0)))
    return add(logits, params["mlm_bias"]), labels[idx]


def nmlm_loss(token_states: Tensor, mlm_labels: np.ndarray, params: ModelParams) -> Tensor:
    """Mean cross entropy over masked positions only; 0 when nothing is masked."""
    logits, targets = masked_position_logits(token_states, mlm_labels, params)
    return cross_entropy_logits(logits, targets, ignore_index=MLM_IGNORE)


def _pair_columns(b: int, pairs: Sequence[tuple[int, int]]) -> tuple[np.ndarray, np.ndarray]:
    """Row/column index grids: for each pair (j, k) the score row is
    [S[j,k]] + [S[j,u] for u not in {j, k}], positive first."""
    rows = np.empty((len(pairs), b - 1), dtype=np.int64)
    cols = np.empty((len(pairs), b - 1), dtype=np.int64)
    for p, (j, k) in enumerate(pairs):
        if j == k:
            raise ValueError(f"positive pair ({j}, {k}) has identical indices")
        if not (0 <= j < b and 0 <= k < b):
            raise ValueError(f"positive pair ({j}, {k}) outside batch of size {b}")
        rows[p] = j
        cols[p, 0] = k
        cols[p, 1:] = [u for u in range(b) if u != j and u != k]
    return rows, cols


def mnp_loss(
    node_reps: Tensor,
    pairs: Sequence[tuple[int, int]],
    forbidden: Optional[Sequence[set[int]]] = None,
) -> Tensor:
    """In-batch contrastive loss over raw dot products (no temperature).

    For each positive pair (j, k), cross entropy of the score row
    [h_j.h_k ; h_j.h_u for other batch members u] with the positive at
    index 0, averaged over pairs. ``forbidden``, when given, lists per pair
    the batch indices to exclude from the negatives (false-negative
    filtering); the positive itself is never excluded.
    """
    b = node_reps.data.shape[0]
    if b < 2:
        raise ValueError(f"mnp_loss needs a batch of size >= 2, got {b}")
    if not pairs:
        raise ValueError("mnp_loss needs at least one positive pair")
    scores = matmul(node_reps, transpose(node_reps, (1, 0)))  # [B, B]
    rows, cols = _pair_columns(b, pairs)
    logits = gather_2d(scores, rows, cols)  # [P, B-1]
    if forbidden is not None:
        block = np.zeros(cols.shape, dtype=node_reps.dtype)
        for p, banned in enumerate(forbidden):
            if banned:
                hit = np.isin(cols[p, 1:], list(banned))
                block[p, 1:][hit] = NEG_BLOCK
        logits = add(logits, Tensor(block))
    targets = np.zeros(len(pairs), dtype=np.int64)
    return cross_entropy_logits(logits, targets)


def pair_ranks(scores: np.ndarray, pairs: Sequence[tuple[int, int]]) -> list[int]:
    """Rank of each positive among its in-batch candidates, ties broken by
    lower candidate index."""
    b = scores.shape[0]
    ranks = []
    for j, k in pairs:
        cand = [u for u in range(b) if u != j]
        s = scores[j, cand]
        pos = cand.index(k)
        better = (s > s[pos]).sum() + (s[:pos] == s[pos]).sum()
        ranks.append(int(better) + 1)
    return ranks


def inbatch_prec1(scores: np.ndarray, pairs: Sequence[tuple[int, int]]) -> float:
    if not pairs:
        return 0.0
    ranks = pair_ranks(scores, pairs)
    return float(np.mean([r == 1 for r in ranks]))


def mnp_posterior_bruteforce(
    net,
    node_reps: np.ndarray,
    masked_node: int,
    candidates: Sequence[int],
) -> np.ndarray:
    """Exact posterior over ``candidates`` for a held-out node, given its
    (frozen) neighbors: p(i) proportional to the literal product of
    exp(h_i . h_k) over neighbors k, normalized in float64. An empty
    neighbor set yields the uniform distribution.

    Dot products are assumed desk-scale; the product form will overflow for
    very large magnitudes.
    """
    reps = np.asarray(node_reps, dtype=np.float64)
    neighbor_ids = net.adjacency[masked_node]
    if len(neighbor_ids) == 0:
        return np.full(len(candidates), 1.0 / len(candidates))
    weights = np.ones(len(candidates), dtype=np.float64)
    for k in neighbor_ids:
        hk = reps[net.row_of[int(k)]]
        for i, cand in enumerate(candidates):
            weights[i] *= np.exp(float(reps[net.row_of[int(cand)]] @ hk))
    return weights / weights.sum()


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    """First/second moment buffers plus the shared step counter."""

    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def global_grad_norm(grads: dict[str, np.ndarray]) -> float:
    total = 0.0
    for g in grads.values():
        total += float(np.sum(np.asarray(g, dtype=np.float64) ** 2))
    return float(np.sqrt(total))


def adamw_update(
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    weight_decay: float = 0.0,
    step: Optional[int] = None,
    clip_norm: Optional[float] = 1.0,
) -> None:
    """Decoupled-weight-decay Adam with bias correction and global
    gradient-norm clipping applied before the update.

    Raises GradientError (and applies nothing) on any non-finite gradient.
    Params with a missing gradient are updated as if their gradient were
    zero, so moment decay and weight decay still apply uniformly.
    """
    full = {name: grads.get(name) for name in params}
    for name, g in full.items():
        if g is None:
            full[name] = np.zeros_like(params[name].data)
        elif not np.isfinite(g).all():
            raise GradientError(f"non-finite gradient for parameter {name}")

    scale = 1.0
    if clip_norm is not None:
        norm = global_grad_norm(full)
        if norm > clip_norm:
            scale = clip_norm / norm

    b1, b2 = betas
    t = state.step + 1 if step is None else step
    state.step = t
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    for name, p in params.items():
        g = full[name] * scale if scale != 1.0 else full[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * np.square(g)
        update = (m / bc1) / (np.sqrt(v / bc2) + eps)
        if weight_decay:
            update = update + weight_decay * p.data
        p.data -= np.asarray(lr, dtype=p.dtype) * update.astype(p.dtype, copy=False)


# ---------------------------------------------------------------------------
# one pretraining step
# ---------------------------------------------------------------------------


OBJECTIVES = ("joint", "nmlm-only", "mnp-only")


@dataclass
class PretrainStepOutput:
    nmlm_loss: float
    mnp_loss: float
    total: float
    masked_accuracy: float
    inbatch_prec1: float


def joint_step(
    batch,
    params: ModelParams,
    opt_state: AdamState,
    lr: float,
    objective: str = "joint",
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    weight_decay: float = 0.0,
    clip_norm: Optional[float] = 1.0,
    train_rng: Optional[np.random.Generator] = None,
    mnp_forbidden: Optional[Sequence[set[int]]] = None,
) -> PretrainStepOutput:
    """One forward, one backward on the summed loss, one optimizer update.

    ``objective`` selects the joint loss or one of the single-objective
    ablations. A batch with no positive pairs contributes only the token
    loss (its node loss is reported as 0).
    """
    if objective not in OBJECTIVES:
        raise ValueError(f"objective must be one of {OBJECTIVES}, got {objective!r}")
    want_nmlm = objective in ("joint", "nmlm-only")
    want_mnp = objective in ("joint", "mnp-only")

    nmlm_val = mnp_val = acc = prec1 = 0.0
    with Tape():
        token_states, node_reps, _ = encode_batch(batch, params, train_rng=train_rng)
        losses = []
        if want_nmlm:
            logits, targets = masked_position_logits(token_states, batch.mlm_labels, params)
            nmlm = cross_entropy_logits(logits, targets, ignore_index=MLM_IGNORE)
            losses.append(nmlm)
            nmlm_val = nmlm.item()
            acc = (float((logits.data.argmax(axis=1) == targets).mean())
                   if len(targets) else 0.0)
        if want_mnp and batch.pairs and batch.size >= 2:
            mnp = mnp_loss(node_reps, batch.pairs, forbidden=mnp_forbidden)
            losses.append(mnp)
            mnp_val = mnp.item()
            prec1 = inbatch_prec1(node_reps.data @ node_reps.data.T, batch.pairs)
        if losses:
            total = losses[0] if len(losses) == 1 else add(losses[0], losses[1])
            backward(total)

    if losses:
        grads = {name: t.grad for name, t in params.named().items() if t.grad is not None}
        adamw_update(
            params.named(), grads, opt_state, lr,
            betas=betas, eps=eps, weight_decay=weight_decay, clip_norm=clip_norm,
        )
        params.zero_grads()
    return PretrainStepOutput(
        nmlm_loss=nmlm_val,
        mnp_loss=mnp_val,
        total=nmlm_val + mnp_val,
        masked_accuracy=acc,
        inbatch_prec1=prec1,
    )
