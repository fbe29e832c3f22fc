"""Text-rich network ingestion, neighbor sampling, and ego-batch assembly.

File formats:
  nodes   : JSON Lines, one object per line: {"id": <non-negative int>, "text": <string>}
  edges   : UTF-8 text, one edge per line: "<src>\\t<dst>"
  labels  : "<node_id>\\t<label_id>" per line
  names   : "<label_id>\\t<name string>" per line
  splits  : "<node_id>\\t<train|valid|test>" per line
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import tokenizer
from .objectives import MLM_IGNORE, mask_token_ids
from .tokenizer import TokenSequence, Vocab

log = logging.getLogger(__name__)


def _rng(seed_or_rng) -> np.random.Generator:
    if isinstance(seed_or_rng, np.random.Generator):
        return seed_or_rng
    return np.random.default_rng(seed_or_rng)


@dataclass
class TextRichNetwork:
    """Nodes with encoded texts plus a symmetric, deduplicated adjacency.

    Immutable after load; batch construction never mutates it.
    """

    node_ids: list[int]
    row_of: dict[int, int] = field(repr=False)
    ids_matrix: np.ndarray = field(repr=False)    # [n, T] int32
    flags_matrix: np.ndarray = field(repr=False)  # [n, T] int8
    adjacency: dict[int, np.ndarray] = field(repr=False)
    vocab_size: int = 0
    max_len: int = 0
    self_loop_count: int = 0
    labels: Optional[dict[int, int]] = None
    label_names: Optional[dict[int, str]] = None

    @property
    def num_nodes(self) -> int:
        return len(self.node_ids)

    @property
    def num_edges(self) -> int:
        return sum(len(a) for a in self.adjacency.values()) // 2

    def neighbors(self, v: int) -> np.ndarray:
        return self.adjacency[v]

    def degree(self, v: int) -> int:
        return len(self.adjacency[v])

    def sequence(self, v: int) -> TokenSequence:
        row = self.row_of[v]
        return TokenSequence(ids=self.ids_matrix[row], flags=self.flags_matrix[row])


@dataclass
class EgoBatch:
    """One training batch: center sequences plus sampled neighbor sequences.

    Invalid neighbor slots are all-[PAD] with validity 0. ``mlm_labels``
    holds the original id at masked center positions and MLM_IGNORE
    elsewhere. ``pairs`` are (center-row, center-row) index pairs used as
    positives by the link-prediction objective.
    """

    center_node_ids: np.ndarray   # [B]
    center_ids: np.ndarray        # [B, T] int32
    center_flags: np.ndarray      # [B, T] int8
    neighbor_ids: np.ndarray      # [B, K, T] int32
    neighbor_flags: np.ndarray    # [B, K, T] int8
    validity: np.ndarray          # [B, K] int8
    mlm_labels: np.ndarray        # [B, T] int32
    pairs: list[tuple[int, int]] = field(default_factory=list)

    @property
    def size(self) -> int:
        return self.center_ids.shape[0]


def _parse_edge_line(line: str, lineno: int) -> tuple[int, int]:
    parts = line.split("\t")
    if len(parts) != 2:
        raise ValueError(f"edges line {lineno}: expected '<src>\\t<dst>', got {line!r}")
    try:
        return int(parts[0]), int(parts[1])
    except ValueError:
        raise ValueError(f"edges line {lineno}: non-integer node id in {line!r}") from None


def load_edge_pairs(path: str | Path, known_ids: Optional[set[int]] = None) -> list[tuple[int, int]]:
    """Read an edge file into unique undirected pairs (u < v), dropping
    self-loops. Unknown endpoints raise when ``known_ids`` is given."""
    pairs = set()
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            u, v = _parse_edge_line(line, lineno)
            if known_ids is not None and (u not in known_ids or v not in known_ids):
                bad = u if u not in known_ids else v
                raise ValueError(f"edges line {lineno}: unknown node id {bad}")
            if u == v:
                continue
            pairs.add((min(u, v), max(u, v)))
    return sorted(pairs)


def load_network(
    nodes_path: str | Path,
    edges_path: str | Path,
    vocab: Vocab,
    max_len: int,
    labels_path: str | Path | None = None,
    label_names_path: str | Path | None = None,
) -> TextRichNetwork:
    """Parse node and edge files; encode all texts; symmetrize adjacency."""
    node_ids: list[int] = []
    texts: list[str] = []
    seen: set[int] = set()
    with open(nodes_path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                nid = int(obj["id"])
                text = str(obj["text"])
            except (json.JSONDecodeError, KeyError, TypeError, ValueError):
                raise ValueError(f"nodes line {lineno}: malformed record {line!r}") from None
            if nid < 0:
                raise ValueError(f"nodes line {lineno}: negative node id {nid}")
            if nid in seen:
                raise ValueError(f"nodes line {lineno}: duplicate node id {nid}")
            seen.add(nid)
            node_ids.append(nid)
            texts.append(text)
    if not node_ids:
        raise ValueError(f"nodes file {nodes_path} contains no records")

    n = len(node_ids)
    ids_matrix = np.empty((n, max_len), dtype=np.int32)
    flags_matrix = np.empty((n, max_len), dtype=np.int8)
    for row, text in enumerate(texts):
        seq = tokenizer.encode(text, vocab, max_len)
        ids_matrix[row] = seq.ids
        flags_matrix[row] = seq.flags

    adjacency_sets: dict[int, set[int]] = {nid: set() for nid in node_ids}
    self_loops = 0
    with open(edges_path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            u, v = _parse_edge_line(line, lineno)
            for endpoint in (u, v):
                if endpoint not in adjacency_sets:
                    raise ValueError(f"edges line {lineno}: unknown node id {endpoint}")
            if u == v:
                self_loops += 1
                continue
            adjacency_sets[u].add(v)
            adjacency_sets[v].add(u)
    if self_loops:
        log.warning("dropped %d self-loop edge line(s)", self_loops)

    net = TextRichNetwork(
        node_ids=node_ids,
        row_of={nid: row for row, nid in enumerate(node_ids)},
        ids_matrix=ids_matrix,
        flags_matrix=flags_matrix,
        adjacency={nid: np.array(sorted(s), dtype=np.int64) for nid, s in adjacency_sets.items()},
        vocab_size=len(vocab),
        max_len=max_len,
        self_loop_count=self_loops,
    )
    if labels_path is not None:
        net.labels = load_labels(labels_path, known_ids=set(node_ids))
    if label_names_path is not None:
        net.label_names = load_label_names(label_names_path)
    return net


def load_labels(path: str | Path, known_ids: Optional[set[int]] = None) -> dict[int, int]:
    labels: dict[int, int] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ValueError(f"labels line {lineno}: expected '<node_id>\\t<label_id>'")
            nid, lab = int(parts[0]), int(parts[1])
            if known_ids is not None and nid not in known_ids:
                raise ValueError(f"labels line {lineno}: unknown node id {nid}")
            labels[nid] = lab
    return labels


def load_label_names(path: str | Path) -> dict[int, str]:
    names: dict[int, str] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t", 1)
            if len(parts) != 2:
                raise ValueError(f"label names line {lineno}: expected '<label_id>\\t<name>'")
            names[int(parts[0])] = parts[1]
    return names


def load_splits(path: str | Path) -> dict[int, str]:
    splits: dict[int, str] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2 or parts[1] not in ("train", "valid", "test"):
                raise ValueError(f"splits line {lineno}: expected '<node_id>\\t<train|valid|test>'")
            splits[int(parts[0])] = parts[1]
    return splits


def save_splits(splits: dict[int, str], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for nid in sorted(splits):
            fh.write(f"{nid}\t{splits[nid]}\n")


def sample_neighbors(net: TextRichNetwork, v: int, k: int, rng_seed) -> list[int]:
    """Uniform sample without replacement from adj(v); all neighbors
    (shuffled) when deg(v) <= k. Deterministic given the seed."""
    rng = _rng(rng_seed)
    adj = net.adjacency[v]
    if len(adj) <= k:
        return [int(x) for x in rng.permutation(adj)]
    return [int(x) for x in rng.choice(adj, size=k, replace=False)]


def make_ego_batch(
    net: TextRichNetwork,
    centers: Sequence[int],
    k: int,
    mlm: bool,
    rng_seed,
    mask_ratio: float = 0.15,
) -> EgoBatch:
    """Assemble center + sampled-neighbor sequences for ``centers``.

    With ``mlm`` set, center sequences are masked in place (labels record
    the original ids); neighbor texts are never masked.
    """
    if len(centers) == 0:
        raise ValueError("make_ego_batch: centers must be non-empty")
    rng = _rng(rng_seed)
    b, t = len(centers), net.max_len
    center_rows = []
    for c in centers:
        row = net.row_of.get(c)
        if row is None:
            raise ValueError(f"make_ego_batch: unknown center node id {c}")
        center_rows.append(row)
    center_rows = np.asarray(center_rows)

    center_ids = net.ids_matrix[center_rows].copy()
    center_flags = net.flags_matrix[center_rows].copy()
    neighbor_ids = np.full((b, k, t), tokenizer.PAD, dtype=np.int32)
    neighbor_flags = np.zeros((b, k, t), dtype=np.int8)
    validity = np.zeros((b, k), dtype=np.int8)
    for i, c in enumerate(centers):
        picked = sample_neighbors(net, c, k, rng)
        for slot, nb in enumerate(picked):
            nb_row = net.row_of[nb]
            neighbor_ids[i, slot] = net.ids_matrix[nb_row]
            neighbor_flags[i, slot] = net.flags_matrix[nb_row]
            validity[i, slot] = 1

    mlm_labels = np.full((b, t), MLM_IGNORE, dtype=np.int32)
    if mlm:
        for i in range(b):
            masked, labels = mask_token_ids(
                center_ids[i], center_flags[i], mask_ratio, rng, net.vocab_size
            )
            center_ids[i] = masked
            mlm_labels[i] = labels

    return EgoBatch(
        center_node_ids=np.asarray(list(centers), dtype=np.int64),
        center_ids=center_ids,
        center_flags=center_flags,
        neighbor_ids=neighbor_ids,
        neighbor_flags=neighbor_flags,
        validity=validity,
        mlm_labels=mlm_labels,
    )


def split_edges(
    net: TextRichNetwork, holdout_fraction: float, rng_seed
) -> tuple[TextRichNetwork, list[tuple[int, int]]]:
    """Remove a random fraction of undirected edges; return the reduced
    (still symmetric) network and the held-out positive pairs."""
    if not 0.0 < holdout_fraction < 0.5:
        raise ValueError(f"split_edges: holdout_fraction must be in (0, 0.5), got {holdout_fraction}")
    rng = _rng(rng_seed)
    edges = [(u, int(v)) for u, adj in sorted(net.adjacency.items()) for v in adj if u < v]
    n_hold = int(round(holdout_fraction * len(edges)))
    held_idx = set(rng.choice(len(edges), size=n_hold, replace=False).tolist())
    held = [edges[i] for i in sorted(held_idx)]
    removed = set(held)

    adjacency = {}
    for nid, adj in net.adjacency.items():
        kept = [v for v in adj if (min(nid, v), max(nid, v)) not in removed]
        adjacency[nid] = np.array(kept, dtype=np.int64)
    train_net = TextRichNetwork(
        node_ids=net.node_ids,
        row_of=net.row_of,
        ids_matrix=net.ids_matrix,
        flags_matrix=net.flags_matrix,
        adjacency=adjacency,
        vocab_size=net.vocab_size,
        max_len=net.max_len,
        self_loop_count=net.self_loop_count,
        labels=net.labels,
        label_names=net.label_names,
    )
    return train_net, held
