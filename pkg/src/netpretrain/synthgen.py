"""Deterministic planted-structure generator for text-rich networks.

Nodes live in clusters (dense intra-cluster edges, sparse inter-cluster
ones). Node text mixes tokens specific to the node's cluster with shared
ambiguous tokens that occur in every cluster, so neighbor context carries
real signal about token meaning. Each cluster is subdivided into subtopics
that define fine labels, label-name texts, and a second edge type planted
within subtopic groups (the finetuning link-prediction target).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np


@dataclass
class SynthConfig:
    num_clusters: int = 4
    nodes_per_cluster: int = 250
    p_in: float = 0.05
    p_out: float = 0.002
    tokens_per_node: int = 12
    cluster_vocab_size: int = 240
    ambiguous_vocab_size: int = 20
    fine_labels_per_cluster: int = 30
    ambiguous_fraction: float = 0.35
    subtopic_fraction: float = 0.6
    label_name_tokens: int = 4
    p_subtopic_edge: float = 0.3
    seed: int = 7

    def __post_init__(self):
        if not 0.0 <= self.p_out < self.p_in <= 1.0:
            raise ValueError(f"need 0 <= p_out < p_in <= 1, got p_in={self.p_in} p_out={self.p_out}")
        for name in ("num_clusters", "nodes_per_cluster", "tokens_per_node",
                     "cluster_vocab_size", "ambiguous_vocab_size",
                     "fine_labels_per_cluster", "label_name_tokens"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.cluster_vocab_size // self.fine_labels_per_cluster < self.label_name_tokens:
            raise ValueError("subtopic vocabulary too small for the label name length")


@dataclass
class SynthPaths:
    nodes: Path
    edges: Path
    labels_coarse: Path
    labels_fine: Path
    label_names_coarse: Path
    label_names_fine: Path
    edges_subtopic: Path


def _cluster_tokens(c: int, size: int) -> list[str]:
    return [f"c{c}w{i}" for i in range(size)]


def _ambiguous_tokens(size: int) -> list[str]:
    return [f"amb{i}" for i in range(size)]


def _sample_edges(rng: np.random.Generator, prob: np.ndarray) -> np.ndarray:
    """Upper-triangle Bernoulli draw; returns an array of (u, v) pairs."""
    n = prob.shape[0]
    draw = rng.random((n, n))
    hit = np.triu(draw < prob, k=1)
    us, vs = np.nonzero(hit)
    return np.stack([us, vs], axis=1)


def generate_network(cfg: SynthConfig, out_dir: str | Path) -> SynthPaths:
    """Write all dataset files under ``out_dir``; byte-identical per seed."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(cfg.seed)

    n = cfg.num_clusters * cfg.nodes_per_cluster
    cluster = np.arange(n) // cfg.nodes_per_cluster
    subtopic = rng.integers(0, cfg.fine_labels_per_cluster, size=n)
    fine_label = cluster * cfg.fine_labels_per_cluster + subtopic

    vocab = {c: _cluster_tokens(c, cfg.cluster_vocab_size) for c in range(cfg.num_clusters)}
    ambiguous = _ambiguous_tokens(cfg.ambiguous_vocab_size)
    chunk = cfg.cluster_vocab_size // cfg.fine_labels_per_cluster

    def subtopic_pool(c: int, s: int) -> list[str]:
        return vocab[c][s * chunk:(s + 1) * chunk]

    texts = []
    for i in range(n):
        c, s = int(cluster[i]), int(subtopic[i])
        pool = subtopic_pool(c, s)
        tokens = []
        for _ in range(cfg.tokens_per_node):
            if rng.random() < cfg.ambiguous_fraction:
                tokens.append(ambiguous[rng.integers(len(ambiguous))])
            elif rng.random() < cfg.subtopic_fraction:
                tokens.append(pool[rng.integers(len(pool))])
            else:
                tokens.append(vocab[c][rng.integers(cfg.cluster_vocab_size)])
        texts.append(" ".join(tokens))

    prob = np.where(cluster[:, None] == cluster[None, :], cfg.p_in, cfg.p_out)
    edges = _sample_edges(rng, prob)

    same_fine = fine_label[:, None] == fine_label[None, :]
    edges2 = _sample_edges(rng, np.where(same_fine, cfg.p_subtopic_edge, 0.0))

    paths = SynthPaths(
        nodes=out / "nodes.jsonl",
        edges=out / "edges.tsv",
        labels_coarse=out / "labels_coarse.tsv",
        labels_fine=out / "labels_fine.tsv",
        label_names_coarse=out / "label_names_coarse.tsv",
        label_names_fine=out / "label_names_fine.tsv",
        edges_subtopic=out / "edges_subtopic.tsv",
    )

    with open(paths.nodes, "w", encoding="utf-8") as fh:
        for i in range(n):
            fh.write(json.dumps({"id": i, "text": texts[i]}) + "\n")
    with open(paths.edges, "w", encoding="utf-8") as fh:
        for u, v in edges:
            fh.write(f"{u}\t{v}\n")
    with open(paths.edges_subtopic, "w", encoding="utf-8") as fh:
        for u, v in edges2:
            fh.write(f"{u}\t{v}\n")
    with open(paths.labels_coarse, "w", encoding="utf-8") as fh:
        for i in range(n):
            fh.write(f"{i}\t{int(cluster[i])}\n")
    with open(paths.labels_fine, "w", encoding="utf-8") as fh:
        for i in range(n):
            fh.write(f"{i}\t{int(fine_label[i])}\n")
    with open(paths.label_names_coarse, "w", encoding="utf-8") as fh:
        for c in range(cfg.num_clusters):
            fh.write(f"{c}\t{' '.join(vocab[c][:cfg.label_name_tokens])}\n")
    with open(paths.label_names_fine, "w", encoding="utf-8") as fh:
        for c in range(cfg.num_clusters):
            for s in range(cfg.fine_labels_per_cluster):
                lid = c * cfg.fine_labels_per_cluster + s
                fh.write(f"{lid}\t{' '.join(subtopic_pool(c, s)[:cfg.label_name_tokens])}\n")
    return paths
