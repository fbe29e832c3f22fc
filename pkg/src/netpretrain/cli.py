"""Command-line entry point.

Subcommands: gen, build-vocab, pretrain, finetune {classify|retrieve|
rerank|linkpred}, eval-run, dump-attention. Exit codes: 0 on success with
the requested artifact fully written, 2 for invalid config or missing or
mismatched inputs, 3 for a non-finite training loss.
"""

from __future__ import annotations

import argparse
import json
import re
import sys
from pathlib import Path

import numpy as np

from . import downstream, netdata, ranking, synthgen, tokenizer, trainer
from .config import (
    ConfigError,
    apply_overrides,
    config_digest,
    load_config,
    write_resolved,
)
from .graphformer import (
    CheckpointMismatch,
    ModelConfig,
    dump_attention,
    encode_batch,
    init_params,
    load_params,
    save_attention_report,
    save_params,
)
from .trainer import NonFiniteLossError


def _model_config(cfg: dict, vocab_size: int) -> ModelConfig:
    return ModelConfig(vocab_size=vocab_size, **cfg["model"])


def _require(cfg: dict, *keys: str) -> None:
    for dotted in keys:
        section, key = dotted.split(".")
        if cfg[section][key] is None:
            raise ConfigError(f"config key {dotted} is required for this command")


def _load_data(cfg: dict, need_labels: str | None = None):
    _require(cfg, "data.nodes", "data.edges", "data.vocab")
    vocab = tokenizer.Vocab.load(cfg["data"]["vocab"])
    labels_path = cfg["data"].get(need_labels) if need_labels else None
    if need_labels and labels_path is None:
        raise ConfigError(f"config key data.{need_labels} is required for this task")
    net = netdata.load_network(
        cfg["data"]["nodes"],
        cfg["data"]["edges"],
        vocab,
        cfg["model"]["max_len"],
        labels_path=labels_path,
        label_names_path=cfg["data"]["label_names_fine"] if need_labels == "labels_fine" else None,
    )
    return net, vocab


def _load_encoder(cfg: dict, checkpoint: str, vocab_size: int):
    model_cfg = _model_config(cfg, vocab_size)
    if checkpoint == "none":
        return init_params(model_cfg, cfg["task"]["seed"]), None
    prefix = Path(checkpoint)
    if prefix.suffix in (".json", ".bin"):
        prefix = prefix.with_suffix("")
    if not prefix.with_suffix(".json").exists():
        raise ConfigError(f"checkpoint not found: {prefix}")
    params = load_params(prefix, model_cfg)
    manifest = json.loads(prefix.with_suffix(".json").read_text())
    return params, manifest.get("step")


def cmd_gen(args) -> int:
    cfg = synthgen.SynthConfig(
        num_clusters=args.clusters,
        nodes_per_cluster=args.nodes_per_cluster,
        p_in=args.p_in,
        p_out=args.p_out,
        tokens_per_node=args.tokens_per_node,
        cluster_vocab_size=args.cluster_vocab,
        ambiguous_vocab_size=args.ambiguous_vocab,
        fine_labels_per_cluster=args.fine_labels,
        ambiguous_fraction=args.ambiguous_fraction,
        subtopic_fraction=args.subtopic_fraction,
        p_subtopic_edge=args.p_subtopic_edge,
        seed=args.seed,
    )
    paths = synthgen.generate_network(cfg, args.out)
    print(json.dumps({"out": str(args.out), "nodes": str(paths.nodes)}, sort_keys=True))
    return 0


def cmd_build_vocab(args) -> int:
    nodes_path = Path(args.nodes)
    if not nodes_path.exists():
        raise ConfigError(f"nodes file not found: {nodes_path}")

    def texts():
        with open(nodes_path, "r", encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if line:
                    yield str(json.loads(line)["text"])

    vocab = tokenizer.build_vocab(texts(), min_count=args.min_count, max_size=args.max_size)
    vocab.save(args.out)
    print(json.dumps({"vocab": str(args.out), "size": len(vocab)}, sort_keys=True))
    return 0


def cmd_pretrain(args) -> int:
    cfg = load_config(args.config)
    overrides: dict[str, object] = {}
    if args.objective:
        overrides["pretrain.objective"] = args.objective
    if args.seed is not None:
        overrides["pretrain.seed"] = args.seed
    if args.steps is not None:
        overrides["pretrain.max_steps"] = args.steps
    if args.epochs is not None:
        overrides["pretrain.epochs"] = args.epochs
    if args.out:
        overrides["output.dir"] = args.out
    cfg = apply_overrides(cfg, overrides)

    net, vocab = _load_data(cfg)
    out_dir = Path(cfg["output"]["dir"])
    write_resolved(cfg, out_dir)
    settings = trainer.PretrainSettings.from_dict(cfg["pretrain"])
    summary = trainer.run_pretraining(
        net, _model_config(cfg, len(vocab)), settings, out_dir, resume=args.resume
    )
    print(json.dumps(summary, sort_keys=True))
    return 0


def cmd_finetune(args) -> int:
    cfg = load_config(args.config)
    overrides: dict[str, object] = {"task.kind": args.task}
    if args.seed is not None:
        overrides["task.seed"] = args.seed
    if args.shots is not None:
        overrides["task.shots"] = args.shots
    if args.epochs is not None:
        overrides["task.epochs"] = args.epochs
    if args.out:
        overrides["output.dir"] = args.out
    cfg = apply_overrides(cfg, overrides)
    # kind-dependent defaults may change with the kind override
    from .config import TASK_KIND_DEFAULTS
    for key, value in TASK_KIND_DEFAULTS[args.task].items():
        if cfg["task"][key] is None:
            cfg["task"][key] = value

    label_key = {"classify": "labels_coarse", "retrieve": "labels_fine",
                 "rerank": "labels_fine", "linkpred": None}[args.task]
    net, vocab = _load_data(cfg, need_labels=label_key)
    out_dir = Path(cfg["output"]["dir"])
    write_resolved(cfg, out_dir)
    params, ckpt_step = _load_encoder(cfg, args.checkpoint, len(vocab))
    task_cfg = downstream.TaskConfig.from_dict(cfg["task"])

    splits = None
    if cfg["data"]["splits"]:
        splits = netdata.load_splits(cfg["data"]["splits"])

    if args.task == "classify":
        if splits is None:
            splits = downstream.derive_classification_splits(
                net.labels, task_cfg.shots, task_cfg.seed
            )
        netdata.save_splits(splits, out_dir / "splits.tsv")
        _, report = downstream.finetune_classification(params, net, task_cfg, splits)
    elif args.task in ("retrieve", "rerank"):
        if splits is None:
            splits = downstream.derive_query_splits(
                sorted(net.labels), task_cfg.shots, task_cfg.seed
            )
        netdata.save_splits(splits, out_dir / "splits.tsv")
        if args.task == "retrieve":
            _, report = downstream.finetune_retrieval(params, net, vocab, task_cfg, splits)
        else:
            report = downstream.finetune_rerank(params, net, vocab, task_cfg, splits)
    else:
        _require(cfg, "data.edges_task")
        pairs = netdata.load_edge_pairs(cfg["data"]["edges_task"], known_ids=set(net.node_ids))
        report = downstream.finetune_linkpred(params, net, pairs, task_cfg)

    report["config_digest"] = config_digest(cfg)
    report["init_checkpoint_step"] = ckpt_step
    (out_dir / "report.json").write_text(json.dumps(report, indent=1, sort_keys=True))
    print(json.dumps(report, sort_keys=True))
    return 0


def cmd_eval_run(args) -> int:
    path = Path(args.run)
    if not path.exists():
        raise ConfigError(f"run file not found: {path}")
    run = ranking.load_run(path)
    m = args.metric.lower()
    if m == "prec1":
        value, _ = ranking.prec1_mrr(run)
    elif m == "mrr":
        _, value = ranking.prec1_mrr(run)
    else:
        match = re.fullmatch(r"(recall|ndcg)@(\d+)", m)
        if not match:
            raise ConfigError(f"unknown metric {args.metric!r}; "
                              "use recall@K, ndcg@K, prec1, or mrr")
        k = int(match.group(2))
        value = (ranking.recall_at_k if match.group(1) == "recall" else ranking.ndcg_at_k)(run, k)
    print(json.dumps({
        "metric": m,
        "value": value,
        "queries": len(run),
        "skipped_empty_relevance": ranking.count_empty_relevance(run),
    }, sort_keys=True))
    return 0


def cmd_dump_attention(args) -> int:
    cfg = load_config(args.config)
    if args.out:
        cfg = apply_overrides(cfg, {"output.dir": args.out})
    net, vocab = _load_data(cfg)
    params, _ = _load_encoder(cfg, args.checkpoint, len(vocab))
    if args.node not in net.row_of:
        raise ConfigError(f"unknown node id {args.node}")
    rng = np.random.default_rng((cfg["task"]["seed"], downstream.STREAM_EVAL))
    batch = netdata.make_ego_batch(net, [args.node], cfg["model"]["neighbors"],
                                   mlm=False, rng_seed=rng)
    _, _, acts = encode_batch(batch, params, dump_attention=True)
    records = dump_attention(acts, token_window=args.window)
    if args.layer != "all":
        layer = int(args.layer)
        records = [r for r in records if r["layer"] == layer]
    out_dir = Path(cfg["output"]["dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    out_path = out_dir / "attention.jsonl"
    save_attention_report(records, out_path)
    print(json.dumps({"attention": str(out_path), "records": len(records)}, sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="netpretrain",
        description="Pretrain and finetune a graph-aware text encoder on a text-rich network.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic text-rich network")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=7)
    g.add_argument("--clusters", type=int, default=4)
    g.add_argument("--nodes-per-cluster", type=int, default=250)
    g.add_argument("--p-in", type=float, default=0.05)
    g.add_argument("--p-out", type=float, default=0.002)
    g.add_argument("--tokens-per-node", type=int, default=12)
    g.add_argument("--cluster-vocab", type=int, default=240)
    g.add_argument("--ambiguous-vocab", type=int, default=20)
    g.add_argument("--fine-labels", type=int, default=30)
    g.add_argument("--ambiguous-fraction", type=float, default=0.35)
    g.add_argument("--subtopic-fraction", type=float, default=0.6)
    g.add_argument("--p-subtopic-edge", type=float, default=0.3)
    g.set_defaults(func=cmd_gen)

    b = sub.add_parser("build-vocab", help="build a word-level vocabulary from a nodes file")
    b.add_argument("--nodes", required=True)
    b.add_argument("--out", required=True)
    b.add_argument("--min-count", type=int, default=1)
    b.add_argument("--max-size", type=int, default=50000)
    b.set_defaults(func=cmd_build_vocab)

    p = sub.add_parser("pretrain", help="run joint pretraining")
    p.add_argument("--config", required=True)
    p.add_argument("--objective", choices=["joint", "nmlm-only", "mnp-only"])
    p.add_argument("--seed", type=int)
    p.add_argument("--steps", type=int, help="override pretrain.max_steps")
    p.add_argument("--epochs", type=int)
    p.add_argument("--out")
    p.add_argument("--resume", action="store_true")
    p.set_defaults(func=cmd_pretrain)

    f = sub.add_parser("finetune", help="finetune on a downstream task")
    f.add_argument("task", choices=list(downstream.TASK_KINDS))
    f.add_argument("--config", required=True)
    f.add_argument("--checkpoint", required=True,
                   help="checkpoint prefix, or 'none' for the random-init baseline")
    f.add_argument("--seed", type=int)
    f.add_argument("--shots", type=int)
    f.add_argument("--epochs", type=int)
    f.add_argument("--out")
    f.set_defaults(func=cmd_finetune)

    e = sub.add_parser("eval-run", help="recompute metrics from a ranking-run file")
    e.add_argument("run")
    e.add_argument("--metric", required=True, help="recall@K, ndcg@K, prec1, or mrr")
    e.set_defaults(func=cmd_eval_run)

    d = sub.add_parser("dump-attention", help="write attention-map records for one node")
    d.add_argument("--config", required=True)
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--node", type=int, required=True)
    d.add_argument("--layer", default="all")
    d.add_argument("--window", type=int, default=8)
    d.add_argument("--out")
    d.set_defaults(func=cmd_dump_attention)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except NonFiniteLossError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except (ConfigError, CheckpointMismatch, FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
