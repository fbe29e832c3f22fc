"""Pretraining loop: batch scheduling, learning-rate schedule, checkpoints.

Every source of randomness for step t is derived from (seed, stream, t) or
(seed, stream, epoch), so a run is bit-reproducible and a resumed run
continues the identical loss trajectory without checkpointing RNG state.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import netdata
from .graphformer import ModelConfig, ModelParams, init_params, load_params, save_params
from .objectives import AdamState, PretrainStepOutput, joint_step

# rng stream tags
STREAM_EPOCH_ORDER = 0
STREAM_STEP = 1


class NonFiniteLossError(RuntimeError):
    """Training produced a NaN/Inf loss."""


def linear_schedule(step: int, total_steps: int, peak: float, warmup_frac: float) -> float:
    """Linear warm-up to ``peak`` over the first warmup fraction of steps,
    then linear decay toward zero. ``step`` is 0-based."""
    warmup = max(1, round(warmup_frac * total_steps))
    if step < warmup:
        return peak * (step + 1) / warmup
    if total_steps <= warmup:
        return peak
    return peak * (total_steps - step) / (total_steps - warmup)


@dataclass
class PretrainSettings:
    objective: str = "joint"
    epochs: int = 5
    max_steps: Optional[int] = None
    batch_size: int = 512            # center sequences per step; anchors are half
    peak_lr: float = 1e-5
    warmup_frac: float = 0.1
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_norm: float = 1.0
    weight_decay: float = 0.0
    mask_ratio: float = 0.15
    mnp_filter_false_negatives: bool = False
    checkpoint_interval: int = 1000
    edge_holdout: float = 0.0
    seed: int = 7

    @classmethod
    def from_dict(cls, d: dict) -> "PretrainSettings":
        return cls(**d)


def save_optimizer_state(state: AdamState, train_step: int, prefix: str | Path) -> None:
    prefix = Path(prefix)
    manifest = {"adam_step": state.step, "train_step": train_step, "tensors": {}}
    offset = 0
    with open(prefix.with_suffix(".bin"), "wb") as fh:
        for group, buffers in (("m", state.m), ("v", state.v)):
            for name, arr in buffers.items():
                raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
                manifest["tensors"][f"{group}.{name}"] = {
                    "shape": list(arr.shape), "offset": offset,
                }
                fh.write(raw)
                offset += len(raw)
    prefix.with_suffix(".json").write_text(json.dumps(manifest, indent=1, sort_keys=True))


def load_optimizer_state(prefix: str | Path) -> tuple[AdamState, int]:
    prefix = Path(prefix)
    manifest = json.loads(prefix.with_suffix(".json").read_text())
    blob = prefix.with_suffix(".bin").read_bytes()
    state = AdamState(step=manifest["adam_step"])
    for full_name, entry in manifest["tensors"].items():
        group, name = full_name.split(".", 1)
        shape = tuple(entry["shape"])
        arr = np.frombuffer(
            blob, dtype="<f4", count=int(np.prod(shape)), offset=entry["offset"]
        ).reshape(shape).astype(np.float32)
        getattr(state, group)[name] = arr
    return state, manifest["train_step"]


def latest_checkpoint_step(out_dir: Path) -> Optional[int]:
    steps = []
    for p in out_dir.glob("checkpoint-*.state.json"):
        m = re.fullmatch(r"checkpoint-(\d+)\.state\.json", p.name)
        if m:
            steps.append(int(m.group(1)))
    return max(steps) if steps else None


def _pretrain_batch(net: netdata.TextRichNetwork, anchors: list[int], k: int,
                    mlm: bool, mask_ratio: float, rng: np.random.Generator):
    """Anchors plus one sampled linked partner each; partners join the batch
    as ordinary centers and define the positive pairs."""
    partners = []
    pair_anchor_idx = []
    for i, a in enumerate(anchors):
        adj = net.adjacency[a]
        if len(adj):
            partners.append(int(rng.choice(adj)))
            pair_anchor_idx.append(i)
    centers = list(anchors) + partners
    batch = netdata.make_ego_batch(net, centers, k, mlm=mlm, rng_seed=rng,
                                   mask_ratio=mask_ratio)
    batch.pairs = [(i, len(anchors) + p) for p, i in enumerate(pair_anchor_idx)]
    return batch


def _forbidden_negatives(net, batch) -> list[set[int]]:
    """Per positive pair, in-batch indices of true neighbors of the anchor."""
    index_of = {}
    for idx, nid in enumerate(batch.center_node_ids.tolist()):
        index_of.setdefault(nid, idx)
    out = []
    for j, _k in batch.pairs:
        anchor = int(batch.center_node_ids[j])
        banned = set()
        for nb in net.adjacency[anchor]:
            idx = index_of.get(int(nb))
            if idx is not None:
                banned.add(idx)
        out.append(banned)
    return out


def run_pretraining(
    net: netdata.TextRichNetwork,
    model_cfg: ModelConfig,
    settings: PretrainSettings,
    out_dir: str | Path,
    resume: bool = False,
    log_every: int = 1,
) -> dict:
    """Train for the configured number of steps, writing checkpoints and a
    JSONL log under ``out_dir``. Returns a summary dict."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    anchors_per_step = max(1, settings.batch_size // 2)
    steps_per_epoch = max(1, math.ceil(net.num_nodes / anchors_per_step))
    total_steps = settings.max_steps or settings.epochs * steps_per_epoch

    train_net = net
    heldout: list[tuple[int, int]] = []
    if settings.edge_holdout > 0.0:
        train_net, heldout = netdata.split_edges(
            net, settings.edge_holdout, np.random.default_rng((settings.seed, 2))
        )

    start_step = 0
    state = AdamState()
    if resume:
        last = latest_checkpoint_step(out)
        if last is not None:
            params = load_params(out / f"checkpoint-{last}", model_cfg)
            state, start_step = load_optimizer_state(out / f"checkpoint-{last}.state")
        else:
            params = init_params(model_cfg, settings.seed)
    else:
        params = init_params(model_cfg, settings.seed)

    node_list = train_net.node_ids
    mlm = settings.objective in ("joint", "nmlm-only")
    log_path = out / "train.log.jsonl"
    log_fh = open(log_path, "a" if (resume and start_step > 0) else "w", encoding="utf-8")
    last_output: Optional[PretrainStepOutput] = None
    try:
        for t in range(start_step, total_steps):
            epoch = t // steps_per_epoch
            pos = (t % steps_per_epoch) * anchors_per_step
            order = np.random.default_rng(
                (settings.seed, STREAM_EPOCH_ORDER, epoch)
            ).permutation(len(node_list))
            anchors = [node_list[i] for i in order[pos:pos + anchors_per_step]]
            step_rng = np.random.default_rng((settings.seed, STREAM_STEP, t))
            batch = _pretrain_batch(train_net, anchors, model_cfg.neighbors,
                                    mlm, settings.mask_ratio, step_rng)
            forbidden = (_forbidden_negatives(train_net, batch)
                         if settings.mnp_filter_false_negatives else None)
            lr = linear_schedule(t, total_steps, settings.peak_lr, settings.warmup_frac)
            output = joint_step(
                batch, params, state, lr,
                objective=settings.objective,
                betas=(settings.adam_beta1, settings.adam_beta2),
                eps=settings.adam_eps,
                weight_decay=settings.weight_decay,
                clip_norm=settings.clip_norm,
                train_rng=step_rng if model_cfg.dropout > 0 else None,
                mnp_forbidden=forbidden,
            )
            if not math.isfinite(output.total):
                raise NonFiniteLossError(f"non-finite loss at step {t + 1}")
            last_output = output
            if (t + 1) % log_every == 0:
                log_fh.write(json.dumps({
                    "step": t + 1,
                    "nmlm": output.nmlm_loss,
                    "mnp": output.mnp_loss,
                    "total": output.total,
                    "lr": lr,
                    "masked_acc": output.masked_accuracy,
                    "inbatch_prec1": output.inbatch_prec1,
                }, sort_keys=True) + "\n")
                log_fh.flush()
            if (t + 1) % settings.checkpoint_interval == 0 or (t + 1) == total_steps:
                prefix = out / f"checkpoint-{t + 1}"
                save_params(params, prefix, extra={"step": t + 1})
                save_optimizer_state(state, t + 1, out / f"checkpoint-{t + 1}.state")
    finally:
        log_fh.close()
    return {
        "total_steps": total_steps,
        "final_checkpoint": str(out / f"checkpoint-{total_steps}"),
        "heldout_pairs": len(heldout),
        "final_total_loss": last_output.total if last_output else None,
    }
