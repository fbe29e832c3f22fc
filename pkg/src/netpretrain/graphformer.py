"""GNN-nested transformer encoder.

Each layer aggregates neighbor [CLS] states into a per-node virtual token,
prepends it to the token states as an extra attention key/value, and then
runs multi-head attention and an MLP with pre-residual layer norm:

    z    = aggregate({self CLS} + {valid neighbor CLS})   (scaled dot
           product attention with the center CLS as query, then a learned
           linear projection)
    Hcat = [z ; H]
    H'   = LN(H + MHA(q from H, k/v from Hcat))
    Hout = LN(H' + MLP(H'))

The virtual token is key/value only: it emits no query and produces no
output row. Neighbor sequences run through the same shared weights with
zero valid neighbors of their own, and their per-layer [CLS] states feed
the center's aggregation at the matching layer. A node encoded with zero
valid neighbors therefore takes exactly the same code path as a neighbor,
which keeps the out-of-network (blank neighbor) encoding bit-identical to
the in-batch one.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Optional

import numpy as np

from .autodiff import (
    Tensor,
    add,
    concat,
    dropout,
    embedding,
    gelu,
    layer_norm,
    linear,
    masked_softmax,
    matmul,
    mul,
    reshape,
    take_index,
    transpose,
)

INIT_SCALE = 0.02


@dataclass
class ModelConfig:
    vocab_size: int
    hidden_dim: int = 64
    layers: int = 4
    heads: int = 4
    max_len: int = 32
    neighbors: int = 5
    dropout: float = 0.1
    include_self_in_gnn: bool = True
    layer_norm_eps: float = 1e-5

    def __post_init__(self):
        if self.layers < 1:
            raise ValueError(f"layers must be >= 1, got {self.layers}")
        if self.hidden_dim % self.heads != 0:
            raise ValueError(
                f"hidden_dim {self.hidden_dim} not divisible by heads {self.heads}"
            )


LAYER_PARAM_SHAPES = {
    "attn_q_w": ("d", "d"), "attn_q_b": ("d",),
    "attn_k_w": ("d", "d"), "attn_k_b": ("d",),
    "attn_v_w": ("d", "d"), "attn_v_b": ("d",),
    "attn_o_w": ("d", "d"), "attn_o_b": ("d",),
    "gnn_w": ("d", "d"), "gnn_b": ("d",),
    "ln1_gain": ("d",), "ln1_bias": ("d",),
    "mlp_w1": ("d", "4d"), "mlp_b1": ("4d",),
    "mlp_w2": ("4d", "d"), "mlp_b2": ("d",),
    "ln2_gain": ("d",), "ln2_bias": ("d",),
}


def _resolve_shape(spec: tuple, d: int, cfg: ModelConfig) -> tuple:
    table = {"d": d, "4d": 4 * d, "V": cfg.vocab_size, "T": cfg.max_len}
    return tuple(table[s] for s in spec)


def parameter_shapes(cfg: ModelConfig) -> dict[str, tuple]:
    """Ordered name -> shape map: the checkpoint layout of an architecture."""
    shapes: dict[str, tuple] = {
        "token_embedding": (cfg.vocab_size, cfg.hidden_dim),
        "position_embedding": (cfg.max_len, cfg.hidden_dim),
        "mlm_bias": (cfg.vocab_size,),
    }
    for i in range(cfg.layers):
        for name, spec in LAYER_PARAM_SHAPES.items():
            shapes[f"layers.{i}.{name}"] = _resolve_shape(spec, cfg.hidden_dim, cfg)
    return shapes


@dataclass
class ModelParams:
    """All learnable encoder weights, keyed by name in checkpoint order.

    The MLM head is tied to the token embedding table; ``mlm_bias`` is the
    only extra output parameter.
    """

    config: ModelConfig
    tensors: dict[str, Tensor] = field(repr=False)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def layer(self, i: int) -> dict[str, Tensor]:
        prefix = f"layers.{i}."
        return {k[len(prefix):]: v for k, v in self.tensors.items() if k.startswith(prefix)}

    def named(self) -> dict[str, Tensor]:
        return self.tensors

    def zero_grads(self) -> None:
        for t in self.tensors.values():
            t.zero_grad()

    def copy(self) -> "ModelParams":
        return ModelParams(
            config=self.config,
            tensors={k: Tensor(v.data.copy(), requires_grad=True) for k, v in self.tensors.items()},
        )


def init_params(cfg: ModelConfig, seed: int, dtype=np.float32) -> ModelParams:
    """Random init: normal(0, 0.02) weights, unit layer-norm gains, zero biases."""
    rng = np.random.default_rng(seed)
    tensors: dict[str, Tensor] = {}
    for name, shape in parameter_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf.endswith("_gain"):
            data = np.ones(shape, dtype=dtype)
        elif leaf.endswith(("_b", "_bias")) or leaf == "mlm_bias":
            data = np.zeros(shape, dtype=dtype)
        else:
            data = rng.normal(0.0, INIT_SCALE, size=shape).astype(dtype)
        tensors[name] = Tensor(data, requires_grad=True)
    return ModelParams(config=cfg, tensors=tensors)


# ---------------------------------------------------------------------------
# checkpoint io: JSON manifest + little-endian float32 blob in manifest order
# ---------------------------------------------------------------------------


def save_params(params: ModelParams, prefix: str | Path, extra: Optional[dict] = None) -> None:
    """Write <prefix>.json (manifest) and <prefix>.bin (raw '<f4' values)."""
    prefix = Path(prefix)
    manifest: dict = {"architecture": asdict(params.config), "tensors": {}}
    if extra:
        manifest.update(extra)
    offset = 0
    with open(prefix.with_suffix(".bin"), "wb") as fh:
        for name, t in params.tensors.items():
            raw = np.ascontiguousarray(t.data, dtype="<f4").tobytes()
            manifest["tensors"][name] = {"shape": list(t.data.shape), "offset": offset}
            fh.write(raw)
            offset += len(raw)
    prefix.with_suffix(".json").write_text(json.dumps(manifest, indent=1, sort_keys=True))


class CheckpointMismatch(ValueError):
    """Checkpoint does not fit the configured architecture."""


def load_params(prefix: str | Path, cfg: ModelConfig) -> ModelParams:
    """Load a checkpoint, validating every tensor shape against ``cfg``."""
    prefix = Path(prefix)
    manifest = json.loads(prefix.with_suffix(".json").read_text())
    blob = prefix.with_suffix(".bin").read_bytes()
    expected = parameter_shapes(cfg)
    stored = manifest["tensors"]
    for name in expected:
        if name not in stored:
            raise CheckpointMismatch(f"checkpoint is missing tensor {name}")
    for name in stored:
        if name not in expected:
            raise CheckpointMismatch(f"checkpoint has unexpected tensor {name}")
    tensors: dict[str, Tensor] = {}
    for name, shape in expected.items():
        entry = stored[name]
        if tuple(entry["shape"]) != shape:
            raise CheckpointMismatch(
                f"tensor {name} has shape {tuple(entry['shape'])}, "
                f"configured architecture expects {shape}"
            )
        count = int(np.prod(shape))
        arr = np.frombuffer(
            blob, dtype="<f4", count=count, offset=entry["offset"]
        ).reshape(shape)
        tensors[name] = Tensor(arr.astype(np.float32), requires_grad=True)
    return ModelParams(config=cfg, tensors=tensors)


def checkpoint_step(prefix: str | Path) -> Optional[int]:
    manifest = json.loads(Path(prefix).with_suffix(".json").read_text())
    return manifest.get("step")


# ---------------------------------------------------------------------------
# forward pass
# ---------------------------------------------------------------------------


@dataclass
class LayerActivations:
    """Per-layer activations captured when attention dumping is enabled."""

    virtual_tokens: list[np.ndarray] = field(default_factory=list)   # [B, d] per layer
    attention_probs: list[np.ndarray] = field(default_factory=list)  # [B, h, T, T+1] per layer
    token_flags: Optional[np.ndarray] = None                          # [B, T]


def graph_aggregate(
    center_cls: Tensor,
    neighbor_cls: Tensor,
    validity: np.ndarray,
    weight: Tensor,
    bias: Tensor,
    include_self: bool = True,
) -> Tensor:
    """Aggregate {self CLS} + {valid neighbor CLS} into one vector per node.

    center_cls [B, d], neighbor_cls [B, K, d], validity [B, K]. The center
    CLS is the attention query; invalid slots score -inf. With zero valid
    neighbors the attention collapses to the self key and the output is
    just the projected center CLS.
    """
    b, d = center_cls.data.shape
    k = neighbor_cls.data.shape[1]
    q = reshape(center_cls, (b, 1, d))
    keys = concat([q, neighbor_cls], axis=1) if k else q  # [B, 1+K, d]
    scores = mul(matmul(q, transpose(keys, (0, 2, 1))), 1.0 / math.sqrt(d))  # [B, 1, 1+K]

    valid = np.asarray(validity, dtype=bool)
    mask = np.concatenate([np.ones((b, 1), dtype=bool), valid], axis=1)
    if not include_self:
        # neighbors-only aggregation; fall back to self when none are valid
        has_nb = valid.any(axis=1)
        mask[:, 0] = ~has_nb
    probs = masked_softmax(scores, mask[:, None, :], axis=-1)
    ctx = reshape(matmul(probs, keys), (b, d))
    return linear(ctx, weight, bias)


def asymmetric_attention(
    h: Tensor,
    z: Tensor,
    token_flags: np.ndarray,
    layer_params: dict[str, Tensor],
    heads: int,
) -> tuple[Tensor, np.ndarray]:
    """Multi-head attention where queries come from the T token states and
    keys/values from [z ; tokens] (length T+1). Padding keys score -inf;
    the virtual token z is attended to but yields no output row.

    Returns the [B, T, d] output and the [B, heads, T, T+1] probabilities.
    """
    b, t, d = h.data.shape
    dh = d // heads

    def split_heads(x: Tensor, length: int) -> Tensor:
        return transpose(reshape(x, (b, length, heads, dh)), (0, 2, 1, 3))

    q = split_heads(linear(h, layer_params["attn_q_w"], layer_params["attn_q_b"]), t)
    kv_in = concat([reshape(z, (b, 1, d)), h], axis=1)  # [B, T+1, d]
    k = split_heads(linear(kv_in, layer_params["attn_k_w"], layer_params["attn_k_b"]), t + 1)
    v = split_heads(linear(kv_in, layer_params["attn_v_w"], layer_params["attn_v_b"]), t + 1)

    scores = mul(matmul(q, transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))  # [B, h, T, T+1]
    key_mask = np.concatenate(
        [np.ones((b, 1), dtype=bool), np.asarray(token_flags, dtype=bool)], axis=1
    )[:, None, None, :]
    probs = masked_softmax(scores, key_mask, axis=-1)
    ctx = reshape(transpose(matmul(probs, v), (0, 2, 1, 3)), (b, t, d))
    out = linear(ctx, layer_params["attn_o_w"], layer_params["attn_o_b"])
    return out, probs.data


def layer_forward(
    h: Tensor,
    neighbor_cls: Optional[Tensor],
    validity: Optional[np.ndarray],
    layer_params: dict[str, Tensor],
    cfg: ModelConfig,
    token_flags: np.ndarray,
    train_rng: Optional[np.random.Generator] = None,
) -> tuple[Tensor, Tensor, np.ndarray]:
    """One encoder layer: aggregate, attend, MLP, both residuals.

    ``neighbor_cls`` None means zero valid neighbors (the blank path).
    Returns (next hidden states, virtual token, attention probabilities).
    """
    b, t, d = h.data.shape
    if neighbor_cls is None:
        neighbor_cls = Tensor(np.zeros((b, 0, d), dtype=h.dtype))
        validity = np.zeros((b, 0), dtype=np.int8)
    cls = take_index(h, axis=1, index=0)
    z = graph_aggregate(
        cls, neighbor_cls, validity,
        layer_params["gnn_w"], layer_params["gnn_b"],
        include_self=cfg.include_self_in_gnn,
    )
    attn_out, probs = asymmetric_attention(h, z, token_flags, layer_params, cfg.heads)
    if train_rng is not None:
        attn_out = dropout(attn_out, cfg.dropout, train_rng)
    h1 = layer_norm(add(h, attn_out), layer_params["ln1_gain"], layer_params["ln1_bias"],
                    cfg.layer_norm_eps)
    m = linear(gelu(linear(h1, layer_params["mlp_w1"], layer_params["mlp_b1"])),
               layer_params["mlp_w2"], layer_params["mlp_b2"])
    if train_rng is not None:
        m = dropout(m, cfg.dropout, train_rng)
    h2 = layer_norm(add(h1, m), layer_params["ln2_gain"], layer_params["ln2_bias"],
                    cfg.layer_norm_eps)
    return h2, z, probs


def _embed(params: ModelParams, ids: np.ndarray,
           train_rng: Optional[np.random.Generator]) -> Tensor:
    t = ids.shape[-1]
    pos = reshape(params["position_embedding"], (1, t, params.config.hidden_dim))
    out = add(embedding(params["token_embedding"], ids), pos)
    if train_rng is not None:
        out = dropout(out, params.config.dropout, train_rng)
    return out


def encode_batch(
    batch,
    params: ModelParams,
    train_rng: Optional[np.random.Generator] = None,
    dump_attention: bool = False,
) -> tuple[Tensor, Tensor, Optional[LayerActivations]]:
    """Encode an EgoBatch. Returns (center token states [B, T, d],
    node representations = final [CLS] states [B, d], activations or None).

    ``train_rng`` enables dropout; omit it for inference. Deterministic
    given params, batch, and rng state.
    """
    cfg = params.config
    b, k, t = batch.neighbor_ids.shape
    center_h = _embed(params, batch.center_ids, train_rng)
    nb_h = _embed(params, batch.neighbor_ids.reshape(b * k, t), train_rng)
    nb_flags = batch.neighbor_flags.reshape(b * k, t)

    acts = LayerActivations(token_flags=batch.center_flags.copy()) if dump_attention else None
    for i in range(cfg.layers):
        lp = params.layer(i)
        nb_cls = reshape(take_index(nb_h, axis=1, index=0), (b, k, cfg.hidden_dim))
        center_h, z, probs = layer_forward(
            center_h, nb_cls, batch.validity, lp, cfg, batch.center_flags, train_rng
        )
        nb_h, _, _ = layer_forward(nb_h, None, None, lp, cfg, nb_flags, train_rng)
        if acts is not None:
            acts.virtual_tokens.append(np.array(z.data))
            acts.attention_probs.append(np.array(probs))
    node_reps = take_index(center_h, axis=1, index=0)
    return center_h, node_reps, acts


# ---------------------------------------------------------------------------
# attention map reporting
# ---------------------------------------------------------------------------


def dump_attention(acts: Optional[LayerActivations], token_window: int,
                   example: int = 0) -> list[dict]:
    """Flatten captured attention into records for plotting.

    One record per (layer, query token), holding the head-averaged
    probability of that query attending to the virtual token (column
    "n_CLS") and to the first ``token_window`` text tokens (columns
    "tk_0".."tk_{w-1}", i.e. sequence positions 1..w). Each emitted row is
    a subset of a distribution, so it sums to at most 1.
    """
    if acts is None or not acts.attention_probs:
        raise ValueError("attention dump was not enabled during the forward pass")
    columns = ["n_CLS"] + [f"tk_{i}" for i in range(token_window)]
    flags = acts.token_flags[example]
    records = []
    for layer, probs in enumerate(acts.attention_probs):
        avg = probs[example].mean(axis=0)  # [T, T+1], averaged over heads
        t = avg.shape[0]
        for q in range(t):
            if not flags[q]:
                continue
            # key 0 is the virtual token; text token i sits at key i+2
            # (key 1 is the [CLS] position of the sequence itself)
            row = [float(avg[q, 0])]
            for i in range(token_window):
                key = i + 2
                row.append(float(avg[q, key]) if key < t + 1 else 0.0)
            records.append({"layer": layer, "query_token": q, "columns": columns, "probs": row})
    return records


def save_attention_report(records: list[dict], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def mean_virtual_token_attention(acts: LayerActivations) -> float:
    """Mean probability mass on the virtual token, over layers, heads, and
    real (non-padding) query positions of every example."""
    flags = acts.token_flags.astype(bool)
    vals = []
    for probs in acts.attention_probs:
        ncls = probs[:, :, :, 0]  # [B, h, T]
        sel = np.broadcast_to(flags[:, None, :], ncls.shape)
        vals.append(ncls[sel])
    return float(np.concatenate(vals).mean())
