"""Transformer encoder with position-space and vocabulary-space heads.

The encoder is BERT-shaped: summed token/position/segment embeddings, L
post-norm self-attention blocks, then a shared dense+GELU+layer-norm head
transform feeding either logits over input positions (dot product with the
sequence encoding plus a per-position bias) or logits over the vocabulary
(tied to the token embedding table).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import PerLMInstance
from .errors import ConfigurationError, DimensionError, InstanceCorruptionError

NEG_INF = -1e9  # additive mask; exp() underflows to exactly zero


@dataclass
class ModelConfig:
    layers: int = 12
    heads: int = 12
    hidden: int = 768
    ffn_dim: int = 3072
    vocab: int = 21128
    max_positions: int = 512
    type_vocab: int = 2
    dropout_rate: float = 0.1
    attention_dropout_rate: float = 0.1
    layer_norm_eps: float = 1e-12
    initializer_range: float = 0.02

    def __post_init__(self):
        dims = (self.layers, self.heads, self.hidden, self.ffn_dim, self.vocab,
                self.max_positions, self.type_vocab)
        if self.layers < 0 or any(d <= 0 for d in dims[1:]):
            raise ConfigurationError(f"model dimensions must be positive: {dims}")
        if self.hidden % self.heads:
            raise ConfigurationError(
                f"hidden {self.hidden} not divisible by heads {self.heads}")


@dataclass
class EncoderState:
    """All learned parameters, keyed by dotted names."""

    config: ModelConfig
    params: dict[str, Tensor] = field(default_factory=dict)

    def clone(self) -> "EncoderState":
        out = EncoderState(config=replace(self.config))
        for name, p in self.params.items():
            out.params[name] = Tensor(p.data.copy(), requires_grad=True)
        return out

    def zero_grads(self) -> None:
        for p in self.params.values():
            p.grad = None

    def grads(self) -> dict[str, np.ndarray]:
        return {name: p.grad for name, p in self.params.items()
                if p.grad is not None}


def truncated_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2.0 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2.0 * std
    return out


def init_encoder_state(config: ModelConfig, rng: np.random.Generator) -> EncoderState:
    std = config.initializer_range
    d, ffn = config.hidden, config.ffn_dim
    params: dict[str, np.ndarray] = {
        "embeddings.token": truncated_normal(rng, (config.vocab, d), std),
        "embeddings.position": truncated_normal(rng, (config.max_positions, d), std),
        "embeddings.segment": truncated_normal(rng, (config.type_vocab, d), std),
        "embeddings.norm.gain": np.ones(d),
        "embeddings.norm.bias": np.zeros(d),
    }
    for i in range(config.layers):
        for proj in ("query", "key", "value", "output"):
            params[f"layer{i}.attn.{proj}.weight"] = truncated_normal(rng, (d, d), std)
            params[f"layer{i}.attn.{proj}.bias"] = np.zeros(d)
        params[f"layer{i}.attn.norm.gain"] = np.ones(d)
        params[f"layer{i}.attn.norm.bias"] = np.zeros(d)
        params[f"layer{i}.ffn.inner.weight"] = truncated_normal(rng, (d, ffn), std)
        params[f"layer{i}.ffn.inner.bias"] = np.zeros(ffn)
        params[f"layer{i}.ffn.outer.weight"] = truncated_normal(rng, (ffn, d), std)
        params[f"layer{i}.ffn.outer.bias"] = np.zeros(d)
        params[f"layer{i}.ffn.norm.gain"] = np.ones(d)
        params[f"layer{i}.ffn.norm.bias"] = np.zeros(d)
    params["head.transform.weight"] = truncated_normal(rng, (d, d), std)
    params["head.transform.bias"] = np.zeros(d)
    params["head.norm.gain"] = np.ones(d)
    params["head.norm.bias"] = np.zeros(d)
    params["head.position_bias"] = np.zeros(config.max_positions)
    params["head.vocab_bias"] = np.zeros(config.vocab)
    state = EncoderState(config=config)
    state.params = {k: Tensor(v, requires_grad=True) for k, v in params.items()}
    return state


def _check_ids(ids, limit: int, what: str) -> np.ndarray:
    arr = np.asarray(ids, dtype=np.intp)
    if arr.size and (arr.min() < 0 or arr.max() >= limit):
        raise IndexError(f"{what} id out of range [0, {limit})")
    return arr


def embed(state: EncoderState, input_ids, segment_ids, *,
          rng: np.random.Generator | None = None, training: bool = False) -> Tensor:
    """Summed token/position/segment embeddings, normalized and dropped out."""
    config = state.config
    p = state.params
    ids = _check_ids(input_ids, config.vocab, "token")
    segs = _check_ids(segment_ids, config.type_vocab, "segment")
    n = len(ids)
    if n > config.max_positions:
        raise IndexError(
            f"sequence length {n} exceeds max_positions {config.max_positions}")
    if len(segs) != n:
        raise DimensionError(f"{n} tokens but {len(segs)} segment ids")
    h = ad.gather_rows(p["embeddings.token"], ids)
    h = h + ad.narrow(p["embeddings.position"], 0, 0, n)
    h = h + ad.gather_rows(p["embeddings.segment"], segs)
    h = ad.layer_norm(h, p["embeddings.norm.gain"], p["embeddings.norm.bias"],
                      eps=config.layer_norm_eps)
    return ad.dropout(h, config.dropout_rate, rng, training)


def _attention_mask(pad_mask) -> Tensor:
    """Additive (1, N) row: 0 on real positions, a large negative on pads."""
    row = np.where(np.asarray(pad_mask, dtype=bool), NEG_INF, 0.0)
    return Tensor(row[None, :])


def encode(state: EncoderState, hidden: Tensor, pad_mask, *,
           rng: np.random.Generator | None = None, training: bool = False) -> Tensor:
    """Run the L-layer self-attention stack; pads are masked out of attention."""
    config = state.config
    p = state.params
    n = hidden.shape[0]
    if len(pad_mask) != n:
        raise DimensionError(f"pad_mask length {len(pad_mask)} != sequence {n}")
    mask = _attention_mask(pad_mask)
    head_dim = config.hidden // config.heads
    scale = 1.0 / math.sqrt(head_dim)
    x = hidden
    for i in range(config.layers):
        q = ad.matmul(x, p[f"layer{i}.attn.query.weight"]) + p[f"layer{i}.attn.query.bias"]
        k = ad.matmul(x, p[f"layer{i}.attn.key.weight"]) + p[f"layer{i}.attn.key.bias"]
        v = ad.matmul(x, p[f"layer{i}.attn.value.weight"]) + p[f"layer{i}.attn.value.bias"]
        contexts = []
        for h in range(config.heads):
            lo = h * head_dim
            qh = ad.narrow(q, 1, lo, head_dim)
            kh = ad.narrow(k, 1, lo, head_dim)
            vh = ad.narrow(v, 1, lo, head_dim)
            scores = ad.matmul(qh, ad.transpose(kh)) * scale
            probs = ad.softmax(scores + mask, axis=-1)
            probs = ad.dropout(probs, config.attention_dropout_rate, rng, training)
            contexts.append(ad.matmul(probs, vh))
        attn = ad.concat(contexts, axis=1) if config.heads > 1 else contexts[0]
        attn = ad.matmul(attn, p[f"layer{i}.attn.output.weight"]) \
            + p[f"layer{i}.attn.output.bias"]
        attn = ad.dropout(attn, config.dropout_rate, rng, training)
        x = ad.layer_norm(x + attn, p[f"layer{i}.attn.norm.gain"],
                          p[f"layer{i}.attn.norm.bias"], eps=config.layer_norm_eps)
        inner = ad.gelu(ad.matmul(x, p[f"layer{i}.ffn.inner.weight"])
                        + p[f"layer{i}.ffn.inner.bias"])
        outer = ad.matmul(inner, p[f"layer{i}.ffn.outer.weight"]) \
            + p[f"layer{i}.ffn.outer.bias"]
        outer = ad.dropout(outer, config.dropout_rate, rng, training)
        x = ad.layer_norm(x + outer, p[f"layer{i}.ffn.norm.gain"],
                          p[f"layer{i}.ffn.norm.bias"], eps=config.layer_norm_eps)
    return x


def encoder_forward(state: EncoderState, input_ids, segment_ids, pad_mask, *,
                    rng: np.random.Generator | None = None,
                    training: bool = False) -> Tensor:
    h0 = embed(state, input_ids, segment_ids, rng=rng, training=training)
    return encode(state, h0, pad_mask, rng=rng, training=training)


def head_transform(state: EncoderState, hidden: Tensor, pred_positions, *,
                   rng: np.random.Generator | None = None,
                   training: bool = False) -> Tensor:
    """Dense+GELU+dropout+layer-norm applied to the gathered prediction rows.

    Shared by the position-space and vocabulary-space heads.
    """
    config = state.config
    p = state.params
    rows = ad.gather_rows(hidden, pred_positions)
    t = ad.gelu(ad.matmul(rows, p["head.transform.weight"]) + p["head.transform.bias"])
    t = ad.dropout(t, config.dropout_rate, rng, training)
    return ad.layer_norm(t, p["head.norm.gain"], p["head.norm.bias"],
                         eps=config.layer_norm_eps)


def local_position_logits(state: EncoderState, hidden: Tensor, transformed: Tensor,
                          pad_mask) -> Tensor:
    """Logits over input positions: scaled dot with the sequence encoding.

    The dot product is scaled by 1/sqrt(hidden) so that a freshly
    initialized model is close to uniform over the real positions; pad
    columns receive a large negative additive mask.
    """
    p = state.params
    n = hidden.shape[0]
    logits = ad.matmul(transformed, ad.transpose(hidden))
    logits = logits * (1.0 / math.sqrt(state.config.hidden))
    logits = logits + ad.narrow(p["head.position_bias"], 0, 0, n)
    pad_row = np.where(np.asarray(pad_mask, dtype=bool), NEG_INF, 0.0)
    return logits + Tensor(pad_row)


def global_vocab_logits(state: EncoderState, transformed: Tensor) -> Tensor:
    """Logits over the vocabulary via the tied token-embedding projection."""
    p = state.params
    logits = ad.matmul(transformed, ad.transpose(p["embeddings.token"]))
    return logits + p["head.vocab_bias"]


def instance_outputs(state: EncoderState, instance: PerLMInstance, mode: str, *,
                     rng: np.random.Generator | None = None,
                     training: bool = False) -> dict:
    """Forward pass for one instance; returns logits tensors per active head."""
    if mode not in ("local", "global", "local+global"):
        raise ConfigurationError(f"unknown prediction mode {mode!r}")
    for p, t in zip(instance.pred_positions, instance.position_targets):
        if instance.pad_mask[p] or instance.pad_mask[t]:
            raise InstanceCorruptionError(
                f"prediction {p}->{t} touches a pad position")
    hidden = encoder_forward(state, instance.input_ids, instance.segment_ids,
                             instance.pad_mask, rng=rng, training=training)
    out = {"hidden": hidden, "rows": len(instance.pred_positions)}
    if not instance.pred_positions:
        return out
    transformed = head_transform(state, hidden, instance.pred_positions,
                                 rng=rng, training=training)
    if mode in ("local", "local+global"):
        out["local_logits"] = local_position_logits(
            state, hidden, transformed, instance.pad_mask)
    if mode in ("global", "local+global"):
        out["global_logits"] = global_vocab_logits(state, transformed)
    return out


def instance_loss(state: EncoderState, instance: PerLMInstance, mode: str, *,
                  rng: np.random.Generator | None = None,
                  training: bool = False) -> tuple[Tensor, dict]:
    """Loss for one instance plus argmax-accuracy counts.

    local and local+global report position-target accuracy; global reports
    vocabulary-target accuracy. local+global is the unweighted sum of both
    cross-entropies.
    """
    outputs = instance_outputs(state, instance, mode, rng=rng, training=training)
    rows = outputs["rows"]
    counts = {"rows": rows, "correct": 0}
    if rows == 0:
        return Tensor(0.0), counts
    loss = None
    if "local_logits" in outputs:
        local = ad.cross_entropy(outputs["local_logits"], instance.position_targets)
        loss = local if loss is None else loss + local
        counts["correct"] = int(np.sum(
            outputs["local_logits"].data.argmax(axis=1)
            == np.asarray(instance.position_targets)))
    if "global_logits" in outputs:
        glob = ad.cross_entropy(outputs["global_logits"], instance.vocab_targets)
        loss = glob if loss is None else loss + glob
        if mode == "global":
            counts["correct"] = int(np.sum(
                outputs["global_logits"].data.argmax(axis=1)
                == np.asarray(instance.vocab_targets)))
    return loss, counts


def batch_loss(state: EncoderState, instances, mode: str, *,
               rng: np.random.Generator | None = None,
               training: bool = False) -> tuple[Tensor, dict]:
    """Row-weighted mean loss over a batch (flat mean over prediction rows)."""
    total_rows = sum(len(i.pred_positions) for i in instances)
    counts = {"rows": total_rows, "correct": 0}
    if total_rows == 0:
        return Tensor(0.0), counts
    loss = None
    for instance in instances:
        part, c = instance_loss(state, instance, mode, rng=rng, training=training)
        if c["rows"] == 0:
            continue
        weighted = part * (c["rows"] / total_rows)
        loss = weighted if loss is None else loss + weighted
        counts["correct"] += c["correct"]
    return loss, counts


def packed_encoder_forward(state: EncoderState, input_ids: np.ndarray,
                           segment_ids: np.ndarray, pad_mask: np.ndarray, *,
                           rng: np.random.Generator | None = None,
                           training: bool = False) -> Tensor:
    """Encoder over a (batch, n) stack of sequences; returns (batch*n, d).

    Position embeddings restart per row and attention is masked per row, so
    this matches running encoder_forward on each sequence independently.
    """
    config = state.config
    p = state.params
    batch, n = input_ids.shape
    if n > config.max_positions:
        raise IndexError(
            f"sequence length {n} exceeds max_positions {config.max_positions}")
    ids = _check_ids(input_ids.reshape(-1), config.vocab, "token")
    segs = _check_ids(segment_ids.reshape(-1), config.type_vocab, "segment")
    pad = pad_mask.reshape(-1).astype(bool)

    pos_index = np.tile(np.arange(n), batch)
    h = ad.gather_rows(p["embeddings.token"], ids)
    h = h + ad.gather_rows(p["embeddings.position"], pos_index)
    h = h + ad.gather_rows(p["embeddings.segment"], segs)
    h = ad.layer_norm(h, p["embeddings.norm.gain"], p["embeddings.norm.bias"],
                      eps=config.layer_norm_eps)
    h = ad.dropout(h, config.dropout_rate, rng, training)

    key_mask = Tensor(np.where(pad.reshape(batch, 1, n), NEG_INF, 0.0))
    head_dim = config.hidden // config.heads
    scale = 1.0 / math.sqrt(head_dim)
    x = h.reshape((batch, n, config.hidden))
    for i in range(config.layers):
        q = ad.matmul(x, p[f"layer{i}.attn.query.weight"]) + p[f"layer{i}.attn.query.bias"]
        k = ad.matmul(x, p[f"layer{i}.attn.key.weight"]) + p[f"layer{i}.attn.key.bias"]
        v = ad.matmul(x, p[f"layer{i}.attn.value.weight"]) + p[f"layer{i}.attn.value.bias"]
        contexts = []
        for hd in range(config.heads):
            lo = hd * head_dim
            qh = ad.narrow(q, 2, lo, head_dim)
            kh = ad.narrow(k, 2, lo, head_dim)
            vh = ad.narrow(v, 2, lo, head_dim)
            scores = ad.matmul(qh, ad.transpose(kh)) * scale
            probs = ad.softmax(scores + key_mask, axis=-1)
            probs = ad.dropout(probs, config.attention_dropout_rate, rng, training)
            contexts.append(ad.matmul(probs, vh))
        attn = ad.concat(contexts, axis=2) if config.heads > 1 else contexts[0]
        attn = ad.matmul(attn, p[f"layer{i}.attn.output.weight"]) \
            + p[f"layer{i}.attn.output.bias"]
        attn = ad.dropout(attn, config.dropout_rate, rng, training)
        x = ad.layer_norm(x + attn, p[f"layer{i}.attn.norm.gain"],
                          p[f"layer{i}.attn.norm.bias"], eps=config.layer_norm_eps)
        inner = ad.gelu(ad.matmul(x, p[f"layer{i}.ffn.inner.weight"])
                        + p[f"layer{i}.ffn.inner.bias"])
        outer = ad.matmul(inner, p[f"layer{i}.ffn.outer.weight"]) \
            + p[f"layer{i}.ffn.outer.bias"]
        outer = ad.dropout(outer, config.dropout_rate, rng, training)
        x = ad.layer_norm(x + outer, p[f"layer{i}.ffn.norm.gain"],
                          p[f"layer{i}.ffn.norm.bias"], eps=config.layer_norm_eps)
    return x.reshape((batch * n, config.hidden))


def packed_batch_loss(state: EncoderState, instances, mode: str, *,
                      rng: np.random.Generator | None = None,
                      training: bool = False) -> tuple[Tensor, dict]:
    """Same objective as batch_loss, computed as one packed graph.

    Equivalent to batch_loss up to float summation order; dropout consumes
    a different (still deterministic) random stream.
    """
    if mode not in ("local", "global", "local+global"):
        raise ConfigurationError(f"unknown prediction mode {mode!r}")
    if not instances:
        return Tensor(0.0), {"rows": 0, "correct": 0}
    config = state.config
    p = state.params
    n = len(instances[0].input_ids)
    if any(len(i.input_ids) != n for i in instances):
        raise DimensionError("packed batch requires equal instance lengths")
    batch = len(instances)
    total = batch * n
    pad = np.asarray([i.pad_mask for i in instances], dtype=bool)
    block = np.repeat(np.arange(batch), n)
    pos_index = np.tile(np.arange(n), batch)

    x = packed_encoder_forward(
        state,
        np.asarray([i.input_ids for i in instances]),
        np.asarray([i.segment_ids for i in instances]),
        pad, rng=rng, training=training)
    pad = pad.reshape(-1)

    flat_pred, flat_pos_targets, flat_vocab_targets, row_block = [], [], [], []
    for b, instance in enumerate(instances):
        for pp, pt in zip(instance.pred_positions, instance.position_targets):
            if instance.pad_mask[pp] or instance.pad_mask[pt]:
                raise InstanceCorruptionError(
                    f"prediction {pp}->{pt} touches a pad position")
            flat_pred.append(b * n + pp)
            flat_pos_targets.append(b * n + pt)
            row_block.append(b)
        flat_vocab_targets.extend(instance.vocab_targets)
    rows = len(flat_pred)
    counts = {"rows": rows, "correct": 0}
    if rows == 0:
        return Tensor(0.0), counts

    transformed = head_transform(state, x, flat_pred, rng=rng, training=training)
    loss = None
    if mode in ("local", "local+global"):
        logits = ad.matmul(transformed, ad.transpose(x))
        logits = logits * (1.0 / math.sqrt(config.hidden))
        bias_col = ad.gather_rows(p["head.position_bias"].reshape((-1, 1)),
                                  pos_index)
        logits = logits + bias_col.reshape((total,))
        row_ok = (np.asarray(row_block)[:, None] == block[None, :]) & ~pad[None, :]
        logits = logits + Tensor(np.where(row_ok, 0.0, NEG_INF))
        local = ad.cross_entropy(logits, flat_pos_targets)
        loss = local if loss is None else loss + local
        counts["correct"] = int(np.sum(
            logits.data.argmax(axis=1) == np.asarray(flat_pos_targets)))
    if mode in ("global", "local+global"):
        logits = global_vocab_logits(state, transformed)
        glob = ad.cross_entropy(logits, flat_vocab_targets)
        loss = glob if loss is None else loss + glob
        if mode == "global":
            counts["correct"] = int(np.sum(
                logits.data.argmax(axis=1) == np.asarray(flat_vocab_targets)))
    return loss, counts
