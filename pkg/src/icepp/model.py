"""Transformer that reads a context of event sequences and emits per-mark
intensity parameters for any history prefix.

Three stacks: a per-sequence encoder whose prepended summary token becomes the
sequence's summary vector, a cross-sequence encoder over those summaries (no
positional encoding, so the context is a set), and a causal decoder that
cross-attends to the context representation. A shared two-layer head maps each
decoder position to softplus-positive (mu, alpha, beta) per mark.

All times inside the network are normalized by the context's mean inter-event
gap; intensities de-normalize as lambda_orig(t) = lambda_norm(t/s) / s.
"""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, DataError
from .hawkes import EventSequence
from .ioutil import atomic_write_bytes
from .likelihood import IntensityParams, sequence_nll_graph
from .tensor import Tensor, softplus_inverse

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "icepp-checkpoint-v1"

DT_DIM = 16
MARK_DIM = 16
TIME_DIM = 32  # 16 sin + 16 cos pairs


@dataclass
class ModelConfig:
    d_model: int = 64
    n_heads: int = 4
    n_layers_seq_encoder: int = 2
    n_layers_cross_encoder: int = 2
    n_layers_decoder: int = 2
    d_ff: int = 128
    max_marks: int = 8
    max_events: int = 256
    share_event_embedding: bool = True

    def __post_init__(self):
        counts = (
            self.d_model,
            self.n_heads,
            self.n_layers_seq_encoder,
            self.n_layers_cross_encoder,
            self.n_layers_decoder,
            self.d_ff,
            self.max_marks,
            self.max_events,
        )
        if any(c < 1 for c in counts):
            raise ConfigError("all model dimensions must be >= 1")
        if self.d_model % self.n_heads:
            raise ConfigError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}"
            )

    def to_dict(self) -> dict:
        return {
            "d_model": self.d_model,
            "n_heads": self.n_heads,
            "n_layers_seq_encoder": self.n_layers_seq_encoder,
            "n_layers_cross_encoder": self.n_layers_cross_encoder,
            "n_layers_decoder": self.n_layers_decoder,
            "d_ff": self.d_ff,
            "max_marks": self.max_marks,
            "max_events": self.max_events,
            "share_event_embedding": self.share_event_embedding,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def _attention_names(prefix):
    names = []
    for p in ("q", "k", "v", "o"):
        names += [f"{prefix}/{p}_w", f"{prefix}/{p}_b"]
    return names


def _layer_shapes(prefix: str, cfg: ModelConfig, cross: bool) -> dict:
    d, ff = cfg.d_model, cfg.d_ff
    shapes = {
        f"{prefix}/ln1_g": (d,),
        f"{prefix}/ln1_b": (d,),
    }
    for p in ("q", "k", "v", "o"):
        shapes[f"{prefix}/{p}_w"] = (d, d)
        shapes[f"{prefix}/{p}_b"] = (1, d)
    if cross:
        shapes[f"{prefix}/lnx_g"] = (d,)
        shapes[f"{prefix}/lnx_b"] = (d,)
        for p in ("q", "k", "v", "o"):
            shapes[f"{prefix}/x{p}_w"] = (d, d)
            shapes[f"{prefix}/x{p}_b"] = (1, d)
    shapes.update(
        {
            f"{prefix}/ln2_g": (d,),
            f"{prefix}/ln2_b": (d,),
            f"{prefix}/ff1_w": (d, ff),
            f"{prefix}/ff1_b": (1, ff),
            f"{prefix}/ff2_w": (ff, d),
            f"{prefix}/ff2_b": (1, d),
        }
    )
    return shapes


def _embedding_shapes(prefix: str, cfg: ModelConfig) -> dict:
    feat = DT_DIM + MARK_DIM + TIME_DIM
    return {
        f"{prefix}/w_dt": (1, DT_DIM),
        f"{prefix}/mark": (cfg.max_marks, MARK_DIM),
        f"{prefix}/w_mix": (feat, cfg.d_model),
        f"{prefix}/b_mix": (1, cfg.d_model),
        f"{prefix}/summary": (1, cfg.d_model),
    }


def weight_shapes(cfg: ModelConfig) -> dict:
    """Ordered name -> shape map of every learnable array."""
    d = cfg.d_model
    shapes = dict(_embedding_shapes("emb", cfg))
    if not cfg.share_event_embedding:
        shapes.update(_embedding_shapes("dec_emb", cfg))
    for i in range(cfg.n_layers_seq_encoder):
        shapes.update(_layer_shapes(f"enc{i}", cfg, cross=False))
    shapes.update({"enc_final/ln_g": (d,), "enc_final/ln_b": (d,)})
    for i in range(cfg.n_layers_cross_encoder):
        shapes.update(_layer_shapes(f"ctx{i}", cfg, cross=False))
    shapes.update({"ctx_final/ln_g": (d,), "ctx_final/ln_b": (d,)})
    for i in range(cfg.n_layers_decoder):
        shapes.update(_layer_shapes(f"dec{i}", cfg, cross=True))
    shapes.update({"dec_final/ln_g": (d,), "dec_final/ln_b": (d,)})
    shapes.update(
        {
            "head/w1": (d, d),
            "head/b1": (1, d),
            "head/w2": (d, 3 * cfg.max_marks),
            "head/b2": (1, 3 * cfg.max_marks),
        }
    )
    return shapes


class ModelWeights:
    """Named map of float64 arrays; the single source of truth for a model."""

    def __init__(self, config: ModelConfig, arrays: dict):
        expected = weight_shapes(config)
        if set(arrays) != set(expected):
            missing = sorted(set(expected) - set(arrays))
            extra = sorted(set(arrays) - set(expected))
            raise ContractError(f"weight names mismatch: missing={missing} extra={extra}")
        self.config = config
        self.arrays = {}
        for name in expected:
            arr = np.asarray(arrays[name], dtype=np.float64)
            if arr.shape != expected[name]:
                raise ContractError(
                    f"{name}: shape {arr.shape} != expected {expected[name]}"
                )
            if arr.size and not np.isfinite(arr).all():
                raise ContractError(f"{name}: non-finite entries")
            self.arrays[name] = arr

    @classmethod
    def init(cls, config: ModelConfig, seed: int = 0) -> "ModelWeights":
        """Scaled uniform fan-in init; zero biases and unit norm gains; the
        head output bias starts at softplus^-1(1) so initial intensities sit
        near 1 in normalized time."""
        rng = np.random.default_rng(seed)
        arrays = {}
        for name, shape in weight_shapes(config).items():
            leaf = name.rsplit("/", 1)[1]
            if leaf.endswith("_g") or leaf == "ln_g":
                arrays[name] = np.ones(shape)
            elif leaf.endswith("_b") or leaf == "ln_b":
                arrays[name] = np.zeros(shape)
            elif leaf in ("mark", "summary"):
                bound = 1.0 / math.sqrt(shape[-1])
                arrays[name] = rng.uniform(-bound, bound, shape)
            else:
                bound = 1.0 / math.sqrt(shape[0])
                arrays[name] = rng.uniform(-bound, bound, shape)
        arrays["head/b2"] = np.full((1, 3 * config.max_marks), softplus_inverse(1.0))
        return cls(config, arrays)

    def num_params(self) -> int:
        return sum(a.size for a in self.arrays.values())

    def as_tensors(self, tape: Optional[T.Tape] = None) -> dict:
        if tape is None:
            return {k: Tensor.const(v) for k, v in self.arrays.items()}
        return {k: tape.leaf(v) for k, v in self.arrays.items()}

    def copy(self) -> "ModelWeights":
        return ModelWeights(self.config, {k: v.copy() for k, v in self.arrays.items()})

    def save(self, path: str, extra: Optional[dict] = None):
        save_checkpoint(path, self.arrays, self.config, kind="weights", extra=extra)

    @classmethod
    def load(cls, path: str) -> "ModelWeights":
        arrays, config, kind, _ = load_checkpoint(path)
        if kind != "weights":
            arrays = {
                k.removeprefix("weights/"): v
                for k, v in arrays.items()
                if k.startswith("weights/")
            }
        return cls(config, arrays)


# ---------------------------------------------------------------------------
# checkpoint container: manifest JSON + flat little-endian float64 binary


def save_checkpoint(path: str, arrays: dict, config: ModelConfig, kind: str, extra=None):
    names = list(arrays)
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "kind": kind,
        "config": config.to_dict(),
        "extra": extra or {},
        "tensors": [],
    }
    offset = 0
    blobs = []
    for name in names:
        arr = np.ascontiguousarray(arrays[name], dtype="<f8")
        manifest["tensors"].append(
            {"name": name, "shape": list(arr.shape), "offset": offset, "size": arr.size}
        )
        blobs.append(arr.tobytes())
        offset += arr.size
    atomic_write_bytes(path + ".bin", b"".join(blobs))
    atomic_write_bytes(
        path + ".json", (json.dumps(manifest, sort_keys=True, indent=1) + "\n").encode()
    )


def load_checkpoint(path: str):
    """Returns (arrays, config, kind, extra)."""
    try:
        with open(path + ".json", "rb") as fh:
            manifest = json.loads(fh.read())
    except FileNotFoundError:
        raise DataError(f"no checkpoint manifest at {path}.json") from None
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise DataError(
            f"unsupported checkpoint format {manifest.get('format')!r} at {path}.json"
        )
    with open(path + ".bin", "rb") as fh:
        flat = np.frombuffer(fh.read(), dtype="<f8")
    arrays = {}
    for entry in manifest["tensors"]:
        start, size = entry["offset"], entry["size"]
        if start + size > flat.size:
            raise DataError(f"checkpoint binary truncated at tensor {entry['name']}")
        arrays[entry["name"]] = (
            flat[start : start + size].astype(np.float64).reshape(entry["shape"])
        )
    config = ModelConfig.from_dict(manifest["config"])
    return arrays, config, manifest["kind"], manifest.get("extra", {})


# ---------------------------------------------------------------------------
# batches and embeddings


def context_time_scale(context: list) -> float:
    """Mean inter-event gap pooled over the context; 1 if there are no events."""
    gaps = np.concatenate([seq.gaps() for seq in context]) if context else np.empty(0)
    if not len(gaps):
        return 1.0
    return float(gaps.mean())


@dataclass
class ContextBatch:
    context: list
    target: EventSequence
    time_scale: float = field(default=0.0)

    def __post_init__(self):
        if len(self.context) < 1:
            raise ContractError("a batch needs at least one context sequence")
        Ks = {seq.num_marks for seq in self.context} | {self.target.num_marks}
        if len(Ks) != 1:
            raise ContractError(f"sequences disagree on num_marks: {sorted(Ks)}")
        if self.time_scale <= 0.0:
            self.time_scale = context_time_scale(self.context)

    @property
    def num_marks(self) -> int:
        return self.target.num_marks


@dataclass
class HistoryEmbedding:
    vector: Tensor  # kept as a (1, d_model) row for downstream matmuls
    history_length: int
    last_event_time: float  # normalized units

    def as_array(self) -> np.ndarray:
        return self.vector.data[0].copy()


def _time_encoding(ts_norm: np.ndarray) -> np.ndarray:
    half = TIME_DIM // 2
    inv_freq = 1.0 / (10_000.0 ** (np.arange(half) / half))
    ang = np.outer(ts_norm, inv_freq)
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def _truncate(seq: EventSequence, max_events: int):
    """Keep the most recent max_events events; returns (times, marks, start)."""
    n = len(seq)
    if n <= max_events:
        return seq.times, seq.marks, 0.0
    drop = n - max_events
    log.warning(
        "sequence with %d events truncated to the most recent %d", n, max_events
    )
    return seq.times[drop:], seq.marks[drop:], float(seq.times[drop - 1])


def _linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return T.affine(x, w, b)


def embed_sequence(
    seq: EventSequence, wt: dict, time_scale: float, cfg: ModelConfig, prefix: str = "emb"
) -> Tensor:
    """Per-event features mixed to d_model, with a learned summary token at
    row 0. Returns an (n+1, d_model) tensor."""
    if seq.num_marks > cfg.max_marks:
        raise ContractError(
            f"sequence has {seq.num_marks} marks, model caps at {cfg.max_marks}"
        )
    times, marks, start = _truncate(seq, cfg.max_events)
    s = time_scale
    n = len(times)
    gaps = np.diff(np.concatenate([[start], times]))
    dt_col = Tensor.const(np.log1p(gaps / s)[:, None])
    onehot = np.zeros((n, cfg.max_marks))
    if n:
        onehot[np.arange(n), marks] = 1.0
    feats = T.concat(
        [
            T.matmul(dt_col, wt[f"{prefix}/w_dt"]),
            T.matmul(Tensor.const(onehot), wt[f"{prefix}/mark"]),
            Tensor.const(_time_encoding(times / s)),
        ],
        axis=1,
    )
    mixed = _linear(feats, wt[f"{prefix}/w_mix"], wt[f"{prefix}/b_mix"])
    return T.concat([wt[f"{prefix}/summary"], mixed], axis=0)


def _attention(x: Tensor, kv: Tensor, wt: dict, prefix: str, cfg: ModelConfig, mask=None) -> Tensor:
    """Multi-head scaled dot-product attention of x's rows over kv's rows."""
    q = _linear(x, wt[f"{prefix}q_w"], wt[f"{prefix}q_b"])
    k = _linear(kv, wt[f"{prefix}k_w"], wt[f"{prefix}k_b"])
    v = _linear(kv, wt[f"{prefix}v_w"], wt[f"{prefix}v_b"])
    dh = cfg.d_model // cfg.n_heads
    heads = []
    for h in range(cfg.n_heads):
        lo, hi = h * dh, (h + 1) * dh
        qh = T.slice_axis(q, 1, lo, hi)
        kh = T.slice_axis(k, 1, lo, hi)
        vh = T.slice_axis(v, 1, lo, hi)
        scores = T.scale(T.matmul(qh, T.transpose(kh)), 1.0 / math.sqrt(dh))
        attn = T.softmax_lastdim(scores, mask)
        heads.append(T.matmul(attn, vh))
    return _linear(T.concat(heads, axis=1), wt[f"{prefix}o_w"], wt[f"{prefix}o_b"])


def _feed_forward(x: Tensor, wt: dict, prefix: str) -> Tensor:
    hidden = T.softplus(_linear(x, wt[f"{prefix}/ff1_w"], wt[f"{prefix}/ff1_b"]))
    return _linear(hidden, wt[f"{prefix}/ff2_w"], wt[f"{prefix}/ff2_b"])


def _norm(x: Tensor, wt: dict, name: str) -> Tensor:
    return T.layer_norm(x, wt[f"{name}_g"], wt[f"{name}_b"])


def _encoder_layer(x: Tensor, wt: dict, prefix: str, cfg: ModelConfig, mask=None) -> Tensor:
    y = _norm(x, wt, f"{prefix}/ln1")
    x = T.add(x, _attention(y, y, wt, f"{prefix}/", cfg, mask))
    return T.add(x, _feed_forward(_norm(x, wt, f"{prefix}/ln2"), wt, prefix))


def _decoder_layer(x: Tensor, memory: Tensor, wt: dict, prefix: str, cfg: ModelConfig, causal) -> Tensor:
    y = _norm(x, wt, f"{prefix}/ln1")
    x = T.add(x, _attention(y, y, wt, f"{prefix}/", cfg, causal))
    y = _norm(x, wt, f"{prefix}/lnx")
    x = T.add(x, _attention(y, memory, wt, f"{prefix}/x", cfg))
    return T.add(x, _feed_forward(_norm(x, wt, f"{prefix}/ln2"), wt, prefix))


def _causal_mask(n: int) -> np.ndarray:
    return np.tril(np.ones((n, n), dtype=bool))


def encode_sequence_summary(seq, wt, time_scale, cfg) -> Tensor:
    x = embed_sequence(seq, wt, time_scale, cfg)
    for i in range(cfg.n_layers_seq_encoder):
        x = _encoder_layer(x, wt, f"enc{i}", cfg)
    x = _norm(x, wt, "enc_final/ln")
    return T.slice_axis(x, 0, 0, 1)  # the summary token's row


def _cross_encode(summaries: list, wt: dict, cfg: ModelConfig) -> Tensor:
    x = T.concat(summaries, axis=0)
    for i in range(cfg.n_layers_cross_encoder):
        x = _encoder_layer(x, wt, f"ctx{i}", cfg)
    return _norm(x, wt, "ctx_final/ln")


def encode_context(batch: ContextBatch, wt: dict, cfg: ModelConfig) -> Tensor:
    """(m, d_model) context representation; row order follows the context list
    but carries no positional information."""
    summaries = [
        encode_sequence_summary(seq, wt, batch.time_scale, cfg) for seq in batch.context
    ]
    return _cross_encode(summaries, wt, cfg)


def _decode_positions(history, context_repr, wt, time_scale, cfg) -> Tensor:
    prefix = "emb" if cfg.share_event_embedding else "dec_emb"
    x = embed_sequence(history, wt, time_scale, cfg, prefix=prefix)
    causal = _causal_mask(x.shape[0])
    for i in range(cfg.n_layers_decoder):
        x = _decoder_layer(x, context_repr, wt, f"dec{i}", cfg, causal)
    return _norm(x, wt, "dec_final/ln")


def decode_history(
    history: EventSequence, context_repr: Tensor, wt: dict, time_scale: float, cfg: ModelConfig
) -> HistoryEmbedding:
    """Context-aware embedding of a history prefix (the summary token when
    the history is empty)."""
    x = _decode_positions(history, context_repr, wt, time_scale, cfg)
    n = x.shape[0] - 1
    last = float(history.times[-1]) / time_scale if len(history) else 0.0
    return HistoryEmbedding(T.slice_axis(x, 0, n, n + 1), len(history), last)


def _head(x: Tensor, wt: dict) -> Tensor:
    hidden = T.softplus(_linear(x, wt["head/w1"], wt["head/b1"]))
    return _linear(hidden, wt["head/w2"], wt["head/b2"])


def _param_blocks(raw: Tensor, K_max: int):
    mu = T.softplus(T.slice_axis(raw, 1, 0, K_max))
    alpha = T.softplus(T.slice_axis(raw, 1, K_max, 2 * K_max))
    beta = T.softplus(T.slice_axis(raw, 1, 2 * K_max, 3 * K_max))
    return mu, alpha, beta


def predict_intensity_params(h: HistoryEmbedding, wt: dict, cfg: ModelConfig) -> IntensityParams:
    """(max_marks, 3) softplus-positive triples for one history embedding, in
    normalized time; entries beyond the batch's mark count are ignored
    downstream."""
    raw = _head(h.vector, wt)
    mu, alpha, beta = _param_blocks(raw, cfg.max_marks)
    return IntensityParams(
        h.last_event_time, mu.data[0], alpha.data[0], beta.data[0]
    )


def forward_nll(batch: ContextBatch, weights: ModelWeights, tape: Optional[T.Tape] = None):
    """Scalar NLL tensor of the target given the context, in normalized time.

    Returns (loss, n_events); pass a tape to make the loss differentiable.
    """
    cfg = weights.config
    if batch.num_marks > cfg.max_marks:
        raise ContractError(
            f"batch has {batch.num_marks} marks, model caps at {cfg.max_marks}"
        )
    wt = weights.as_tensors(tape)
    return _forward_nll_with(batch, wt, cfg)


def _forward_nll_with(batch: ContextBatch, wt: dict, cfg: ModelConfig):
    """forward_nll against already-materialized weight tensors (lets a trainer
    share one tape across several rotations of the same instance)."""
    ctx = encode_context(batch, wt, cfg)
    return _nll_against_context(batch.target, ctx, batch.time_scale, batch.num_marks, wt, cfg)


def _nll_against_context(target, ctx, time_scale, num_marks, wt, cfg):
    s = time_scale
    positions = _decode_positions(target, ctx, wt, s, cfg)
    raw = _head(positions, wt)
    mu, alpha, beta = _param_blocks(raw, cfg.max_marks)
    times, marks, start = _truncate(target, cfg.max_events)
    loss = sequence_nll_graph(
        times / s,
        marks,
        target.window_end / s,
        num_marks,
        mu,
        alpha,
        beta,
        start_time=start / s,
    )
    return loss, len(times)


def rotation_losses(seqs: list, targets, wt: dict, cfg: ModelConfig):
    """Losses for several target rotations of one sequence group.

    Each sequence's stack-1 summary is encoded once and shared across
    rotations through the tape; the time scale is the group's pooled mean gap
    (one group, one normalization). Returns [(loss_tensor, n_events), ...].
    """
    K = seqs[0].num_marks
    if K > cfg.max_marks:
        raise ContractError(f"group has {K} marks, model caps at {cfg.max_marks}")
    s = context_time_scale(seqs)
    summaries = [encode_sequence_summary(seq, wt, s, cfg) for seq in seqs]
    out = []
    for t_idx in targets:
        ctx = _cross_encode(
            [summ for i, summ in enumerate(summaries) if i != t_idx], wt, cfg
        )
        out.append(_nll_against_context(seqs[t_idx], ctx, s, K, wt, cfg))
    return out


def interval_params(
    batch: ContextBatch, weights: ModelWeights, denormalize: bool = True
) -> list:
    """Per-interval IntensityParams along the target (n+1 entries), computed
    in one decoder pass; in original time units when denormalize is set."""
    cfg = weights.config
    wt = weights.as_tensors(None)
    s = batch.time_scale
    ctx = encode_context(batch, wt, cfg)
    positions = _decode_positions(batch.target, ctx, wt, s, cfg)
    raw = _head(positions, wt)
    mu, alpha, beta = _param_blocks(raw, cfg.max_marks)
    times, _, start = _truncate(batch.target, cfg.max_events)
    K = batch.num_marks
    edges = np.concatenate([[start], times]) / s
    out = []
    for i, anchor in enumerate(edges):
        p = IntensityParams(
            float(anchor), mu.data[i, :K], alpha.data[i, :K], beta.data[i, :K]
        )
        out.append(p.rescaled(s) if denormalize else p)
    return out
