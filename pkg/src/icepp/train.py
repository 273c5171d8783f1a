"""Pretraining on freshly simulated prior draws, and finetuning on a fixed
dataset with a held-out split.

All per-step randomness is derived from (seed, step) counter streams, so a
single-threaded run is bit-reproducible and checkpoint resume replays the
exact trajectory. Domain tags keep instance sampling, simulation, rotation
choice, and split shuffling on disjoint streams.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import os
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .errors import ConfigError, ExplosionError, NumericalError
from .hawkes import EventSequence, HawkesInstance, PriorConfig, sample_instance, stream_rng
from .model import (
    ContextBatch,
    ModelConfig,
    ModelWeights,
    forward_nll,
    load_checkpoint,
    rotation_losses,
    save_checkpoint,
)
from .simulate import SimulationConfig, simulate_dataset

log = logging.getLogger(__name__)

# stream-domain tags (top bits of the Philox counter index)
_DOM_SIM = 1 << 40
_DOM_ROT = 2 << 40
_DOM_RETRY = 3 << 40
_DOM_SPLIT = 5 << 40
_DOM_BATCH = 6 << 40


@dataclass
class TrainConfig:
    steps: int = 500
    batch_instances: int = 8
    sequences_per_instance: int = 32  # m + 1: rotations use one as target
    rotations_per_instance: int = 4
    learning_rate: float = 3e-4  # peak after warmup, cosine-decayed to 0
    warmup_steps: int = 50
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip_norm: float = 1.0
    checkpoint_every: int = 200
    eval_every: int = 50
    holdout_fraction: float = 0.2
    max_events: int = 10_000
    seed: int = 0
    threads: int = 1

    def __post_init__(self):
        if min(self.batch_instances, self.rotations_per_instance, self.eval_every,
               self.checkpoint_every, self.max_events) < 1:
            raise ConfigError("trainer counts must be >= 1")
        if self.sequences_per_instance < 2:
            raise ConfigError("need at least 2 sequences per instance (context + target)")
        if self.steps < 0:
            raise ConfigError("steps must be >= 0")
        if self.steps and self.warmup_steps >= self.steps:
            raise ConfigError(
                f"warmup_steps {self.warmup_steps} must be < steps {self.steps}"
            )
        if not 0.0 <= self.holdout_fraction < 1.0:
            raise ConfigError("holdout_fraction must be in [0, 1)")

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@dataclass
class TrainState:
    step: int
    weights: ModelWeights
    adam_m: dict
    adam_v: dict
    loss_ema: float = float("nan")

    @classmethod
    def fresh(cls, model_cfg: ModelConfig, seed: int) -> "TrainState":
        w = ModelWeights.init(model_cfg, seed=seed)
        zeros = {k: np.zeros_like(v) for k, v in w.arrays.items()}
        return cls(0, w, zeros, {k: np.zeros_like(v) for k, v in w.arrays.items()})

    def save(self, path: str, train_cfg: Optional[TrainConfig] = None):
        arrays = {}
        for k, v in self.weights.arrays.items():
            arrays[f"weights/{k}"] = v
        for k, v in self.adam_m.items():
            arrays[f"adam_m/{k}"] = v
        for k, v in self.adam_v.items():
            arrays[f"adam_v/{k}"] = v
        extra = {"step": self.step, "loss_ema": self.loss_ema}
        if train_cfg is not None:
            extra["train_config"] = train_cfg.to_dict()
        save_checkpoint(path, arrays, self.weights.config, kind="train_state", extra=extra)

    @classmethod
    def load(cls, path: str) -> "TrainState":
        arrays, config, kind, extra = load_checkpoint(path)
        if kind != "train_state":
            raise ConfigError(f"checkpoint at {path} is '{kind}', not a train state")
        weights = {k.removeprefix("weights/"): v for k, v in arrays.items() if k.startswith("weights/")}
        m = {k.removeprefix("adam_m/"): v for k, v in arrays.items() if k.startswith("adam_m/")}
        v = {k.removeprefix("adam_v/"): v2 for k, v2 in arrays.items() if k.startswith("adam_v/")}
        return cls(int(extra["step"]), ModelWeights(config, weights), m, v, float(extra["loss_ema"]))


def learning_rate_at(cfg: TrainConfig, step: int) -> float:
    """Linear warmup to the peak, then cosine decay to zero at cfg.steps."""
    if cfg.steps == 0:
        return 0.0
    if step < cfg.warmup_steps:
        return cfg.learning_rate * (step + 1) / max(1, cfg.warmup_steps)
    frac = (step - cfg.warmup_steps) / max(1, cfg.steps - cfg.warmup_steps)
    return cfg.learning_rate * 0.5 * (1.0 + math.cos(math.pi * min(1.0, frac)))


def clip_global_norm(grads: dict, max_norm: float):
    """Scale all gradients so their global norm is at most max_norm."""
    sq = sum(float((g * g).sum()) for g in grads.values())
    norm = math.sqrt(sq)
    if norm > max_norm > 0:
        factor = max_norm / norm
        grads = {k: g * factor for k, g in grads.items()}
    return grads, norm


def adam_step(state: TrainState, grads: dict, lr: float, cfg: TrainConfig) -> TrainState:
    """Bias-corrected Adam update in place; global clipping happens first."""
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise NumericalError(f"non-finite gradient for {name}")
    grads, _ = clip_global_norm(grads, cfg.grad_clip_norm)
    state.step += 1
    t = state.step
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    for name, g in grads.items():
        m = state.adam_m[name]
        v = state.adam_v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        state.weights.arrays[name] -= lr * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)
    return state


class _MetricsLog:
    def __init__(self, out_dir: Optional[str]):
        self.path = os.path.join(out_dir, "metrics.csv") if out_dir else None
        self.t0 = time.monotonic()
        if self.path and not os.path.exists(self.path):
            os.makedirs(out_dir, exist_ok=True)
            with open(self.path, "w", newline="") as fh:
                csv.writer(fh).writerow(
                    ["step", "loss_per_event", "grad_norm", "lr", "wall_time", "holdout_nll"]
                )

    def row(self, step, loss, norm, lr, holdout=None):
        if not self.path:
            return
        with open(self.path, "a", newline="") as fh:
            csv.writer(fh).writerow(
                [
                    step,
                    f"{loss:.6f}",
                    f"{norm:.6f}",
                    f"{lr:.3e}",
                    f"{time.monotonic() - self.t0:.2f}",
                    "" if holdout is None else f"{holdout:.6f}",
                ]
            )


def _instance_loss(state, batch_seqs, targets):
    """Mean per-event NLL over the chosen rotations, with one backward pass.

    Stack-1 sequence summaries are shared across rotations through the tape,
    so the expensive per-sequence encodings are paid once per instance.
    """
    tape = T.Tape()
    wt = state.weights.as_tensors(tape)
    cfg = state.weights.config
    total = None
    losses = []
    for loss, n in rotation_losses(batch_seqs, targets, wt, cfg):
        per_event = T.scale(loss, 1.0 / max(1, n))
        losses.append(float(per_event.data))
        total = per_event if total is None else T.add(total, per_event)
    mean_loss = T.scale(total, 1.0 / len(targets))
    grads_by_node = tape.backward(mean_loss)
    grads = {name: grads_by_node[leaf.node] for name, leaf in wt.items()}
    return grads, losses


def _dump_failed_batch(out_dir, step, instances, datasets):
    if not out_dir:
        return "(no out_dir: batch not dumped)"
    from .store import write_dataset

    dump_dir = os.path.join(out_dir, f"abort_step{step}")
    os.makedirs(dump_dir, exist_ok=True)
    seqs, inst_map = [], []
    for inst, group in zip(instances, datasets):
        inst_map.append(inst)
        seqs.extend(group)
    ids = [i for i, group in enumerate(datasets) for _ in group]
    write_dataset(
        os.path.join(dump_dir, "batch.jsonl"), seqs, instances=inst_map, instance_ids=ids
    )
    return dump_dir


def _simulate_instance_group(prior, train_cfg, global_idx):
    """Sample an instance and its m+1 sequences; swap in a fresh draw if the
    simulation explodes (rare tail of the stability heuristic)."""
    sim_cfg = SimulationConfig(
        window_end=prior.window_end, max_events=train_cfg.max_events, seed=train_cfg.seed
    )
    idx = global_idx
    for attempt in range(8):
        inst = sample_instance(prior, idx)
        try:
            seqs = simulate_dataset(
                inst,
                train_cfg.sequences_per_instance,
                sim_cfg,
                threads=train_cfg.threads,
                stream_offset=_DOM_SIM + idx * train_cfg.sequences_per_instance,
            )
            return inst, seqs
        except ExplosionError:
            log.warning("instance %d exploded during simulation; redrawing", idx)
            idx = _DOM_RETRY + global_idx * 8 + attempt
    raise ExplosionError(
        f"repeated explosive draws around instance {global_idx}; "
        "tighten the prior's kernel ranges"
    )


def pretrain(
    prior: PriorConfig,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    out_dir: Optional[str] = None,
    start_state: Optional[TrainState] = None,
    data_groups: Optional[list] = None,
) -> TrainState:
    """Train on fresh prior draws (or on fixed per-instance groups when
    data_groups is given). Resumes from start_state's step counter."""
    state = start_state or TrainState.fresh(model_cfg, train_cfg.seed)
    metrics = _MetricsLog(out_dir)
    ckpt = lambda tag: state.save(os.path.join(out_dir, tag), train_cfg) if out_dir else None
    if state.step == 0:
        ckpt("state_init")
    while state.step < train_cfg.steps:
        step = state.step
        rot_rng = stream_rng(train_cfg.seed, _DOM_ROT + step)
        grads_sum = None
        losses = []
        instances, datasets = [], []
        for j in range(train_cfg.batch_instances):
            if data_groups is None:
                inst, seqs = _simulate_instance_group(
                    prior, train_cfg, step * train_cfg.batch_instances + j
                )
            else:
                group = data_groups[int(rot_rng.integers(len(data_groups)))]
                take = min(len(group), train_cfg.sequences_per_instance)
                pick = rot_rng.choice(len(group), size=take, replace=False)
                inst, seqs = None, [group[i] for i in pick]
            instances.append(inst)
            datasets.append(seqs)
        try:
            for seqs in datasets:
                n_rot = min(train_cfg.rotations_per_instance, len(seqs))
                targets = rot_rng.choice(len(seqs), size=n_rot, replace=False)
                grads, rot_losses = _instance_loss(state, seqs, targets)
                losses.extend(rot_losses)
                if grads_sum is None:
                    grads_sum = grads
                else:
                    for k in grads_sum:
                        grads_sum[k] += grads[k]
            scale = 1.0 / train_cfg.batch_instances
            grads_sum = {k: g * scale for k, g in grads_sum.items()}
            loss_mean = float(np.mean(losses))
            if not math.isfinite(loss_mean):
                raise NumericalError(f"non-finite loss {loss_mean}")
        except NumericalError as err:
            dump = _dump_failed_batch(out_dir, step, instances, datasets)
            raise NumericalError(
                f"aborting at step {step}: {err}; offending batch saved to {dump}"
            ) from err
        lr = learning_rate_at(train_cfg, step)
        grads_clipped, norm = clip_global_norm(grads_sum, train_cfg.grad_clip_norm)
        adam_step(state, grads_sum, lr, train_cfg)
        state.loss_ema = (
            loss_mean
            if math.isnan(state.loss_ema)
            else 0.98 * state.loss_ema + 0.02 * loss_mean
        )
        metrics.row(state.step, loss_mean, norm, lr)
        if state.step % train_cfg.checkpoint_every == 0 or state.step == train_cfg.steps:
            ckpt(f"state_step{state.step:06d}")
        if state.step % 20 == 0:
            log.info(
                "step %d loss/event %.4f ema %.4f lr %.2e",
                state.step, loss_mean, state.loss_ema, lr,
            )
    ckpt("state_final")
    return state


def holdout_split(dataset: list, cfg: TrainConfig):
    """Deterministic shuffle split; returns (train_list, holdout_list)."""
    perm = stream_rng(cfg.seed, _DOM_SPLIT).permutation(len(dataset))
    n_hold = int(round(cfg.holdout_fraction * len(dataset)))
    hold = [dataset[i] for i in perm[:n_hold]]
    train = [dataset[i] for i in perm[n_hold:]]
    return train, hold


def mean_nll_per_event(weights: ModelWeights, batches: list) -> float:
    """Mean per-event NLL (normalized time) over prebuilt ContextBatches."""
    vals = []
    for batch in batches:
        loss, n = forward_nll(batch, weights)
        vals.append(float(loss.data) / max(1, n))
    return float(np.mean(vals))


def holdout_batches(train_seqs: list, holdout: list, m: int) -> list:
    context = train_seqs[:m]
    return [ContextBatch(context, target) for target in holdout]


def finetune(
    start: TrainState,
    dataset: list,
    train_cfg: TrainConfig,
    out_dir: Optional[str] = None,
) -> TrainState:
    """Continue training on a fixed dataset; a held-out split is never sampled
    and its NLL is reported every eval_every steps."""
    state = TrainState(
        0, start.weights.copy(),
        {k: v.copy() for k, v in start.adam_m.items()},
        {k: v.copy() for k, v in start.adam_v.items()},
        start.loss_ema,
    )
    m = train_cfg.sequences_per_instance - 1
    train_seqs, hold = holdout_split(dataset, train_cfg)
    if len(train_seqs) < train_cfg.sequences_per_instance:
        raise ConfigError(
            f"dataset leaves {len(train_seqs)} training sequences but batches need "
            f"{train_cfg.sequences_per_instance}; lower sequences_per_instance"
        )
    eval_batches = holdout_batches(train_seqs, hold, m) if hold else []
    metrics = _MetricsLog(out_dir)
    ckpt = lambda tag: state.save(os.path.join(out_dir, tag), train_cfg) if out_dir else None

    def holdout_nll():
        return mean_nll_per_event(state.weights, eval_batches) if eval_batches else None

    last_eval = holdout_nll()
    metrics.row(0, float("nan"), 0.0, 0.0, holdout=last_eval)
    while state.step < train_cfg.steps:
        step = state.step
        rng = stream_rng(train_cfg.seed, _DOM_BATCH + step)
        grads_sum = None
        losses = []
        for _ in range(train_cfg.batch_instances):
            pick = rng.choice(len(train_seqs), size=train_cfg.sequences_per_instance, replace=False)
            seqs = [train_seqs[i] for i in pick]
            n_rot = min(train_cfg.rotations_per_instance, len(seqs))
            targets = rng.choice(len(seqs), size=n_rot, replace=False)
            grads, rot_losses = _instance_loss(state, seqs, targets)
            losses.extend(rot_losses)
            if grads_sum is None:
                grads_sum = grads
            else:
                for k in grads_sum:
                    grads_sum[k] += grads[k]
        grads_sum = {k: g / train_cfg.batch_instances for k, g in grads_sum.items()}
        lr = learning_rate_at(train_cfg, step)
        _, norm = clip_global_norm(grads_sum, train_cfg.grad_clip_norm)
        adam_step(state, grads_sum, lr, train_cfg)
        loss_mean = float(np.mean(losses))
        state.loss_ema = (
            loss_mean
            if math.isnan(state.loss_ema)
            else 0.98 * state.loss_ema + 0.02 * loss_mean
        )
        do_eval = state.step % train_cfg.eval_every == 0 or state.step == train_cfg.steps
        last_eval = holdout_nll() if do_eval else None
        metrics.row(state.step, loss_mean, norm, lr, holdout=last_eval)
        if state.step % train_cfg.checkpoint_every == 0 or state.step == train_cfg.steps:
            ckpt(f"state_step{state.step:06d}")
    ckpt("state_final")
    return state
