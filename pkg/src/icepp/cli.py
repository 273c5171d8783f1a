"""Command-line surface.

Subcommands: generate | train | finetune | infer | eval | forecast |
import-csv. Exit codes: 0 success, 1 runtime/numerical failure, 2 usage or
config error. Every command is deterministic given --seed; omitting it draws
one from OS entropy and prints it.
"""

from __future__ import annotations

import argparse
import csv
import glob
import json
import logging
import os
import re
import secrets
import sys

import numpy as np

from . import plots, report
from .errors import ConfigError, DataError, IceppError
from .hawkes import EventSequence, PriorConfig, ground_truth_intensity, sample_instance
from .likelihood import IntensityParams
from .model import (
    ContextBatch,
    ModelConfig,
    ModelWeights,
    context_time_scale,
    decode_history,
    encode_context,
    predict_intensity_params,
)
from .simulate import SimulationConfig, simulate_dataset
from .store import import_csv, read_dataset, write_dataset
from .train import TrainConfig, TrainState, finetune, pretrain

log = logging.getLogger(__name__)


def _load_json(path: str) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except ValueError as err:
        raise ConfigError(f"unreadable config {path}: {err}") from None


class _SeedSource:
    """--seed wins everywhere; otherwise a config's own seed stands; anything
    still unseeded shares one OS-entropy draw, printed once."""

    def __init__(self, explicit):
        self.explicit = explicit
        self._drawn = None

    def get(self, config_value=None) -> int:
        if self.explicit is not None:
            return self.explicit
        if config_value is not None:
            return int(config_value)
        if self._drawn is None:
            self._drawn = secrets.randbits(48)
            print(f"seed: {self._drawn}")
        return self._drawn


def _section(cfg: dict, name: str, cls, seeds: _SeedSource = None, required=True):
    if name not in cfg:
        if required:
            raise ConfigError(f"config is missing the '{name}' section")
        body = {}
    else:
        body = dict(cfg[name])
    if seeds is not None and "seed" in cls.__dataclass_fields__:
        body["seed"] = seeds.get(body.get("seed"))
    try:
        return cls.from_dict(body)
    except TypeError as err:
        raise ConfigError(f"bad '{name}' section: {err}") from None


def _with_suffix(path: str, suffix: str) -> str:
    base, _ = os.path.splitext(path)
    return base + suffix


def _parse_grid(spec: str) -> np.ndarray:
    m = re.fullmatch(r"([-\d.eE+]+):([-\d.eE+]+):(\d+)", spec or "")
    if not m:
        raise ConfigError(f"grid spec must be start:stop:num, got {spec!r}")
    start, stop, num = float(m.group(1)), float(m.group(2)), int(m.group(3))
    if num < 1 or stop < start:
        raise ConfigError(f"bad grid spec {spec!r}")
    return np.linspace(start, stop, num)


def _parse_history(spec: str, group: list, num_marks: int, window_end: float):
    """History mini-language: 'empty', 'seq:<i>@prefix:<n>', or inline JSON
    events. Returns (history, source_index_or_None)."""
    if spec == "empty":
        return EventSequence([], [], window_end, num_marks), None
    m = re.fullmatch(r"seq:(\d+)@prefix:(\d+)", spec)
    if m:
        idx, n = int(m.group(1)), int(m.group(2))
        if idx >= len(group):
            raise ConfigError(f"history references sequence {idx}, group has {len(group)}")
        seq = group[idx]
        if n > len(seq):
            raise ConfigError(f"prefix {n} exceeds sequence length {len(seq)}")
        return seq.prefix(n), idx
    if spec.lstrip().startswith("["):
        try:
            events = json.loads(spec)
            times = [e["t"] for e in events]
            marks = [e["k"] for e in events]
        except (ValueError, KeyError, TypeError) as err:
            raise ConfigError(f"bad inline history JSON: {err}") from None
        T_end = max(window_end, max(times) if times else 0.0)
        return EventSequence(times, marks, T_end, num_marks), None
    raise ConfigError(
        f"history spec {spec!r} is not 'empty', 'seq:<i>@prefix:<n>', or JSON"
    )


def _select_group(sequences, ids, instance_id):
    group = [s for s, i in zip(sequences, ids) if i == instance_id]
    if not group:
        raise ConfigError(f"dataset has no sequences for instance {instance_id}")
    return group


# ---------------------------------------------------------------------------
# commands


def cmd_generate(args) -> int:
    seeds = _SeedSource(args.seed)
    cfg = _load_json(args.config)
    prior = _section(cfg, "prior", PriorConfig, seeds)
    spi = int(cfg.get("sequences_per_instance", 32))
    sim = SimulationConfig(
        window_end=prior.window_end,
        max_events=int(cfg.get("max_events", 10_000)),
        seed=prior.seed,
    )
    instances, groups = [], []
    for i in range(args.n_instances):
        inst = sample_instance(prior, i)
        groups.append(
            simulate_dataset(inst, spi, sim, threads=args.threads, stream_offset=i * spi)
        )
        instances.append(inst)
    # one mark space per dataset: lift everything onto the largest K drawn
    # (extra marks are inert, the processes are unchanged)
    K_file = max((inst.num_marks for inst in instances), default=0)
    instances = [inst.padded(K_file) for inst in instances]
    seqs, ids = [], []
    for i, group in enumerate(groups):
        for seq in group:
            seqs.append(
                EventSequence(seq.times, seq.marks, seq.window_end, K_file)
            )
            ids.append(i)
    manifest = write_dataset(args.out, seqs, instances=instances, instance_ids=ids)
    print(
        f"wrote {manifest.num_sequences} sequences "
        f"({args.n_instances} instances, K={manifest.num_marks}) to {manifest.jsonl_path}"
    )
    return 0


def _latest_state(out_dir: str):
    paths = glob.glob(os.path.join(out_dir, "state_*.json"))
    best, best_step = None, -1
    for p in paths:
        base = p[: -len(".json")]
        try:
            state = TrainState.load(base)
        except (IceppError, KeyError, ValueError):
            continue
        if state.step > best_step:
            best, best_step = base, state.step
    if best is None:
        raise ConfigError(f"--resume: no loadable state_*.json under {out_dir}")
    return TrainState.load(best)


def cmd_train(args) -> int:
    seeds = _SeedSource(args.seed)
    cfg = _load_json(args.config)
    model_cfg = _section(cfg, "model", ModelConfig, required=False)
    train_cfg = _section(cfg, "train", TrainConfig, seeds)
    prior = _section(cfg, "prior", PriorConfig, seeds)
    if args.threads > 1:
        train_cfg.threads = args.threads

    data_groups = None
    if args.from_dataset:
        sequences, ids, _, _ = read_dataset(args.from_dataset)
        groups: dict = {}
        for s, i in zip(sequences, ids):
            groups.setdefault(i, []).append(s)
        data_groups = list(groups.values())
        log.info("training from %d fixed instance groups", len(data_groups))

    start_state = None
    if args.resume:
        start_state = _latest_state(args.out)
        from .model import load_checkpoint  # saved config travels with the state

        saved_cfg = {}
        for tag in ("state_final", f"state_step{start_state.step:06d}", "state_init"):
            p = os.path.join(args.out, tag)
            if os.path.exists(p + ".json"):
                saved_cfg = load_checkpoint(p)[3].get("train_config", {})
                break
        if saved_cfg and saved_cfg != train_cfg.to_dict():
            log.warning(
                "resuming with a train config that differs from the checkpoint's; "
                "the trajectory will not bit-match an uninterrupted run"
            )
    state = pretrain(
        prior, model_cfg, train_cfg,
        out_dir=args.out, start_state=start_state, data_groups=data_groups,
    )
    metrics = os.path.join(args.out, "metrics.csv")
    if os.path.exists(metrics):
        plots.save_loss_curve(os.path.join(args.out, "metrics.png"), metrics)
    print(f"trained to step {state.step}; checkpoint at {os.path.join(args.out, 'state_final')}")
    return 0


def cmd_finetune(args) -> int:
    seeds = _SeedSource(args.seed)
    cfg = _load_json(args.config) if args.config else {}
    train_cfg = _section(cfg, "train", TrainConfig, seeds, required=False)
    try:
        start = TrainState.load(args.checkpoint)
    except (ConfigError, DataError):
        weights = ModelWeights.load(args.checkpoint)
        start = TrainState.fresh(weights.config, train_cfg.seed)
        start.weights = weights
    sequences, _, _, _ = read_dataset(args.data)
    state = finetune(start, sequences, train_cfg, out_dir=args.out)
    metrics = os.path.join(args.out, "metrics.csv")
    if os.path.exists(metrics):
        plots.save_loss_curve(os.path.join(args.out, "metrics.png"), metrics)
    print(f"finetuned for {state.step} steps; checkpoint at {os.path.join(args.out, 'state_final')}")
    return 0


def cmd_infer(args) -> int:
    weights = ModelWeights.load(args.checkpoint)
    sequences, ids, instances, manifest = read_dataset(args.context)
    group = _select_group(sequences, ids, args.instance)
    K = manifest.num_marks
    window_end = group[0].window_end
    history, src = _parse_history(args.history, group, K, window_end)
    context = [s for j, s in enumerate(group) if j != src]
    if not context:
        raise ConfigError("no context sequences left after removing the history source")

    grid = _parse_grid(args.grid)
    last = float(history.times[-1]) if len(history) else 0.0
    if len(grid) and grid[0] <= last:
        raise ConfigError(
            f"grid must start after the history's last event at {last}"
        )

    cfg = weights.config
    wt = weights.as_tensors(None)
    s = context_time_scale(context)
    ctx = encode_context(ContextBatch(context, history), wt, cfg)
    h = decode_history(history, ctx, wt, s, cfg)
    params = predict_intensity_params(h, wt, cfg).rescaled(s)
    params = IntensityParams(
        params.last_event_time, params.mu_hat[:K], params.alpha_hat[:K], params.beta_hat[:K]
    )

    inst = instances[args.instance] if instances is not None else None

    lam_hat = np.zeros((len(grid), K))
    lam_true = np.zeros((len(grid), K)) if inst is not None else None
    from .likelihood import intensity_vector

    for gi, t in enumerate(grid):
        lam_hat[gi] = intensity_vector(params, float(t))
        if inst is not None:
            for k in range(K):
                lam_true[gi, k] = ground_truth_intensity(inst, history, float(t), k)

    with open(args.out, "w", newline="") as fh:
        writer = csv.writer(fh)
        header = ["t", "mark", "lambda_hat"] + (["lambda_true"] if inst is not None else [])
        writer.writerow(header)
        for gi, t in enumerate(grid):
            for k in range(K):
                # repr keeps the shortest exact round-trip, so lambda_true in
                # the CSV is bit-identical to a direct evaluation
                row = [repr(float(t)), k, repr(float(lam_hat[gi, k]))]
                if inst is not None:
                    row.append(repr(float(lam_true[gi, k])))
                writer.writerow(row)
    plots.save_intensity_curves(
        _with_suffix(args.out, ".png"), grid, lam_hat, lam_true,
        event_times=history.times,
    )
    print(f"wrote {len(grid) * K} rows to {args.out}")
    return 0


def cmd_eval(args) -> int:
    seed = _SeedSource(args.seed).get()
    weights = ModelWeights.load(args.checkpoint)
    sequences, ids, instances, manifest = read_dataset(args.data)
    echo = {
        "checkpoint": args.checkpoint,
        "data": args.data,
        "context_size": args.context_size,
        "grid_points": args.grid_points,
        "forecast_samples": args.forecast_samples,
        "model": weights.config.to_dict(),
    }
    rep = report.evaluate_dataset(
        weights, sequences, ids, instances,
        context_size=args.context_size,
        seed=seed,
        grid_points=args.grid_points,
        forecast_samples=args.forecast_samples,
        max_prediction_points=args.max_prediction_points,
        config_echo=echo,
    )
    with open(args.out, "w") as fh:
        json.dump(rep.to_dict(), fh, indent=1, sort_keys=True)
        fh.write("\n")
    csv_path = _with_suffix(args.out, ".csv")
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        cols = ["instance_id", "events"] + list(report.AGGREGATE_FIELDS)
        writer.writerow(cols)
        for row in rep.per_instance:
            d = row.to_dict()
            writer.writerow([d[c] if d[c] is not None else "" for c in cols])
    plots.save_eval_summary(_with_suffix(args.out, ".png"), rep)
    agg = rep.aggregate
    gap = agg.get("nll_gap_per_event")
    print(
        f"evaluated {len(rep.per_instance)} instances; "
        f"model NLL/event {agg['model_nll_per_event']:.4f}"
        + (f", gap {gap:.4f}" if gap is not None else " (no ground truth)")
    )
    return 0


def cmd_forecast(args) -> int:
    seed = _SeedSource(args.seed).get()
    if args.horizon <= 0:
        raise ConfigError(f"horizon must be positive, got {args.horizon}")
    weights = ModelWeights.load(args.checkpoint)
    sequences, ids, instances, manifest = read_dataset(args.context)
    group = _select_group(sequences, ids, args.instance)
    history, src = _parse_history(
        args.history, group, manifest.num_marks, group[0].window_end
    )
    context = [s for j, s in enumerate(group) if j != src]
    payload = report.forecast(
        weights, context, history, args.horizon, args.n_samples,
        seed=seed, max_events_per_trajectory=args.max_trajectory_events,
    )
    payload["seed"] = seed
    payload["checkpoint"] = args.checkpoint
    with open(args.out, "w") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
        fh.write("\n")
    plots.save_forecast_fan(_with_suffix(args.out, ".png"), payload, history)
    print(
        f"sampled {args.n_samples} trajectories over horizon {args.horizon}; "
        f"{payload['next_event']['censored']} censored"
    )
    return 0


def cmd_import_csv(args) -> int:
    sequences, vocab = import_csv(
        args.input,
        seq_col=args.seq_col,
        time_col=args.time_col,
        mark_col=args.mark_col,
        max_marks=args.max_marks,
        window_end=args.window_end,
    )
    manifest = write_dataset(args.out, sequences, time_unit="imported")
    print(
        f"imported {manifest.num_sequences} sequences with {len(vocab)} marks "
        f"to {manifest.jsonl_path}"
    )
    for mark, idx in sorted(vocab.items(), key=lambda kv: kv[1]):
        print(f"  mark {idx}: {mark}")
    return 0


# ---------------------------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="icepp",
        description="In-context intensity estimation for marked temporal point processes.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=None, help="global RNG seed")
        p.add_argument("--threads", type=int, default=1)

    p = sub.add_parser("generate", help="sample instances and simulate a dataset")
    common(p)
    p.add_argument("--config", required=True, help="JSON with a 'prior' section")
    p.add_argument("--n-instances", type=int, required=True)
    p.add_argument("--out", required=True, help="dataset path (.jsonl)")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="pretrain on fresh prior draws")
    common(p)
    p.add_argument("--config", required=True, help="JSON with model/prior/train sections")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--resume", action="store_true")
    p.add_argument("--from-dataset", default=None, help="train from a fixed JSONL dataset")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("finetune", help="finetune a checkpoint on a fixed dataset")
    common(p)
    p.add_argument("--config", default=None, help="JSON with a 'train' section")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="dataset path (.jsonl)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("infer", help="intensity curves for a history")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--context", required=True, help="context dataset (.jsonl)")
    p.add_argument("--history", default="empty")
    p.add_argument("--grid", required=True, help="start:stop:num")
    p.add_argument("--instance", type=int, default=0)
    p.add_argument("--out", required=True, help="output CSV path")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="zero-shot evaluation report")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="eval dataset with sidecar")
    p.add_argument("--out", required=True, help="report JSON path")
    p.add_argument("--context-size", type=int, default=31)
    p.add_argument("--grid-points", type=int, default=100)
    p.add_argument("--forecast-samples", type=int, default=1000)
    p.add_argument("--max-prediction-points", type=int, default=8)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("forecast", help="sample future trajectories")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--context", required=True)
    p.add_argument("--history", default="empty")
    p.add_argument("--horizon", type=float, required=True)
    p.add_argument("--n-samples", type=int, required=True)
    p.add_argument("--instance", type=int, default=0)
    p.add_argument("--max-trajectory-events", type=int, default=1000)
    p.add_argument("--out", required=True, help="output JSON path")
    p.set_defaults(func=cmd_forecast)

    p = sub.add_parser("import-csv", help="convert an event-log CSV to a dataset")
    common(p)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seq-col", default="sequence_id")
    p.add_argument("--time-col", default="timestamp")
    p.add_argument("--mark-col", default="mark")
    p.add_argument("--max-marks", type=int, default=8)
    p.add_argument("--window-end", type=float, default=None)
    p.set_defaults(func=cmd_import_csv)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(
        level=logging.INFO, format="%(levelname)s %(name)s: %(message)s"
    )
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        rc = args.func(args)
        return 0 if rc is None else rc
    except (ConfigError, DataError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except IceppError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
