"""Figure rendering for the CLI report paths.

Every command that writes delimited output also drops a PNG next to it; the
CSV/JSON stays the primary artifact, the figure is a quick visual check.
"""

from __future__ import annotations

import csv
import logging

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

log = logging.getLogger(__name__)

_COLORS = plt.rcParams["axes.prop_cycle"].by_key()["color"]


def save_intensity_curves(path, ts, lambda_hat, lambda_true=None, event_times=None):
    """Per-mark estimated (and true, when known) intensity curves."""
    lambda_hat = np.asarray(lambda_hat)
    K = lambda_hat.shape[1]
    fig, ax = plt.subplots(figsize=(8, 4))
    for k in range(K):
        c = _COLORS[k % len(_COLORS)]
        ax.plot(ts, lambda_hat[:, k], color=c, label=f"mark {k} estimate")
        if lambda_true is not None:
            ax.plot(
                ts, np.asarray(lambda_true)[:, k], color=c, ls="--", alpha=0.7,
                label=f"mark {k} truth",
            )
    if event_times is not None and len(event_times):
        ax.plot(
            event_times, np.zeros(len(event_times)), "|", color="k", ms=12,
            label="events",
        )
    ax.set_xlabel("time")
    ax.set_ylabel("intensity")
    if ax.has_data():
        ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    log.info("wrote %s", path)


def save_eval_summary(path, report):
    """NLL gap and intensity RMSE per instance, plus rate calibration."""
    rows = report.per_instance
    fig, axes = plt.subplots(1, 3, figsize=(11, 3.4))
    gaps = [r.nll_gap_per_event for r in rows if r.nll_gap_per_event is not None]
    if gaps:
        axes[0].hist(gaps, bins=20, color=_COLORS[0])
    axes[0].set_xlabel("NLL gap (nats/event)")
    axes[0].set_ylabel("instances")
    rmses = [r.intensity_rmse for r in rows if r.intensity_rmse is not None]
    if rmses:
        axes[1].hist(rmses, bins=20, color=_COLORS[1])
    axes[1].set_xlabel("intensity RMSE")
    pred = [
        (r.true_mean_rate, r.mean_predicted_rate)
        for r in rows
        if r.true_mean_rate is not None and r.mean_predicted_rate is not None
    ]
    if pred:
        x, y = zip(*pred)
        axes[2].scatter(x, y, s=12, color=_COLORS[2])
        lim = max(max(x), max(y)) * 1.05
        axes[2].plot([0, lim], [0, lim], "k--", lw=0.8)
        axes[2].set_xlabel("true mean rate")
        axes[2].set_ylabel("predicted mean rate")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    log.info("wrote %s", path)


def save_forecast_fan(path, payload, history):
    """Raster of sampled trajectories plus the next-event time histogram."""
    fig, axes = plt.subplots(1, 2, figsize=(10, 3.6))
    trajs = payload["trajectories"][:200]
    for j, traj in enumerate(trajs):
        ts = [e["t"] for e in traj]
        axes[0].plot(ts, np.full(len(ts), j), ".", ms=2, color=_COLORS[0], alpha=0.4)
    if len(history):
        axes[0].plot(
            history.times, np.full(len(history), -max(1, len(trajs) // 20)),
            "|", color="k", ms=10,
        )
    axes[0].set_xlabel("time")
    axes[0].set_ylabel("trajectory")
    firsts = [traj[0]["t"] for traj in payload["trajectories"] if traj]
    if firsts:
        axes[1].hist(firsts, bins=40, color=_COLORS[1])
    axes[1].set_xlabel("next event time")
    axes[1].set_ylabel("samples")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    log.info("wrote %s", path)


def save_loss_curve(path, metrics_csv):
    """Training loss and holdout NLL against steps, from the metrics CSV."""
    steps, losses, hold_steps, hold = [], [], [], []
    with open(metrics_csv, newline="") as fh:
        for row in csv.DictReader(fh):
            s = int(row["step"])
            if row["loss_per_event"] not in ("", "nan"):
                steps.append(s)
                losses.append(float(row["loss_per_event"]))
            if row.get("holdout_nll"):
                hold_steps.append(s)
                hold.append(float(row["holdout_nll"]))
    fig, ax = plt.subplots(figsize=(7, 3.5))
    if losses:
        ax.plot(steps, losses, color=_COLORS[0], lw=0.9, label="train loss/event")
    if hold:
        ax.plot(hold_steps, hold, "o-", color=_COLORS[3], ms=3, label="holdout NLL/event")
    ax.set_xlabel("step")
    ax.set_ylabel("nats/event")
    if losses or hold:
        ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    log.info("wrote %s", path)
