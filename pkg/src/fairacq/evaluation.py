"""Metrics, greedy policy evaluation and accuracy/disparity trade-off reports."""
from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import kernels
from .env import BatchEnv

DECISION_THRESHOLD = 0.5
QUANTILE_METHOD = "linear"
REPORT_HEADER = ["fold", "gamma", "reward_kind", "auc", "disparity", "mean_features"]
AGGREGATE_HEADER = ["gamma", "reward_kind", "n_folds", "auc_median", "auc_q1", "auc_q3",
                    "disparity_median", "disparity_q1", "disparity_q3", "mean_features_median"]


def auc(scores, labels):
    """Area under the ROC curve via average ranks (ties count one half)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both classes present")
    order = np.argsort(scores, kind="mergesort")
    s = scores[order]
    ranks = np.empty(s.size)
    # average rank within tie blocks
    edges = np.flatnonzero(np.diff(s)) + 1
    starts = np.concatenate([[0], edges])
    ends = np.concatenate([edges, [s.size]])
    avg = (starts + ends + 1) / 2.0
    ranks[order] = np.repeat(avg, ends - starts)
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def demographic_disparity(y_hat, b):
    """``|P(y_hat=1 | b=0) - P(y_hat=1 | b=1)|`` from empirical frequencies."""
    y_hat = np.asarray(y_hat).astype(np.float64)
    b = np.asarray(b)
    g0, g1 = b == 0, b == 1
    if not g0.any() or not g1.any():
        raise ValueError("disparity needs both sensitive groups present")
    return float(abs(y_hat[g0].mean() - y_hat[g1].mean()))


@dataclass
class EvalRun:
    instance_ids: np.ndarray
    probabilities: np.ndarray
    y_hat: np.ndarray
    b: np.ndarray
    y: np.ndarray
    n_features: np.ndarray  # encoded columns observed at STOP
    n_groups: np.ndarray  # action groups acquired at STOP
    acquired: np.ndarray  # (n, n_groups) bool

    @property
    def mean_features(self):
        """Mean number of acquired action groups per instance."""
        return float(self.n_groups.mean())

    def auc(self):
        return auc(self.probabilities, self.y)

    def disparity(self):
        return demographic_disparity(self.y_hat, self.b)

    def acquisition_rate(self, group_id):
        return float(self.acquired[:, group_id].mean())


def rollout(bundle, dataset, indices, policy=None, chunk=1024):
    """Greedy episodes with masked argmax; returns the final group masks.

    ``policy(q, legal, acquired)`` may replace the greedy rule (used for
    fixed reference policies).
    """
    indices = np.asarray(indices, dtype=np.int64)
    out = np.zeros((indices.size, dataset.n_groups), dtype=bool)
    for lo in range(0, indices.size, chunk):
        env = BatchEnv(dataset, indices[lo:lo + chunk])
        live = np.ones(env.ids.size, dtype=bool)
        for _ in range(dataset.n_groups + 1):
            rows = np.flatnonzero(live)
            if rows.size == 0:
                break
            legal = env.legal_mask(env.acquired[rows])
            if policy is None:
                q = bundle.q_values(env.tokens(env.ids[rows], env.acquired[rows]))
                a = kernels.masked_argmax(q, legal)
            else:
                a = policy(None, legal, env.acquired[rows])
            stop = env.step_rows(rows, a)
            live[rows[stop]] = False
        out[lo:lo + chunk] = env.acquired
    return out


def evaluate_masks(bundle, dataset, indices, masks):
    indices = np.asarray(indices, dtype=np.int64)
    G = dataset.group_matrix()
    probs = np.zeros(indices.size)
    for lo in range(0, indices.size, 1024):
        env = BatchEnv(dataset, indices[lo:lo + 1024])
        probs[lo:lo + 1024] = bundle.predict_label(env.tokens(env.ids, masks[lo:lo + 1024]))
    n_cols = (masks.astype(np.int64) @ G.sum(axis=1).astype(np.int64))
    return EvalRun(indices, probs, (probs >= DECISION_THRESHOLD).astype(np.int8),
                   dataset.sensitive[indices], dataset.labels[indices], n_cols,
                   masks.sum(axis=1), masks)


def evaluate_policy(bundle, dataset, indices, reward_config=None, policy=None):
    """Greedy rollouts on held-out rows, then label predictions on the final sets.

    ``reward_config`` is accepted for interface symmetry and never used:
    rewards play no part at inference.
    """
    masks = rollout(bundle, dataset, indices, policy=policy)
    return evaluate_masks(bundle, dataset, indices, masks)


def stop_immediately(q, legal, acquired):
    return np.full(legal.shape[0], legal.shape[1] - 1, dtype=np.int64)


def acquire_everything(q, legal, acquired):
    return np.argmax(legal, axis=1).astype(np.int64)


def baseline_full_features(bundle, dataset, indices):
    """``(auc, disparity, mean_features)`` of the label classifier on all features."""
    indices = np.asarray(indices, dtype=np.int64)
    masks = np.ones((indices.size, dataset.n_groups), dtype=bool)
    run = evaluate_masks(bundle, dataset, indices, masks)
    return run.auc(), run.disparity(), run.mean_features


def pareto_front(points):
    """Non-dominated ``(auc, disparity)`` points, one per duplicate, sorted by disparity.

    A point is dominated when another has AUC >= and disparity <= with at
    least one inequality strict.
    """
    pts = sorted(set((float(a), float(d)) for a, d in points), key=lambda p: (p[1], -p[0]))
    front = []
    best_auc = -np.inf
    for a, d in pts:
        # sorted by disparity then descending AUC: a point survives iff it
        # beats every AUC seen at lower-or-equal disparity
        if a > best_auc:
            front.append((a, d))
            best_auc = a
    return front


def quantiles(values):
    v = np.asarray(values, dtype=np.float64)
    q1, med, q3 = np.percentile(v, [25, 50, 75], method=QUANTILE_METHOD)
    return float(med), float(q1), float(q3)


def aggregate_folds(rows):
    """Median and quartiles per (gamma, reward_kind) over fold rows."""
    cells = {}
    for r in rows:
        cells.setdefault((float(r["gamma"]), r["reward_kind"]), []).append(r)
    out = []
    for (g, kind), rs in sorted(cells.items()):
        am, a1, a3 = quantiles([r["auc"] for r in rs])
        dm, d1, d3 = quantiles([r["disparity"] for r in rs])
        fm, _, _ = quantiles([r["mean_features"] for r in rs])
        out.append({"gamma": g, "reward_kind": kind, "n_folds": len(rs), "auc_median": am, "auc_q1": a1,
                    "auc_q3": a3, "disparity_median": dm, "disparity_q1": d1, "disparity_q3": d3,
                    "mean_features_median": fm})
    return out


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def rows_to_csv(rows, header):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(r[k]) for k in header])
    return buf.getvalue()


def write_csv_atomic(path, rows, header):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(rows_to_csv(rows, header))
    os.replace(tmp, path)


def read_report(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        r["fold"] = int(r["fold"])
        for k in ("gamma", "auc", "disparity", "mean_features"):
            r[k] = float(r[k])
    return rows


def plot_tradeoff(report_rows, baseline=None, path=None):
    """Three panels: disparity vs 1-gamma, AUC vs 1-gamma, AUC vs disparity."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    agg = aggregate_folds(report_rows)
    fig, axes = plt.subplots(1, 3, figsize=(13, 3.8))
    for kind in sorted({r["reward_kind"] for r in agg}):
        rs = sorted((r for r in agg if r["reward_kind"] == kind), key=lambda r: 1 - r["gamma"])
        x = [1 - r["gamma"] for r in rs]
        for ax, key in ((axes[0], "disparity"), (axes[1], "auc")):
            ax.plot(x, [r[f"{key}_median"] for r in rs], marker="o", label=kind)
            ax.fill_between(x, [r[f"{key}_q1"] for r in rs], [r[f"{key}_q3"] for r in rs], alpha=0.2)
        front = pareto_front([(r["auc_median"], r["disparity_median"]) for r in rs])
        axes[2].plot([d for _, d in front], [a for a, _ in front], marker="o", label=kind)
    if baseline is not None:
        axes[2].plot([baseline[1]], [baseline[0]], "ks", label="full features")
    axes[0].set(xlabel="1 - gamma", ylabel="disparity")
    axes[1].set(xlabel="1 - gamma", ylabel="AUC")
    axes[2].set(xlabel="disparity", ylabel="AUC")
    for ax in axes:
        ax.legend()
    fig.tight_layout()
    if path is not None:
        fig.savefig(path, dpi=120)
        plt.close(fig)
    return fig
