"""End-to-end experiment orchestration with resumable, atomically written cells.

Layout under ``<output_dir>/<dataset>/``::

    experiment.json                           config that produced this directory
    data/fold_<k>.npz                         encoded dataset (fold-specific scaling)
    pretrain/fold_<k>/bundle.npz, curve.csv   pretrained networks, validation curve
    <kind>/gamma_<v>/fold_<k>/
        checkpoint.npz   trained networks
        train_log.csv    per-iteration losses
        validation.csv   periodic validation sweep
        trained.json     marker written after the final checkpoint
        eval.json        test metrics and acquisition statistics
    baseline.csv                               full-feature classifier per fold
    report.csv, aggregate.csv, report_meta.json, tradeoff.png

``resume`` governs whether a stage skips its own finished outputs; artifacts
of earlier stages are always reused when present.
"""
from __future__ import annotations

import json
import logging
import os
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import encode_features, load_adult, load_dataset, make_folds, make_synthetic, save_dataset
from .env import RewardConfig
from .evaluation import (AGGREGATE_HEADER, DECISION_THRESHOLD, QUANTILE_METHOD, REPORT_HEADER, aggregate_folds, baseline_full_features,
                         evaluate_policy, write_csv_atomic)
from .networks import ModelBundle
from .trainer import group_counts, joint_train, pretrain

log = logging.getLogger(__name__)


class StaleOutputError(RuntimeError):
    pass


class ExperimentFailed(RuntimeError):
    def __init__(self, failures, rows):
        self.failures = failures
        self.rows = rows
        super().__init__(f"{len(failures)} cell(s) failed")


@dataclass(frozen=True)
class Cell:
    fold: int
    gamma: float
    kind: str


def _write_json(path, obj):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(obj, sort_keys=True, indent=1))
    os.replace(tmp, path)


def gamma_dirname(g):
    return f"gamma_{float(g)!r}"


def cell_seed(seed, cell, kinds):
    ss = np.random.SeedSequence([int(seed), cell.fold, list(kinds).index(cell.kind) if cell.kind in kinds else 0,
                                 int(round(cell.gamma * 1_000_000))])
    return int(ss.generate_state(1)[0])


class Experiment:
    """Stages of one configured experiment; each stage skips finished work when resuming."""

    def __init__(self, config, resume=True):
        self.cfg = config
        self.resume = resume
        self.root = Path(config.output_dir) / config.dataset.name
        self._raw = None
        self._synthetic = None
        self._folds = None

    def claim_output(self):
        """Record the config in the output directory; refuse one written by another config."""
        self.root.mkdir(parents=True, exist_ok=True)
        path = self.root / "experiment.json"
        mine = _config_identity(self.cfg)
        if path.exists():
            theirs = json.loads(path.read_text())
            if theirs != mine:
                if self.resume:
                    raise StaleOutputError(f"{self.root} holds results of a different configuration; "
                                           "use another output directory or rerun without resume")
                import shutil
                for child in self.root.iterdir():
                    if child.is_dir():
                        shutil.rmtree(child)
        _write_json(path, mine)

    # -- data ----------------------------------------------------------------
    def _base(self):
        ds = self.cfg.dataset
        if ds.name == "synthetic":
            if self._synthetic is None:
                s = ds.synthetic
                self._synthetic = make_synthetic(s.n, s.d_noise, s.leak_strength, self.cfg.seed,
                                                 tuple(s.proxy_strengths))
            return self._synthetic
        if ds.name == "cached":
            if self._synthetic is None:
                self._synthetic = load_dataset(ds.path)
            return self._synthetic
        if self._raw is None:
            self._raw = load_adult(ds.path)
        return None

    def n_instances(self):
        base = self._base()
        if base is not None:
            return base.n_instances
        return len(self._raw[1]["__label__"])

    def folds(self):
        if self._folds is None:
            self._folds = make_folds(self.n_instances(), self.cfg.n_folds, self.cfg.seed)
        return self._folds

    def dataset_for(self, fold):
        path = self.root / "data" / f"fold_{fold.fold_id}.npz"
        if path.exists():
            return load_dataset(path)
        base = self._base()
        if base is not None:
            ds = base
        else:
            schema, table = self._raw
            ds = encode_features(schema, table, fold.train_indices, name=self.cfg.dataset.name)
        path.parent.mkdir(parents=True, exist_ok=True)
        save_dataset(path, ds)
        return ds

    def ingest(self):
        folds = self.folds()
        return [self.dataset_for(folds[k]) for k in self.cfg.folds]

    # -- pretraining ---------------------------------------------------------
    def pretrain_dir(self, fold_id):
        return self.root / "pretrain" / f"fold_{fold_id}"

    def pretrained(self, fold, redo=False):
        d = self.pretrain_dir(fold.fold_id)
        path = d / "bundle.npz"
        if not redo and path.exists():
            return ModelBundle.load(path)
        ds = self.dataset_for(fold)
        seed = int(np.random.SeedSequence([self.cfg.seed, fold.fold_id, 0xBEEF]).generate_state(1)[0])
        bundle = ModelBundle(ds.n_features, ds.n_groups, seed=seed, lr=self.cfg.learning_rate)
        bundle, curve = pretrain(bundle, ds, fold, self.cfg.pretrain, seed=seed)
        d.mkdir(parents=True, exist_ok=True)
        header = ["iteration", "label_auc", "adv_auc", "adv_gnl1"]
        write_csv_atomic(d / "curve.csv", [dict(zip(header, row)) for row in curve], header)
        bundle.save(path)
        return bundle

    def run_pretrain(self, redo=False):
        folds = self.folds()
        for k in self.cfg.folds:
            self.pretrained(folds[k], redo=redo)

    # -- cells -----------------------------------------------------------------
    def cells(self):
        return [Cell(f, float(g), kind) for kind in self.cfg.reward_kinds
                for g in self.cfg.gamma_grid for f in self.cfg.folds]

    def cell_dir(self, cell):
        return self.root / cell.kind / gamma_dirname(cell.gamma) / f"fold_{cell.fold}"

    def train_cell(self, cell, redo=False):
        d = self.cell_dir(cell)
        ckpt = d / "checkpoint.npz"
        marker = d / "trained.json"
        if not redo and marker.exists():
            return ModelBundle.load(ckpt)
        for stale in (marker, d / "eval.json"):
            stale.unlink(missing_ok=True)
        fold = self.folds()[cell.fold]
        ds = self.dataset_for(fold)
        bundle = self.pretrained(fold)
        rc = RewardConfig(cell.gamma, cell.kind, group_counts(ds, fold.train_indices))
        d.mkdir(parents=True, exist_ok=True)
        bundle, logs = joint_train(bundle, ds, fold, self.cfg.joint, rc,
                                   seed=cell_seed(self.cfg.seed, cell, self.cfg.reward_kinds),
                                   log_path=d / "train_log.csv.tmp", checkpoint_path=ckpt)
        os.replace(d / "train_log.csv.tmp", d / "train_log.csv")
        write_csv_atomic(d / "validation.csv", logs["validation"], ["iteration", "auc", "disparity", "mean_features"])
        bundle.save(ckpt, {"iteration": self.cfg.joint.iterations, "gamma": cell.gamma, "kind": cell.kind})
        _write_json(marker, {"iterations": self.cfg.joint.iterations})
        return bundle

    def evaluate_cell(self, cell, redo=False, train_missing=True):
        d = self.cell_dir(cell)
        out = d / "eval.json"
        if not redo and out.exists():
            return json.loads(out.read_text())
        if not train_missing and not (d / "trained.json").exists():
            raise FileNotFoundError(f"cell {cell} has no finished checkpoint; run the train stage first")
        bundle = self.train_cell(cell)
        fold = self.folds()[cell.fold]
        ds = self.dataset_for(fold)
        run = evaluate_policy(bundle, ds, fold.test_indices)
        result = {
            "fold": cell.fold, "gamma": cell.gamma, "reward_kind": cell.kind,
            "auc": run.auc(), "disparity": run.disparity(), "mean_features": run.mean_features,
            "acquisition_rate": {g.source_column: run.acquisition_rate(g.group_id) for g in ds.groups},
            "decision_threshold": DECISION_THRESHOLD,
        }
        _write_json(out, result)
        return result

    def run_cells(self, workers=1, stage="evaluate", train_missing=True):
        """Run every cell through ``stage`` ("train" or "evaluate").

        Failures are collected and returned rather than raised, so finished
        cells stay on disk. Returns ``(results, failures)``.
        """
        cells = self.cells()
        redo = not self.resume

        def fn(c):
            if stage == "train":
                self.train_cell(c, redo=redo)
                return None
            return self.evaluate_cell(c, redo=redo, train_missing=train_missing)

        # pretraining is shared by the cells of a fold, so it runs first
        self.run_pretrain()
        results, failures = {}, []
        if workers > 1:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                futs = {c: pool.submit(_run_cell_job, self.cfg, redo, c, stage, train_missing) for c in cells}
                for c, fut in futs.items():
                    try:
                        results[c] = fut.result()
                    except Exception as exc:  # noqa: BLE001 - reported per cell
                        failures.append(_failure(c, exc))
        else:
            for c in cells:
                try:
                    results[c] = fn(c)
                except Exception as exc:  # noqa: BLE001 - reported per cell
                    log.error("cell %s failed: %s", c, exc)
                    failures.append(_failure(c, exc))
        return results, failures

    # -- reporting -------------------------------------------------------------
    def baseline(self):
        rows = []
        folds = self.folds()
        for k in self.cfg.folds:
            bundle = self.pretrained(folds[k])
            ds = self.dataset_for(folds[k])
            a, dsp, mf = baseline_full_features(bundle, ds, folds[k].test_indices)
            rows.append({"fold": k, "auc": a, "disparity": dsp, "mean_features": mf})
        self.root.mkdir(parents=True, exist_ok=True)
        write_csv_atomic(self.root / "baseline.csv", rows, ["fold", "auc", "disparity", "mean_features"])
        return rows

    def report(self, plot=True):
        rows = []
        for c in self.cells():
            p = self.cell_dir(c) / "eval.json"
            if p.exists():
                r = json.loads(p.read_text())
                rows.append({k: r[k] for k in REPORT_HEADER})
        self.root.mkdir(parents=True, exist_ok=True)
        write_csv_atomic(self.root / "report.csv", rows, REPORT_HEADER)
        write_csv_atomic(self.root / "aggregate.csv", aggregate_folds(rows), AGGREGATE_HEADER)
        _write_json(self.root / "report_meta.json", {"decision_threshold": DECISION_THRESHOLD,
                                                     "quantile_method": QUANTILE_METHOD,
                                                     "n_rows": len(rows)})
        base = self.baseline()
        if plot and rows:
            try:
                from .evaluation import plot_tradeoff
                med = (float(np.median([r["auc"] for r in base])), float(np.median([r["disparity"] for r in base])))
                plot_tradeoff(rows, baseline=med, path=self.root / "tradeoff.png")
            except ImportError:
                log.info("matplotlib unavailable; skipping plot")
        return rows


def _failure(cell, exc):
    return {"fold": cell.fold, "gamma": cell.gamma, "reward_kind": cell.kind,
            "error": type(exc).__name__, "message": str(exc),
            "traceback": traceback.format_exception_only(type(exc), exc)[-1].strip()}


def _config_identity(cfg):
    d = cfg.to_dict()
    for k in ("output_dir", "workers"):
        d.pop(k, None)
    return json.loads(json.dumps(d))


def _run_cell_job(cfg, redo, cell, stage, train_missing):
    exp = Experiment(cfg)
    if stage == "train":
        exp.train_cell(cell, redo=redo)
        return None
    return exp.evaluate_cell(cell, redo=redo, train_missing=train_missing)


def run_experiment(config, workers=None, resume=True, plot=False):
    """Ingest, pretrain, train and evaluate every (fold, gamma, kind) cell, then report.

    Completed cells are skipped when ``resume`` is set. Returns the report
    rows; raises :class:`ExperimentFailed` after writing the report when any
    cell failed.
    """
    exp = Experiment(config, resume=resume)
    exp.claim_output()
    exp.ingest()
    if not resume:
        exp.run_pretrain(redo=True)
    _, failures = exp.run_cells(workers or config.workers)
    rows = exp.report(plot=plot)
    if failures:
        _write_json(exp.root / "failures.json", failures)
        raise ExperimentFailed(failures, rows)
    return rows
