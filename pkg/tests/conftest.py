"""Session-wide cache of expensive synthetic training runs.

Pretraining and joint-training cells are shared between unit tests and the
acceptance module, so each (dataset, seed[, gamma, kind]) combination trains
once per pytest session.
"""
from dataclasses import dataclass

import numpy as np
import pytest

from fairacq.data import make_folds, make_synthetic
from fairacq.env import RewardConfig
from fairacq.evaluation import baseline_full_features, evaluate_policy
from fairacq.networks import ModelBundle
from fairacq.trainer import JointConfig, PretrainConfig, group_counts, joint_train, pretrain

PRETRAIN_ITERS = 10_000
JOINT_ITERS = 2_000
# scaled runs anneal epsilon over the first half of training
JOINT_CONFIG = JointConfig(iterations=JOINT_ITERS, epsilon_anneal_iters=JOINT_ITERS // 2, eval_every=1_000)
TRADEOFF_PROXIES = (0.12, 0.25, 0.45)


@dataclass
class Pretrained:
    dataset: object
    fold: object
    bundle: ModelBundle
    curve: list
    baseline: tuple


@dataclass
class Cell:
    bundle: ModelBundle
    run: object
    logs: dict


class SyntheticLab:
    def __init__(self):
        self._pre = {}
        self._cells = {}

    def pretrained(self, seed, proxies=()):
        key = (seed, tuple(proxies))
        if key not in self._pre:
            ds = make_synthetic(5_000, seed=seed, proxy_strengths=tuple(proxies))
            fold = make_folds(ds.n_instances, 8, seed)[0]
            bundle = ModelBundle(ds.n_features, ds.n_groups, seed=seed)
            bundle, curve = pretrain(bundle, ds, fold, PretrainConfig(iterations=PRETRAIN_ITERS), seed=seed)
            base = baseline_full_features(bundle, ds, fold.test_indices)
            self._pre[key] = Pretrained(ds, fold, bundle, curve, base)
        return self._pre[key]

    def cell(self, seed, gamma, kind="CE", proxies=()):
        key = (seed, float(gamma), kind, tuple(proxies))
        if key not in self._cells:
            pre = self.pretrained(seed, proxies)
            rc = RewardConfig(gamma, kind, group_counts(pre.dataset, pre.fold.train_indices))
            bundle, logs = joint_train(pre.bundle.copy(), pre.dataset, pre.fold, JOINT_CONFIG, rc, seed=seed)
            run = evaluate_policy(bundle, pre.dataset, pre.fold.test_indices)
            self._cells[key] = Cell(bundle, run, logs)
        return self._cells[key]


@pytest.fixture(scope="session")
def lab():
    return SyntheticLab()


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)


# -- acceptance summary -------------------------------------------------------------

_ACCEPTANCE = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py" not in report.nodeid:
        return
    if report.when == "call" or (report.when == "setup" and not report.passed):
        detail = "; ".join(str(v) for k, v in report.user_properties if k == "detail")
        _ACCEPTANCE[report.nodeid] = (report.outcome, detail)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for nodeid, (outcome, detail) in sorted(_ACCEPTANCE.items(), key=lambda kv: _criterion_key(kv[0])):
        name = nodeid.split("::")[-1]
        verdict = "PASS" if outcome == "passed" else "FAIL" if outcome == "failed" else outcome.upper()
        terminalreporter.write_line(f"{verdict}  {name}  {detail}")


def _criterion_key(nodeid):
    name = nodeid.split("::")[-1]
    digits = "".join(ch for ch in name.split("_")[2] if ch.isdigit()) if name.count("_") >= 2 else ""
    return (int(digits) if digits else 99, name)
