"""Pretraining on randomly masked feature sets, then joint n-step double Q-learning."""
from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import kernels
from .env import (BatchEnv, ExperienceRecord, GroupCounts, adversary_loss_gnl1, terminal_rewards,
                  tokens_for)
from .evaluation import auc, evaluate_policy

log = logging.getLogger(__name__)

TRAIN_LOG_HEADER = ["iteration", "td_loss", "clf_loss", "adv_loss", "epsilon", "mean_episode_length"]


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class PretrainConfig:
    iterations: int = 10_000
    batch_size: int = 64
    half_full_half_missing: bool = True
    eval_every: int = 500
    val_size: int = 2_000

    def __post_init__(self):
        if self.iterations < 0 or self.batch_size < 2 or self.eval_every < 1:
            raise ValueError("invalid pretraining configuration")


@dataclass
class JointConfig:
    iterations: int = 10_000
    n_step: int = 4
    n_agents: int = 64
    epsilon_start: float = 1.0
    epsilon_end: float = 0.1
    epsilon_anneal_iters: int = 5_000
    target_sync_every: int = 100
    buffer_size: int = 10_000
    clf_batch_size: int = 64
    checkpoint_every: int = 1_000
    eval_every: int = 500
    val_size: int = 1_000

    def __post_init__(self):
        positive = [self.n_step, self.n_agents, self.epsilon_anneal_iters, self.target_sync_every,
                    self.buffer_size, self.clf_batch_size, self.checkpoint_every, self.eval_every]
        if self.iterations < 0 or min(positive) <= 0:
            raise ValueError("joint training settings must be positive")
        if not 0.0 <= self.epsilon_end <= self.epsilon_start <= 1.0:
            raise ValueError("need 0 <= epsilon_end <= epsilon_start <= 1")


# -- masking -------------------------------------------------------------------

def random_mask(n_groups, rng, p=None):
    """Drop every group independently with one per-instance probability ``p ~ U(0, 1)``."""
    if p is None:
        p = rng.random()
    return rng.random(n_groups) >= p


def random_masks(n, n_groups, rng):
    p = rng.random((n, 1))
    return rng.random((n, n_groups)) >= p


def mask_q(q, acquired):
    """Set Q-values of acquired groups to ``-inf``; STOP (last column) is untouched."""
    q = np.array(q, dtype=np.float64, copy=True)
    acquired = np.asarray(acquired, dtype=bool)
    if q.ndim == 1:
        q[:-1][acquired] = -np.inf
    else:
        q[:, :-1][acquired] = -np.inf
    return q


def epsilon_at(iteration, config):
    if iteration < 0:
        raise ValueError("iteration must be non-negative")
    frac = min(1.0, iteration / config.epsilon_anneal_iters)
    return config.epsilon_start + frac * (config.epsilon_end - config.epsilon_start)


# -- pretraining -----------------------------------------------------------------

def _val_subset(idx, size, rng):
    idx = np.asarray(idx)
    if size and idx.size > size:
        idx = np.sort(rng.choice(idx, size=size, replace=False))
    return idx


def _check_finite(name, value, bundle=None, diag_path=None):
    if not np.isfinite(value):
        if bundle is not None and diag_path is not None:
            bundle.save(diag_path, {"diagnostic": name})
        raise TrainingDiverged(f"non-finite {name} loss ({value})")


def pretrain(bundle, dataset, fold, config, seed=0):
    """Train both classifier stacks on mixed full / randomly masked batches.

    Keeps, separately for the label side and the adversary, the parameters
    with the best validation AUC under random masking. Returns
    ``(bundle, curve)`` with curve rows
    ``(iteration, label_auc, adv_auc, adv_gnl1)``; the mean group-normalized
    L1 of the adversary is monitored only and plays no part in selection.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xA11]))
    G = dataset.n_groups
    group_cols = dataset.group_matrix()
    train = np.asarray(fold.train_indices)
    val = _val_subset(fold.val_indices, config.val_size, rng)
    val_masks = random_masks(val.size, G, rng)
    val_tokens = tokens_for(dataset, val, val_masks, group_cols)
    counts = GroupCounts.from_sensitive(dataset.sensitive[train])
    curve = []
    if config.iterations == 0:
        return bundle, curve

    best = {"label": (-np.inf, None), "adv": (-np.inf, None)}

    def snapshot(names):
        return {n: {k: v.copy() for k, v in getattr(bundle, n).params.items()} for n in names}

    def validate(it):
        la = _safe_auc(bundle.predict_label(val_tokens), dataset.labels[val])
        p_b = bundle.predict_sensitive(val_tokens)
        aa = _safe_auc(p_b, dataset.sensitive[val])
        gnl1 = float(np.mean(adversary_loss_gnl1(p_b, dataset.sensitive[val], counts)))
        curve.append((it, la, aa, gnl1))
        if la > best["label"][0]:
            best["label"] = (la, snapshot(["label_encoder", "label_head"]))
        if aa > best["adv"][0]:
            best["adv"] = (aa, snapshot(["adv_encoder", "adv_head"]))

    half = config.batch_size // 2 if config.half_full_half_missing else 0
    for it in range(1, config.iterations + 1):
        ids = rng.choice(train, size=config.batch_size, replace=True)
        masks = np.ones((config.batch_size, G), dtype=bool)
        masks[half:] = random_masks(config.batch_size - half, G, rng)
        tok = tokens_for(dataset, ids, masks, group_cols)
        lc, g_enc, g_head = bundle.label_loss_grads(tok, dataset.labels[ids])
        _check_finite("label", lc)
        bundle.apply(label_encoder=g_enc, label_head=g_head)
        la, g_enc, g_head = bundle.adv_loss_grads(tok, dataset.sensitive[ids])
        _check_finite("adversary", la)
        bundle.apply(adv_encoder=g_enc, adv_head=g_head)
        if it % config.eval_every == 0 or it == config.iterations:
            validate(it)

    for side in ("label", "adv"):
        for name, params in best[side][1].items():
            getattr(bundle, name).params.update(params)
    bundle.sync_target()
    return bundle, curve


def _safe_auc(scores, labels):
    labels = np.asarray(labels)
    if labels.min() == labels.max():
        return float("nan")
    return auc(scores, labels)


# -- experience collection -----------------------------------------------------------

def select_actions(q, legal, epsilon, rng):
    """Epsilon-greedy over legal actions; greedy ties go to the lowest index."""
    greedy = kernels.masked_argmax(q, legal)
    if epsilon <= 0.0:
        return greedy
    keys = np.where(legal, rng.random(legal.shape), -1.0)
    random_pick = np.argmax(keys, axis=1)
    explore = rng.random(q.shape[0]) < epsilon
    return np.where(explore, random_pick, greedy)


def collect_experience(bundle, env, epsilon, n_step, rng, reward_config, labels, sensitive,
                       new_instance=None):
    """Run every agent for up to ``n_step`` actions and cut one record per agent.

    Agents whose episode ended are reset with ``new_instance(k)`` (array of
    ``k`` instance ids) when given. Returns ``(records, finished_lengths)``.
    """
    B = env.ids.size
    start_ids = env.ids.copy()
    masks = [[] for _ in range(B)]
    actions = [[] for _ in range(B)]
    live = np.ones(B, dtype=bool)
    done = np.zeros(B, dtype=bool)
    for _ in range(n_step):
        rows = np.flatnonzero(live)
        if rows.size == 0:
            break
        tok = env.tokens(env.ids[rows], env.acquired[rows])
        q = bundle.q_values(tok)
        legal = env.legal_mask(env.acquired[rows])
        a = select_actions(q, legal, epsilon, rng)
        for r, act in zip(rows, a):
            masks[r].append(env.acquired[r].copy())
            actions[r].append(int(act))
        stop = np.zeros(B, dtype=bool)
        stop_rows = env.step_rows(rows, a)
        stop[rows[stop_rows]] = True
        done |= stop
        live &= ~stop

    term_rows = np.flatnonzero(done)
    rewards = np.zeros(B)
    if term_rows.size:
        tok = env.tokens(env.ids[term_rows], env.acquired[term_rows])
        py = bundle.predict_label(tok)
        pb = bundle.predict_sensitive(tok)
        ids = env.ids[term_rows]
        rewards[term_rows] = terminal_rewards(py, labels[ids], pb, sensitive[ids], reward_config)

    records = []
    for r in range(B):
        if done[r]:
            records.append(ExperienceRecord(int(start_ids[r]), masks[r], actions[r], True, float(rewards[r])))
        else:
            records.append(ExperienceRecord(int(start_ids[r]), masks[r], actions[r], False,
                                            bootstrap_mask=env.acquired[r].copy()))
    lengths = env.t[term_rows].copy()
    if term_rows.size and new_instance is not None:
        env.reset(term_rows, new_instance(term_rows.size))
    return records, lengths


# -- targets -------------------------------------------------------------------------

@dataclass
class TDBatch:
    instance_ids: np.ndarray
    group_masks: np.ndarray
    actions: np.ndarray
    targets: np.ndarray


def bundle_q_functions(bundle, dataset, group_cols=None):
    group_cols = dataset.group_matrix() if group_cols is None else group_cols

    def online(ids, masks):
        return bundle.q_values(tokens_for(dataset, ids, masks, group_cols))

    def target(ids, masks):
        return bundle.q_values(tokens_for(dataset, ids, masks, group_cols), use_target=True)

    return online, target


def q_targets(records, online_q, target_q):
    """Targets for every (state, action) pair of ``records``.

    Terminal records use their terminal reward. Truncated records bootstrap
    with double Q-learning at the cut state ``s'``: the online net picks
    ``argmax_a`` over legal actions, the target net evaluates it. No
    intermediate rewards and no discounting.
    """
    ids, masks, acts, targets = [], [], [], []
    boot = [k for k, r in enumerate(records) if not r.terminal]
    boot_value = {}
    if boot:
        b_ids = np.array([records[k].instance_id for k in boot], dtype=np.int64)
        b_masks = np.stack([records[k].bootstrap_mask for k in boot])
        legal = np.concatenate([~b_masks, np.ones((len(boot), 1), dtype=bool)], axis=1)
        a_star = kernels.masked_argmax(np.asarray(online_q(b_ids, b_masks), dtype=np.float64), legal)
        qt = np.asarray(target_q(b_ids, b_masks), dtype=np.float64)
        vals = qt[np.arange(len(boot)), a_star]
        boot_value = dict(zip(boot, vals))
    for k, r in enumerate(records):
        R = r.reward if r.terminal else boot_value[k]
        for m, a in zip(r.group_masks, r.actions):
            ids.append(r.instance_id)
            masks.append(m)
            acts.append(a)
            targets.append(R)
    G = records[0].group_masks[0].size if records and records[0].group_masks else 0
    return TDBatch(np.array(ids, dtype=np.int64),
                   np.array(masks, dtype=bool).reshape(len(masks), G),
                   np.array(acts, dtype=np.int64), np.array(targets, dtype=np.float64))


# -- replay of visited states ------------------------------------------------------------

class StateBuffer:
    """Ring buffer of recently visited (instance, acquired-groups) states."""

    def __init__(self, capacity, n_groups):
        self.ids = np.zeros(capacity, dtype=np.int64)
        self.masks = np.zeros((capacity, n_groups), dtype=bool)
        self.capacity = capacity
        self.size = 0
        self.pos = 0

    def add(self, ids, masks):
        for i, m in zip(ids, masks):
            self.ids[self.pos] = i
            self.masks[self.pos] = m
            self.pos = (self.pos + 1) % self.capacity
            self.size = min(self.size + 1, self.capacity)

    def sample(self, n, rng):
        k = rng.integers(0, self.size, size=n)
        return self.ids[k], self.masks[k]


# -- joint training --------------------------------------------------------------------

def group_counts(dataset, indices):
    return GroupCounts.from_sensitive(dataset.sensitive[np.asarray(indices)])


def joint_train(bundle, dataset, fold, config, reward_config, seed=0, log_path=None,
                checkpoint_path=None, callback=None):
    """Alternate experience collection, TD updates and classifier/adversary updates.

    Returns ``(bundle, logs)`` where ``logs`` has ``rows`` (one dict per
    iteration, columns of ``TRAIN_LOG_HEADER``) and ``validation`` (a sweep
    every ``eval_every`` iterations). ``callback(iteration, bundle)`` runs at
    the end of each iteration.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5EED]))
    G = dataset.n_groups
    group_cols = dataset.group_matrix()
    train = np.asarray(fold.train_indices)
    val = _val_subset(fold.val_indices, config.val_size, rng)
    online_q, target_q = bundle_q_functions(bundle, dataset, group_cols)

    def draw(k):
        return rng.choice(train, size=k, replace=True)

    env = BatchEnv(dataset, draw(config.n_agents))
    buf = StateBuffer(config.buffer_size, G)
    rows, validation = [], []
    writer = fh = None
    if log_path is not None:
        fh = open(log_path, "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(TRAIN_LOG_HEADER)
    diag = None if checkpoint_path is None else Path(checkpoint_path).with_name("diverged.npz")
    try:
        for it in range(1, config.iterations + 1):
            eps = epsilon_at(it - 1, config)
            records, lengths = collect_experience(bundle, env, eps, config.n_step, rng, reward_config,
                                                  dataset.labels, dataset.sensitive, new_instance=draw)
            td = q_targets(records, online_q, target_q)
            tok = tokens_for(dataset, td.instance_ids, td.group_masks, group_cols)
            td_loss, g_enc, g_pol = bundle.td_loss_grads(tok, td.actions, td.targets)
            _check_finite("td", td_loss, bundle, diag)
            bundle.apply(label_encoder=g_enc, policy=g_pol)

            buf.add(td.instance_ids, td.group_masks)
            boot = [r for r in records if not r.terminal]
            if boot:
                buf.add([r.instance_id for r in boot], [r.bootstrap_mask for r in boot])
            s_ids, s_masks = buf.sample(config.clf_batch_size, rng)
            s_tok = tokens_for(dataset, s_ids, s_masks, group_cols)
            clf_loss, g_enc, g_head = bundle.label_loss_grads(s_tok, dataset.labels[s_ids])
            _check_finite("classifier", clf_loss, bundle, diag)
            bundle.apply(label_encoder=g_enc, label_head=g_head)
            adv_loss, g_enc, g_head = bundle.adv_loss_grads(s_tok, dataset.sensitive[s_ids])
            _check_finite("adversary", adv_loss, bundle, diag)
            bundle.apply(adv_encoder=g_enc, adv_head=g_head)

            if it % config.target_sync_every == 0:
                bundle.sync_target()

            row = {"iteration": it, "td_loss": td_loss, "clf_loss": clf_loss, "adv_loss": adv_loss,
                   "epsilon": eps,
                   "mean_episode_length": float(lengths.mean()) if lengths.size else float("nan")}
            rows.append(row)
            if writer is not None:
                writer.writerow([repr(row[k]) if isinstance(row[k], float) else row[k] for k in TRAIN_LOG_HEADER])
            if checkpoint_path is not None and it % config.checkpoint_every == 0:
                bundle.save(checkpoint_path, {"iteration": it})
            if it % config.eval_every == 0 and val.size:
                run = evaluate_policy(bundle, dataset, val)
                validation.append({"iteration": it, "auc": _safe_auc(run.probabilities, run.y),
                                   "disparity": run.disparity(), "mean_features": run.mean_features})
            if callback is not None:
                callback(it, bundle)
    finally:
        if fh is not None:
            fh.close()
    return bundle, {"rows": rows, "validation": validation}


def config_dict(cfg):
    return asdict(cfg)
