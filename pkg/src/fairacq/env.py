"""Per-instance acquisition MDP and the end-of-episode reward.

States are the set of acquired action groups of one instance. Every action
either acquires an unacquired group or is STOP (index ``n_groups``), which
always exists and is the only way to end an episode. Intermediate rewards
are zero and nothing is discounted: all reward arrives at STOP.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .set_encoder import TokenBatch

PROB_CLAMP = 1e-7
LOSS_KINDS = ("CE", "GNL1")


class IllegalActionError(ValueError):
    pass


@dataclass(frozen=True)
class AcquisitionState:
    instance_id: int
    acquired: frozenset = frozenset()
    coords: tuple = ()
    values: tuple = ()
    t: int = 0
    terminal: bool = False

    @property
    def n_observed(self):
        return len(self.coords)

    def group_mask(self, n_groups):
        m = np.zeros(n_groups, dtype=bool)
        m[list(self.acquired)] = True
        return m


def initial_state(instance_id):
    return AcquisitionState(int(instance_id))


def legal_actions(state, n_groups):
    """Unacquired group ids plus STOP (``n_groups``)."""
    return {g for g in range(n_groups) if g not in state.acquired} | {n_groups}


def step(state, action, dataset):
    """Apply ``action``. Returns ``(next_state, terminal)``."""
    G = dataset.n_groups
    if state.terminal:
        raise IllegalActionError("episode already terminated")
    if action == G:
        return AcquisitionState(state.instance_id, state.acquired, state.coords, state.values,
                                state.t, True), True
    if not 0 <= action < G or action in state.acquired:
        raise IllegalActionError(f"action {action} is not legal in state with groups {sorted(state.acquired)}")
    idx = dataset.groups[action].feature_indices
    x = dataset.features[state.instance_id]
    coords = state.coords + tuple(int(j) for j in idx)
    values = state.values + tuple(float(x[j]) for j in idx)
    return AcquisitionState(state.instance_id, state.acquired | {action}, coords, values, state.t + 1), False


def state_batch(states):
    """Token batch for a list of states (tokens in acquisition order)."""
    L = max([1] + [s.n_observed for s in states])
    c = np.zeros((len(states), L), dtype=np.int64)
    v = np.zeros((len(states), L))
    m = np.zeros((len(states), L), dtype=bool)
    for i, s in enumerate(states):
        k = s.n_observed
        c[i, :k] = s.coords
        v[i, :k] = s.values
        m[i, :k] = True
    return TokenBatch(c, v, m)


def as_batch(observed):
    """Coerce a TokenBatch, a state, or a list of states into a TokenBatch."""
    if isinstance(observed, TokenBatch):
        return observed
    if isinstance(observed, AcquisitionState):
        return state_batch([observed])
    return state_batch(list(observed))


# -- losses and reward -------------------------------------------------------

def adversary_loss_ce(prob_b, b):
    p = np.clip(prob_b, PROB_CLAMP, 1 - PROB_CLAMP)
    return -(b * np.log(p) + (1 - b) * np.log(1 - p))


@dataclass(frozen=True)
class GroupCounts:
    total: int
    n0: int
    n1: int

    def __post_init__(self):
        if self.n0 + self.n1 != self.total:
            raise ValueError("group counts must sum to the population size")
        if self.n0 <= 0 or self.n1 <= 0:
            raise ValueError("both sensitive groups need a positive count")

    @classmethod
    def from_sensitive(cls, b):
        b = np.asarray(b)
        n1 = int(b.sum())
        return cls(int(b.size), int(b.size) - n1, n1)


def adversary_loss_gnl1(prob_b, b, counts):
    """Group-normalized L1: ``|P| / (2 |P_b|) * |p - b|``."""
    size_b = np.where(np.asarray(b) == 1, counts.n1, counts.n0)
    return counts.total / (2.0 * size_b) * np.abs(np.asarray(prob_b) - b)


@dataclass(frozen=True)
class RewardConfig:
    gamma: float
    kind: str = "CE"
    counts: GroupCounts | None = None

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError(f"gamma must lie in [0, 1], got {self.gamma}")
        if self.kind not in LOSS_KINDS:
            raise ValueError(f"unknown adversary loss kind {self.kind!r}")
        if self.kind == "GNL1" and self.counts is None:
            raise ValueError("GNL1 reward needs group counts")


def reward_from_losses(label_loss, adv_loss, gamma):
    return -(1.0 - gamma) * label_loss + gamma * adv_loss


def terminal_rewards(prob_y, y, prob_b, b, config):
    """Vectorized end-of-episode reward for predicted probabilities."""
    lc = adversary_loss_ce(prob_y, y)
    if config.kind == "CE":
        la = adversary_loss_ce(prob_b, b)
    else:
        la = adversary_loss_gnl1(prob_b, b, config.counts)
    return reward_from_losses(lc, la, config.gamma)


def terminal_reward(final_state, bundle, labels, config):
    """Reward of a terminated episode. ``labels`` is the pair ``(y, b)``."""
    if not final_state.terminal:
        raise ValueError("reward is only defined for terminal states")
    y, b = labels
    batch = as_batch(final_state)
    py = bundle.predict_label(batch)[0]
    pb = bundle.predict_sensitive(batch)[0]
    return float(terminal_rewards(py, y, pb, b, config))


# -- n-step experience ---------------------------------------------------------

@dataclass
class ExperienceRecord:
    """A trajectory fragment of one agent.

    ``group_masks[k]`` is the acquired-group mask before ``actions[k]``.
    Terminal records carry ``reward``; truncated ones carry ``bootstrap_mask``.
    """

    instance_id: int
    group_masks: list
    actions: list
    terminal: bool
    reward: float | None = None
    bootstrap_mask: np.ndarray | None = None
    extra: dict = field(default_factory=dict)

    def to_json(self):
        return json.dumps({
            "instance_id": int(self.instance_id),
            "groups": [np.flatnonzero(m).tolist() for m in self.group_masks],
            "actions": [int(a) for a in self.actions],
            "terminal": bool(self.terminal),
            "reward": None if self.reward is None else float(self.reward),
            "bootstrap": None if self.bootstrap_mask is None else np.flatnonzero(self.bootstrap_mask).tolist(),
        })


class BatchEnv:
    """Lockstep environments over one dataset, one agent per row.

    Acquired groups are tracked as a boolean ``(B, n_groups)`` mask; token
    batches are built on demand from the dataset rows.
    """

    def __init__(self, dataset, instance_ids):
        self.dataset = dataset
        self.G = dataset.n_groups
        self.group_cols = dataset.group_matrix()
        self.ids = np.asarray(instance_ids, dtype=np.int64).copy()
        self.acquired = np.zeros((self.ids.size, self.G), dtype=bool)
        self.t = np.zeros(self.ids.size, dtype=np.int64)

    def legal_mask(self, acquired=None):
        acquired = self.acquired if acquired is None else acquired
        return np.concatenate([~acquired, np.ones((acquired.shape[0], 1), dtype=bool)], axis=1)

    def tokens(self, ids=None, acquired=None):
        ids = self.ids if ids is None else ids
        acquired = self.acquired if acquired is None else acquired
        return tokens_for(self.dataset, ids, acquired, self.group_cols)

    def step(self, actions):
        """Advance every agent; returns the boolean STOP vector."""
        return self.step_rows(np.arange(self.ids.size), actions)

    def step_rows(self, rows, actions):
        """Advance only ``rows``; returns the STOP flags aligned with ``rows``."""
        rows = np.asarray(rows, dtype=np.int64)
        actions = np.asarray(actions, dtype=np.int64)
        stop = actions == self.G
        acq_rows = rows[~stop]
        acq = actions[~stop]
        if np.any(self.acquired[acq_rows, acq]):
            raise IllegalActionError("an agent tried to re-acquire a group")
        self.acquired[acq_rows, acq] = True
        self.t[acq_rows] += 1
        return stop

    def reset(self, rows, new_ids):
        self.ids[rows] = new_ids
        self.acquired[rows] = False
        self.t[rows] = 0


def tokens_for(dataset, ids, group_masks, group_cols=None):
    group_cols = dataset.group_matrix() if group_cols is None else group_cols
    colmask = (group_masks.astype(np.uint8) @ group_cols.astype(np.uint8)) > 0
    return TokenBatch.from_dense(dataset.features[ids], colmask)
