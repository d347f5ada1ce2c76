import itertools
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fairacq.data import ActionGroup, EncodedDataset, make_synthetic
from fairacq.env import (BatchEnv, ExperienceRecord, GroupCounts, IllegalActionError, RewardConfig,
                         adversary_loss_ce, adversary_loss_gnl1, as_batch, initial_state, legal_actions,
                         reward_from_losses, step, terminal_reward, terminal_rewards)
from fairacq.networks import ModelBundle


def toy_dataset(n=50, seed=0):
    """Four groups: two numeric columns, a 3-level one-hot block, one more numeric."""
    rng = np.random.default_rng(seed)
    cat = rng.integers(0, 3, n)
    X = np.column_stack([rng.standard_normal(n), rng.standard_normal(n), np.eye(3)[cat], rng.standard_normal(n)])
    groups = [ActionGroup(0, (0,), "a"), ActionGroup(1, (1,), "b"), ActionGroup(2, (2, 3, 4), "c"),
              ActionGroup(3, (5,), "d")]
    return EncodedDataset(X, rng.integers(0, 2, n).astype(np.int8), rng.integers(0, 2, n).astype(np.int8), groups)


class FixedBundle:
    """Stands in for a ModelBundle with fixed output probabilities."""

    def __init__(self, py, pb):
        self.py, self.pb = py, pb

    def predict_label(self, batch):
        return np.full(batch.size, self.py)

    def predict_sensitive(self, batch):
        return np.full(batch.size, self.pb)


# -- legal actions and transitions -----------------------------------------------------

def test_legal_actions_examples():
    assert legal_actions(initial_state(0), 4) == {0, 1, 2, 3, 4}
    s = initial_state(0)
    ds = toy_dataset()
    s, _ = step(s, 0, ds)
    s, _ = step(s, 2, ds)
    assert legal_actions(s, 4) == {1, 3, 4}
    for g in (1, 3):
        s, _ = step(s, g, ds)
    assert legal_actions(s, 4) == {4}


def test_stop_from_empty_state():
    s, terminal = step(initial_state(7), 4, toy_dataset())
    assert terminal and s.terminal
    assert s.acquired == frozenset() and s.n_observed == 0


def test_acquire_adds_exactly_group_coordinates():
    ds = toy_dataset()
    s0 = initial_state(5)
    s1, terminal = step(s0, 2, ds)
    assert not terminal
    assert s1.coords == (2, 3, 4) and s1.t == 1
    assert s1.values == tuple(ds.features[5, [2, 3, 4]])
    s2, _ = step(s1, 0, ds)
    assert s2.coords[:3] == s1.coords and set(s2.coords) - set(s1.coords) == {0}


def test_acquire_all_then_stop_observes_every_column():
    ds = toy_dataset()
    s = initial_state(1)
    for g in (3, 1, 0, 2):
        s, terminal = step(s, g, ds)
        assert not terminal
    s, terminal = step(s, 4, ds)
    assert terminal
    assert sorted(s.coords) == list(range(ds.n_features))
    assert s.t == 4


def test_illegal_actions_raise():
    ds = toy_dataset()
    s, _ = step(initial_state(0), 1, ds)
    with pytest.raises(IllegalActionError):
        step(s, 1, ds)
    with pytest.raises(IllegalActionError):
        step(s, 9, ds)
    done, _ = step(s, 4, ds)
    with pytest.raises(IllegalActionError):
        step(done, 0, ds)


@given(seed=st.integers(0, 10_000))
@settings(max_examples=50, deadline=None)
def test_random_episodes_terminate_and_grow(seed):
    ds = toy_dataset()
    rng = np.random.default_rng(seed)
    s = initial_state(int(rng.integers(ds.n_instances)))
    steps = 0
    while True:
        a = int(rng.choice(sorted(legal_actions(s, ds.n_groups))))
        nxt, terminal = step(s, a, ds)
        steps += 1
        if terminal:
            break
        assert s.acquired < nxt.acquired and len(nxt.acquired - s.acquired) == 1
        cols = sorted(j for g in nxt.acquired for j in ds.groups[g].feature_indices)
        assert sorted(nxt.coords) == cols and nxt.t == len(nxt.acquired)
        s = nxt
    assert steps <= ds.n_groups + 1


# -- losses ------------------------------------------------------------------------------

def test_ce_examples():
    assert adversary_loss_ce(0.5, 0) == pytest.approx(math.log(2), abs=1e-9)
    assert adversary_loss_ce(0.5, 1) == pytest.approx(0.693147, abs=1e-6)
    assert adversary_loss_ce(1.0, 1) <= 1e-6
    assert adversary_loss_ce(0.0, 0) <= 1e-6
    assert adversary_loss_ce(0.25, 1) == pytest.approx(-math.log(0.25), abs=1e-9)
    assert np.isfinite(adversary_loss_ce(0.0, 1))


def test_gnl1_examples():
    assert adversary_loss_gnl1(1.0, 1, GroupCounts(100, 50, 50)) == 0.0
    assert adversary_loss_gnl1(0.5, 1, GroupCounts(100, 75, 25)) == pytest.approx(1.0, abs=1e-9)
    assert adversary_loss_gnl1(0.0, 0, GroupCounts(100, 75, 25)) == 0.0
    # the small group is weighted up: 100 / (2 * 25) vs 100 / (2 * 75)
    assert adversary_loss_gnl1(0.0, 1, GroupCounts(100, 75, 25)) == pytest.approx(2.0)
    assert adversary_loss_gnl1(1.0, 0, GroupCounts(100, 75, 25)) == pytest.approx(2 / 3)


def test_group_counts_validation():
    with pytest.raises(ValueError):
        GroupCounts(100, 60, 30)
    with pytest.raises(ValueError):
        GroupCounts(100, 100, 0)
    assert GroupCounts.from_sensitive([0, 1, 1, 0, 0]) == GroupCounts(5, 3, 2)


def test_reward_config_validation():
    with pytest.raises(ValueError):
        RewardConfig(1.5)
    with pytest.raises(ValueError):
        RewardConfig(0.5, "L2")
    with pytest.raises(ValueError):
        RewardConfig(0.5, "GNL1")


def test_reward_examples():
    assert reward_from_losses(0.6, 0.8, 0.5) == pytest.approx(0.1, abs=1e-9)
    assert reward_from_losses(0.6, 0.8, 0.0) == pytest.approx(-0.6, abs=1e-9)
    assert reward_from_losses(0.6, 0.8, 1.0) == pytest.approx(0.8, abs=1e-9)


def test_terminal_reward_through_bundle():
    ds = toy_dataset()
    s, _ = step(initial_state(0), 4, ds)
    fb = FixedBundle(py=0.8, pb=0.3)
    lc, la = -math.log(0.8), -math.log(0.7)
    assert terminal_reward(s, fb, (1, 0), RewardConfig(0.0)) == pytest.approx(-lc, abs=1e-9)
    assert terminal_reward(s, fb, (1, 0), RewardConfig(1.0)) == pytest.approx(la, abs=1e-9)
    assert terminal_reward(s, fb, (1, 0), RewardConfig(0.25)) == pytest.approx(-0.75 * lc + 0.25 * la, abs=1e-9)
    gn = RewardConfig(0.5, "GNL1", GroupCounts(10, 8, 2))
    assert terminal_reward(s, fb, (1, 0), gn) == pytest.approx(-0.5 * lc + 0.5 * 10 / 16 * 0.3, abs=1e-9)


def test_terminal_reward_rejects_live_state():
    with pytest.raises(ValueError):
        terminal_reward(initial_state(0), FixedBundle(0.5, 0.5), (0, 0), RewardConfig(0.5))


@given(gamma=st.floats(0.01, 0.99), lc=st.floats(0, 5), la=st.floats(0, 5), delta=st.floats(1e-3, 1))
def test_reward_monotone_in_losses(gamma, lc, la, delta):
    r = reward_from_losses(lc, la, gamma)
    assert reward_from_losses(lc, la + delta, gamma) > r
    assert reward_from_losses(lc + delta, la, gamma) < r


def test_vectorized_rewards_match_scalar():
    rng = np.random.default_rng(0)
    py, pb = rng.random(20), rng.random(20)
    y, b = rng.integers(0, 2, 20), rng.integers(0, 2, 20)
    counts = GroupCounts.from_sensitive(b)
    for cfg in (RewardConfig(0.3), RewardConfig(0.7, "GNL1", counts)):
        vec = terminal_rewards(py, y, pb, b, cfg)
        for i in range(20):
            la = adversary_loss_ce(pb[i], b[i]) if cfg.kind == "CE" else adversary_loss_gnl1(pb[i], b[i], counts)
            assert vec[i] == pytest.approx(reward_from_losses(adversary_loss_ce(py[i], y[i]), la, cfg.gamma))


# -- reward / objective equivalence -------------------------------------------------------

def objective_summand(p_y, y, p_b, b, gamma):
    """Per-instance minimization objective ``(1-g) CE(label) - g CE(sensitive)``."""
    clamp = lambda p: min(max(p, 1e-7), 1 - 1e-7)  # noqa: E731
    ce = lambda p, t: -(t * math.log(clamp(p)) + (1 - t) * math.log(1 - clamp(p)))  # noqa: E731
    return (1 - gamma) * ce(p_y, y) - gamma * ce(p_b, b)


def test_best_subset_maximizes_reward_iff_minimizes_objective():
    ds = toy_dataset(n=50, seed=3)
    bundle = ModelBundle(ds.n_features, ds.n_groups, seed=4)
    subsets = [c for k in range(5) for c in itertools.combinations(range(4), k)]
    assert len(subsets) == 16
    for gamma in (0.0, 0.3, 0.7, 1.0):
        cfg = RewardConfig(gamma)
        for i in range(ds.n_instances):
            rewards, objectives = [], []
            for sub in subsets:
                s = initial_state(i)
                for g in sub:
                    s, _ = step(s, g, ds)
                s, _ = step(s, 4, ds)
                rewards.append(terminal_reward(s, bundle, (ds.labels[i], ds.sensitive[i]), cfg))
                batch = as_batch(s)
                objectives.append(objective_summand(bundle.predict_label(batch)[0], ds.labels[i],
                                                    bundle.predict_sensitive(batch)[0], ds.sensitive[i], gamma))
            best_r = {k for k, r in enumerate(rewards) if r >= max(rewards) - 1e-12}
            best_o = {k for k, o in enumerate(objectives) if o <= min(objectives) + 1e-12}
            assert best_r == best_o


# -- batched environment -------------------------------------------------------------------

def test_batch_env_matches_single_steps():
    ds = toy_dataset()
    env = BatchEnv(ds, [0, 1, 2])
    states = [initial_state(i) for i in (0, 1, 2)]
    for acts in ([2, 4, 0], [1, 4, 3]):
        rows = [r for r in range(3) if not states[r].terminal]
        stop = env.step_rows(rows, [acts[r] for r in rows])
        for k, r in enumerate(rows):
            states[r], term = step(states[r], acts[r], ds)
            assert term == stop[k]
    for r in range(3):
        np.testing.assert_array_equal(env.acquired[r], states[r].group_mask(4))
    tok = env.tokens()
    single = as_batch(states[0])
    np.testing.assert_array_equal(np.sort(tok.coords[0][tok.mask[0]]), np.sort(single.coords[0][single.mask[0]]))


def test_batch_env_rejects_reacquire():
    env = BatchEnv(toy_dataset(), [0])
    env.step([1])
    with pytest.raises(IllegalActionError):
        env.step([1])


def test_batch_env_legal_mask_and_reset():
    env = BatchEnv(toy_dataset(), [0, 1])
    env.step([0, 4])
    np.testing.assert_array_equal(env.legal_mask(), [[False, True, True, True, True], [True] * 5])
    env.reset(np.array([0]), np.array([9]))
    assert env.ids.tolist() == [9, 1] and not env.acquired[0].any() and env.t[0] == 0


def test_record_json_log():
    rec = ExperienceRecord(3, [np.array([False, False]), np.array([True, False])], [0, 2], True, 0.25)
    assert json.loads(rec.to_json()) == {"instance_id": 3, "groups": [[], [0]], "actions": [0, 2],
                                         "terminal": True, "reward": 0.25, "bootstrap": None}


def test_synthetic_state_batch_shapes():
    ds = make_synthetic(200, d_noise=2, seed=0)
    s, _ = step(initial_state(0), 0, ds)
    b = as_batch([initial_state(1), s])
    assert b.coords.shape == (2, 1) and b.mask.tolist() == [[False], [True]]
