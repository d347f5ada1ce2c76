"""The two encoders, three heads and the delayed target policy."""
from __future__ import annotations

import copy
import json
import os
from pathlib import Path

import numpy as np

from .nn import MLP, Adam, bce_with_probs, sigmoid
from .set_encoder import LSTM_HIDDEN, SetEncoder, TokenBatch

CHECKPOINT_FORMAT_VERSION = 1
HEAD_HIDDEN = 64
PROB_CLAMP = 1e-7

MODULE_NAMES = ("label_encoder", "label_head", "policy", "adv_encoder", "adv_head", "target_policy")


class ModelBundle:
    """All trainable networks plus the optimizer state.

    ``label_encoder`` feeds both ``label_head`` and ``policy``;
    ``adv_encoder`` feeds ``adv_head`` only and shares nothing with the
    label side. Q-value layout: one entry per action group, then STOP last.
    """

    def __init__(self, n_features, n_groups, seed=0, lr=1e-3):
        rng = np.random.default_rng(seed)
        self.n_features = int(n_features)
        self.n_groups = int(n_groups)
        self.label_encoder = SetEncoder(n_features, rng)
        self.label_head = MLP((LSTM_HIDDEN, HEAD_HIDDEN, HEAD_HIDDEN, 1), rng)
        self.policy = MLP((LSTM_HIDDEN, HEAD_HIDDEN, HEAD_HIDDEN, n_groups + 1), rng)
        self.adv_encoder = SetEncoder(n_features, rng)
        self.adv_head = MLP((LSTM_HIDDEN, HEAD_HIDDEN, HEAD_HIDDEN, 1), rng)
        self.target_policy = copy.deepcopy(self.policy)
        self.optimizer = Adam(lr=lr)

    @property
    def stop_action(self):
        return self.n_groups

    def modules(self):
        return {name: getattr(self, name) for name in MODULE_NAMES}

    # -- forward ---------------------------------------------------------
    def predict_label(self, batch):
        z, _ = self.label_encoder.forward(batch)
        logit, _ = self.label_head.forward(z)
        return sigmoid(logit[:, 0])

    def predict_sensitive(self, batch):
        z, _ = self.adv_encoder.forward(batch)
        logit, _ = self.adv_head.forward(z)
        return sigmoid(logit[:, 0])

    def q_values(self, batch, use_target=False):
        z, _ = self.label_encoder.forward(batch)
        head = self.target_policy if use_target else self.policy
        q, _ = head.forward(z)
        return q

    def label_side(self, batch):
        """Label probabilities and online Q-values from one encoder pass."""
        z, _ = self.label_encoder.forward(batch)
        logit, _ = self.label_head.forward(z)
        q, _ = self.policy.forward(z)
        return sigmoid(logit[:, 0]), q

    def sync_target(self):
        for k, v in self.policy.params.items():
            self.target_policy.params[k] = v.copy()
        return self

    # -- losses with gradients ---------------------------------------------
    def label_loss_grads(self, batch, y):
        """Mean BCE of the label classifier and grads for (label_encoder, label_head)."""
        return _classifier_loss_grads(self.label_encoder, self.label_head, batch, y)

    def adv_loss_grads(self, batch, b):
        return _classifier_loss_grads(self.adv_encoder, self.adv_head, batch, b)

    def td_loss_grads(self, batch, actions, targets):
        """Mean squared TD error ``(Q(s, a) - R)^2`` and grads for (label_encoder, policy)."""
        z, ecache = self.label_encoder.forward(batch)
        q, pcache = self.policy.forward(z)
        rows = np.arange(q.shape[0])
        err = q[rows, actions] - targets
        loss = float(np.mean(err ** 2))
        dq = np.zeros_like(q)
        dq[rows, actions] = 2.0 * err / q.shape[0]
        dz, g_pol = self.policy.backward(dq, pcache)
        g_enc = self.label_encoder.backward(dz, ecache)
        return loss, g_enc, g_pol

    # -- updates -----------------------------------------------------------
    def apply(self, **grads_by_module):
        for name, grads in grads_by_module.items():
            if name == "target_policy":
                raise ValueError("the target policy is only updated by sync_target")
            self.optimizer.step(name, getattr(self, name).params, grads)

    # -- persistence -------------------------------------------------------
    def state_arrays(self, include_optimizer=True):
        out = {}
        for name, mod in self.modules().items():
            for k, v in mod.params.items():
                out[f"{name}/{k}"] = v
        if include_optimizer:
            for k, v in self.optimizer.state_arrays().items():
                out[f"adam/{k}"] = v
        return out

    def save(self, path, extra_meta=None):
        path = Path(path)
        arrays = self.state_arrays()
        meta = {
            "format_version": CHECKPOINT_FORMAT_VERSION,
            "n_features": self.n_features,
            "n_groups": self.n_groups,
            "lr": self.optimizer.lr,
            "shapes": {k: list(v.shape) for k, v in arrays.items()},
        }
        if extra_meta:
            meta.update(extra_meta)
        tmp = path.with_name(path.name + ".tmp")
        with open(tmp, "wb") as fh:
            np.savez(fh, __meta__=np.array(json.dumps(meta, sort_keys=True)), **arrays)
        os.replace(tmp, path)

    @classmethod
    def load(cls, path):
        with np.load(path, allow_pickle=False) as z:
            meta = json.loads(str(z["__meta__"]))
            if meta.get("format_version") != CHECKPOINT_FORMAT_VERSION:
                raise ValueError(f"unsupported checkpoint format version {meta.get('format_version')}")
            bundle = cls(meta["n_features"], meta["n_groups"], seed=0, lr=meta["lr"])
            adam = {}
            for key in z.files:
                if key == "__meta__":
                    continue
                if key.startswith("adam/"):
                    adam[key[len("adam/"):]] = z[key]
                    continue
                name, param = key.split("/", 1)
                target = getattr(bundle, name).params
                if target[param].shape != z[key].shape:
                    raise ValueError(f"shape mismatch for {key}")
                target[param] = np.array(z[key], dtype=np.float64)
            bundle.optimizer.load_state_arrays(adam)
        return bundle

    def copy(self):
        return copy.deepcopy(self)


def _classifier_loss_grads(encoder, head, batch, target):
    z, ecache = encoder.forward(batch)
    logit, hcache = head.forward(z)
    p = sigmoid(logit[:, 0])
    loss, dlogit = bce_with_probs(p, np.asarray(target, dtype=np.float64), PROB_CLAMP)
    dz, g_head = head.backward(dlogit[:, None], hcache)
    g_enc = encoder.backward(dz, ecache)
    return loss, g_enc, g_head


def empty_batch(size=1):
    return TokenBatch(np.zeros((size, 1), dtype=np.int64), np.zeros((size, 1)), np.zeros((size, 1), dtype=bool))


# -- functional views ------------------------------------------------------------
# Accept a TokenBatch, a single acquisition state or a list of states.

def predict_label(observed, bundle):
    from .env import as_batch
    return bundle.predict_label(as_batch(observed))


def predict_sensitive(observed, bundle):
    from .env import as_batch
    return bundle.predict_sensitive(as_batch(observed))


def q_values(observed, bundle, use_target=False):
    from .env import as_batch
    return bundle.q_values(as_batch(observed), use_target=use_target)


def sync_target(bundle):
    return bundle.sync_target()
