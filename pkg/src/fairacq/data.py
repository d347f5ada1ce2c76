"""Tabular ingestion, encoding into acquisition groups, folds and a synthetic generator."""
from __future__ import annotations

import csv
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

DATASET_FORMAT_VERSION = 1

ADULT_COLUMNS = [
    ("age", "numeric"),
    ("workclass", "categorical"),
    ("fnlwgt", "numeric"),
    ("education", "categorical"),
    ("education-num", "numeric"),
    ("marital-status", "categorical"),
    ("occupation", "categorical"),
    ("relationship", "categorical"),
    ("race", "categorical"),
    ("sex", "categorical"),
    ("capital-gain", "numeric"),
    ("capital-loss", "numeric"),
    ("hours-per-week", "numeric"),
    ("native-country", "categorical"),
]
ADULT_LABEL = "income"
ADULT_SENSITIVE = "sex"
# bit assignments: income >50K -> 1, Female -> 1
ADULT_POSITIVE_LABEL = ">50K"
ADULT_SENSITIVE_ONE = "Female"

ADULT_LEVELS = {
    "workclass": ["Private", "Self-emp-not-inc", "Self-emp-inc", "Federal-gov", "Local-gov",
                  "State-gov", "Without-pay", "Never-worked"],
    "education": ["Bachelors", "Some-college", "11th", "HS-grad", "Prof-school", "Assoc-acdm",
                  "Assoc-voc", "9th", "7th-8th", "12th", "Masters", "1st-4th", "10th", "Doctorate",
                  "5th-6th", "Preschool"],
    "marital-status": ["Married-civ-spouse", "Divorced", "Never-married", "Separated", "Widowed",
                       "Married-spouse-absent", "Married-AF-spouse"],
    "occupation": ["Tech-support", "Craft-repair", "Other-service", "Sales", "Exec-managerial",
                   "Prof-specialty", "Handlers-cleaners", "Machine-op-inspct", "Adm-clerical",
                   "Farming-fishing", "Transport-moving", "Priv-house-serv", "Protective-serv",
                   "Armed-Forces"],
    "relationship": ["Wife", "Own-child", "Husband", "Not-in-family", "Other-relative", "Unmarried"],
    "race": ["White", "Asian-Pac-Islander", "Amer-Indian-Eskimo", "Other", "Black"],
    "sex": ["Female", "Male"],
    "native-country": ["United-States", "Cambodia", "England", "Puerto-Rico", "Canada", "Germany",
                       "Outlying-US(Guam-USVI-etc)", "India", "Japan", "Greece", "South", "China",
                       "Cuba", "Iran", "Honduras", "Philippines", "Italy", "Poland", "Jamaica",
                       "Vietnam", "Mexico", "Portugal", "Ireland", "France", "Dominican-Republic",
                       "Laos", "Ecuador", "Taiwan", "Haiti", "Columbia", "Hungary", "Guatemala",
                       "Nicaragua", "Scotland", "Thailand", "Yugoslavia", "El-Salvador",
                       "Trinadad&Tobago", "Peru", "Hong", "Holand-Netherlands"],
}


class DataError(ValueError):
    pass


@dataclass
class FeatureSchema:
    columns: list  # [(name, kind)] acquirable columns, kind in {"numeric", "categorical"}
    sensitive_column: str
    label_column: str

    def __post_init__(self):
        names = [n for n, _ in self.columns]
        if len(set(names)) != len(names):
            raise DataError("column names must be unique")
        for n, k in self.columns:
            if k not in ("numeric", "categorical"):
                raise DataError(f"column {n!r}: unknown kind {k!r}")
        if self.sensitive_column in names or self.label_column in names:
            raise DataError("sensitive and label columns cannot be acquirable features")


@dataclass
class ActionGroup:
    group_id: int
    feature_indices: tuple
    source_column: str


@dataclass
class EncodedDataset:
    features: np.ndarray  # (n, d) float64
    labels: np.ndarray  # (n,) int8 in {0,1}
    sensitive: np.ndarray  # (n,) int8 in {0,1}
    groups: list  # [ActionGroup]
    standardization_stats: dict = field(default_factory=dict)  # column -> (mean, std)
    feature_names: list = field(default_factory=list)
    name: str = "dataset"

    def __post_init__(self):
        check_partition(self.groups, self.features.shape[1])

    @property
    def n_instances(self):
        return self.features.shape[0]

    @property
    def n_features(self):
        return self.features.shape[1]

    @property
    def n_groups(self):
        return len(self.groups)

    def group_matrix(self):
        """Boolean ``(n_groups, d)`` indicator of which columns each group owns."""
        G = np.zeros((self.n_groups, self.n_features), dtype=bool)
        for g in self.groups:
            G[g.group_id, list(g.feature_indices)] = True
        return G

    def group_index(self, source_column):
        for g in self.groups:
            if g.source_column == source_column:
                return g.group_id
        raise KeyError(source_column)


@dataclass
class FoldSplit:
    fold_id: int
    train_indices: np.ndarray
    val_indices: np.ndarray
    test_indices: np.ndarray


def check_partition(groups, d):
    seen = np.zeros(d, dtype=int)
    for k, g in enumerate(groups):
        if g.group_id != k:
            raise DataError(f"group ids must be 0..n-1 in order, got {g.group_id} at {k}")
        if len(g.feature_indices) == 0:
            raise DataError(f"group {k} is empty")
        for j in g.feature_indices:
            seen[j] += 1
    if not np.all(seen == 1):
        raise DataError("action groups must partition the encoded feature indices")


# -- Adult ------------------------------------------------------------------

def _adult_files(path):
    path = Path(path)
    if path.is_dir():
        files = [p for p in (path / "adult.data", path / "adult.test") if p.exists()]
        if not files:
            raise FileNotFoundError(f"no adult.data / adult.test under {path}")
        return files
    if not path.exists():
        raise FileNotFoundError(str(path))
    return [path]


def load_adult(path):
    """Read the UCI Adult CSV layout (file or directory holding adult.data/adult.test).

    Rows with a missing value (``?``) are dropped. Returns the schema and a raw
    table as a dict of column name -> list of strings/floats, including the
    ``sex`` and ``income`` columns.
    """
    names = [n for n, _ in ADULT_COLUMNS] + [ADULT_LABEL]
    kinds = dict(ADULT_COLUMNS)
    table = {n: [] for n in names}
    n_rows = 0
    for f in _adult_files(path):
        with open(f, newline="") as fh:
            for lineno, row in enumerate(csv.reader(fh, skipinitialspace=True), start=1):
                if not row or (len(row) == 1 and (not row[0].strip() or row[0].startswith("|"))):
                    continue
                row = [c.strip() for c in row]
                if row == names or row[0] == "age":
                    continue  # header line
                if len(row) != len(names):
                    raise DataError(f"{f.name}:{lineno}: expected {len(names)} fields, got {len(row)}")
                if any(c in ("?", "") for c in row):
                    continue
                parsed = {}
                for n, c in zip(names, row):
                    if n == ADULT_LABEL:
                        c = c.rstrip(".")
                        if c not in (">50K", "<=50K"):
                            raise DataError(f"{f.name}:{lineno}: unknown income value {c!r}")
                        parsed[n] = c
                    elif kinds[n] == "numeric":
                        try:
                            parsed[n] = float(c)
                        except ValueError:
                            raise DataError(f"{f.name}:{lineno}: non-numeric {n}={c!r}") from None
                    else:
                        if c not in ADULT_LEVELS[n]:
                            raise DataError(f"{f.name}:{lineno}: unknown {n} category {c!r}")
                        parsed[n] = c
                for n in names:
                    table[n].append(parsed[n])
                n_rows += 1
    if n_rows == 0:
        raise DataError("empty dataset")
    schema = FeatureSchema(
        columns=[(n, k) for n, k in ADULT_COLUMNS if n != ADULT_SENSITIVE],
        sensitive_column=ADULT_SENSITIVE,
        label_column=ADULT_LABEL,
    )
    table["__label__"] = [1 if v == ADULT_POSITIVE_LABEL else 0 for v in table[ADULT_LABEL]]
    table["__sensitive__"] = [1 if v == ADULT_SENSITIVE_ONE else 0 for v in table[ADULT_SENSITIVE]]
    table["__levels__"] = {n: ADULT_LEVELS[n] for n, k in ADULT_COLUMNS if k == "categorical"}
    return schema, table


def encode_features(schema, table, train_indices, name="dataset"):
    """One-hot categoricals, standardize numerics with training-row statistics.

    ``table`` maps column names to per-row values and must provide integer
    ``__label__`` and ``__sensitive__`` columns. Category levels come from
    ``table["__levels__"]`` when present, otherwise from the observed values
    in first-seen order.
    """
    train_indices = np.asarray(train_indices, dtype=np.int64)
    if train_indices.size == 0:
        raise DataError("train_indices must be nonempty")
    levels = table.get("__levels__", {})
    n = len(table["__label__"])
    blocks, names, groups, stats = [], [], [], {}
    col = 0
    for gid, (cname, kind) in enumerate(schema.columns):
        values = table[cname]
        if kind == "numeric":
            x = np.asarray(values, dtype=np.float64)
            mu = float(x[train_indices].mean())
            sd = float(x[train_indices].std())
            if not sd > 0:
                log.warning("column %s has zero variance on training rows; stddev clamped to 1", cname)
                sd = 1.0
            stats[cname] = (mu, sd)
            blocks.append(((x - mu) / sd)[:, None])
            names.append(cname)
            groups.append(ActionGroup(gid, (col,), cname))
            col += 1
        else:
            lv = list(levels.get(cname) or dict.fromkeys(values))
            # drop levels that never occur so no column is identically zero
            present = set(values)
            lv = [v for v in lv if v in present]
            pos = {v: k for k, v in enumerate(lv)}
            onehot = np.zeros((n, len(lv)))
            for i, v in enumerate(values):
                if v not in pos:
                    raise DataError(f"row {i}: unknown {cname} category {v!r}")
                onehot[i, pos[v]] = 1.0
            blocks.append(onehot)
            names.extend(f"{cname}={v}" for v in lv)
            groups.append(ActionGroup(gid, tuple(range(col, col + len(lv))), cname))
            col += len(lv)
    X = np.concatenate(blocks, axis=1)
    y = np.asarray(table["__label__"], dtype=np.int8)
    b = np.asarray(table["__sensitive__"], dtype=np.int8)
    return EncodedDataset(X, y, b, groups, stats, names, name)


# -- folds --------------------------------------------------------------------

def make_folds(n_instances, n_folds=8, seed=0, val_fraction=0.2):
    """Disjoint K-fold test sets; the rest of each fold is split train/val.

    Test folds are the ``array_split`` chunks of one seeded permutation, so
    their sizes differ by at most one. Validation takes ``val_fraction`` of the
    remaining rows (rounded) under a per-fold seeded permutation.
    """
    if n_folds < 2:
        raise ValueError("n_folds must be at least 2")
    if n_instances < n_folds:
        raise ValueError("need at least one instance per fold")
    ss = np.random.SeedSequence([int(seed), int(n_instances), int(n_folds)])
    base, *per_fold = ss.spawn(n_folds + 1)
    perm = np.random.default_rng(base).permutation(n_instances)
    chunks = np.array_split(perm, n_folds)
    folds = []
    for k, test in enumerate(chunks):
        rest = np.concatenate([c for j, c in enumerate(chunks) if j != k])
        rest = np.random.default_rng(per_fold[k]).permutation(rest)
        n_val = int(round(val_fraction * rest.size))
        folds.append(FoldSplit(k, np.sort(rest[n_val:]), np.sort(rest[:n_val]), np.sort(test)))
    return folds


# -- synthetic ---------------------------------------------------------------

SYNTH_SLOPE = 12.0
SYNTH_LOW_STEP = -1.0
SYNTH_HIGH_STEP = 0.75
SYNTH_SIGNAL_NOISE = 0.2
SYNTH_PROXY_NOISE = 0.3
SYNTH_PROXY_WEIGHT = 0.5


def _step_weight():
    """Weight ``w`` with ``w E[s(u - lo)] + (1-w) E[s(u - hi)] = 1/2`` for ``u ~ N(0,1)``."""
    x, wq = np.polynomial.hermite_e.hermegauss(120)
    wq = wq / np.sqrt(2 * np.pi)
    e_lo = float(np.sum(wq / (1 + np.exp(-SYNTH_SLOPE * (x - SYNTH_LOW_STEP)))))
    e_hi = float(np.sum(wq / (1 + np.exp(-SYNTH_SLOPE * (x - SYNTH_HIGH_STEP)))))
    return (0.5 - e_hi) / (e_lo - e_hi)


def make_synthetic(n=5000, d_noise=8, leak_strength=1.0, seed=0, proxy_strengths=()):
    """Synthetic benchmark where one column leaks the sensitive bit.

    Columns, each its own action group: ``leak`` (exactly ``b``), ``signal``
    (noisy view of a latent ``u`` independent of ``b``), optional proxies
    ``proxy_k = v_k + s_k (2b - 1) + noise`` that mix a second label-relevant
    latent ``v_k`` with group membership, and ``d_noise`` independent
    Gaussian columns.

    The label depends on the score ``t``, the normalized sum of ``u`` and
    ``0.5 v_k`` (just ``u`` without proxies), so ``t ~ N(0, 1)``. Group
    ``b=1`` follows a steep sigmoid centred at 0. Group ``b=0`` follows a
    two-step staircase (a low step at -1 of height ``w`` and a high step at
    0.75), blended in by ``leak_strength``; ``w`` is solved so that both
    groups keep a base rate of exactly 1/2. Knowing ``b`` therefore sharpens the label posterior and
    changes each group's positive-prediction rate without any base-rate gap.
    Columns are generated on a unit scale, so standardization is the identity.
    """
    if n < 100:
        raise ValueError("n must be at least 100")
    if d_noise < 0 or not 0.0 <= leak_strength <= 1.0:
        raise ValueError("invalid synthetic parameters")
    rng = np.random.default_rng(seed)
    u = rng.standard_normal(n)
    b = rng.integers(0, 2, size=n)
    n_proxy = len(proxy_strengths)
    v = rng.standard_normal((n, n_proxy))
    t = (u + SYNTH_PROXY_WEIGHT * v.sum(axis=1)) / np.sqrt(1 + n_proxy * SYNTH_PROXY_WEIGHT ** 2)
    w = _step_weight()
    sig = lambda z: 1.0 / (1.0 + np.exp(-z))  # noqa: E731
    p1 = sig(SYNTH_SLOPE * t)
    stairs = w * sig(SYNTH_SLOPE * (t - SYNTH_LOW_STEP)) + (1 - w) * sig(SYNTH_SLOPE * (t - SYNTH_HIGH_STEP))
    p0 = (1 - leak_strength) * p1 + leak_strength * stairs
    y = (rng.random(n) < np.where(b == 1, p1, p0)).astype(np.int8)
    cols = [("leak", b.astype(np.float64)), ("signal", u + SYNTH_SIGNAL_NOISE * rng.standard_normal(n))]
    for k, s in enumerate(proxy_strengths):
        cols.append((f"proxy_{k}", v[:, k] + float(s) * (2 * b - 1) + SYNTH_PROXY_NOISE * rng.standard_normal(n)))
    for k in range(d_noise):
        cols.append((f"noise_{k}", rng.standard_normal(n)))
    X = np.column_stack([c for _, c in cols])
    names = [nm for nm, _ in cols]
    groups = [ActionGroup(k, (k,), nm) for k, nm in enumerate(names)]
    stats = {nm: (0.0, 1.0) for nm in names}
    return EncodedDataset(X, y, b.astype(np.int8), groups, stats, names, "synthetic")


# -- cache -------------------------------------------------------------------

def save_dataset(path, ds):
    """Write ``ds`` as a version-stamped ``.npz`` (atomic rename)."""
    path = Path(path)
    meta = {
        "format_version": DATASET_FORMAT_VERSION,
        "name": ds.name,
        "feature_names": list(ds.feature_names),
        "groups": [[g.group_id, list(g.feature_indices), g.source_column] for g in ds.groups],
        "standardization_stats": {k: list(v) for k, v in ds.standardization_stats.items()},
    }
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        np.savez(fh, features=ds.features, labels=ds.labels, sensitive=ds.sensitive,
                 meta=np.array(json.dumps(meta, sort_keys=True)))
    os.replace(tmp, path)


def load_dataset(path):
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["meta"]))
        if meta.get("format_version") != DATASET_FORMAT_VERSION:
            raise DataError(f"unsupported dataset format version {meta.get('format_version')}")
        groups = [ActionGroup(g, tuple(ix), src) for g, ix, src in meta["groups"]]
        return EncodedDataset(z["features"], z["labels"], z["sensitive"], groups,
                              {k: tuple(v) for k, v in meta["standardization_stats"].items()},
                              meta["feature_names"], meta["name"])
