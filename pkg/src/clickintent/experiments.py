"""Experimental protocol: out-of-time splits, training runs, grid search and analyses."""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Optional

import numpy as np

from .evalx import EvalReport, evaluate, roc_auc, select_threshold
from .exceptions import ConfigError, DataError, ResampleError, SplitError
from .features import DemographyEncoder, EngineeredFeaturizer, demography_records
from .models import MODEL_CLASSES, EpochLog
from .sessions import SEQ_LEN, EncodedDataset, SequenceEncoder, encoder_fingerprint
from .synthgen import DEMOGRAPHY_SCHEMA

log = logging.getLogger(__name__)

MODEL_KINDS = tuple(MODEL_CLASSES)
SEQUENCE_KINDS = ("sequential-lstm", "rnn-reference")
THRESHOLD_SOURCES = ("eval", "trainval")

# reference grid winners, used as starting configurations for desk-scale runs
REFERENCE_WINNERS = {
    "demography-ffnn": dict(hidden_units=32, batch_size=64, dropout=0.3),
    "engineered-ffnn": dict(hidden_units=128, batch_size=64, dropout=0.3),
    "sequential-lstm": dict(hidden_units=64, batch_size=128, dropout=0.4),
}


# ------------------------------------------------------------------ configs


@dataclass(frozen=True)
class SplitSpec:
    train: float = 0.8
    val: float = 0.1
    test: float = 0.1

    def __post_init__(self):
        parts = (self.train, self.val, self.test)
        if any(p <= 0 for p in parts) or abs(sum(parts) - 1.0) > 1e-9:
            raise ConfigError(f"split fractions must be positive and sum to 1, got {parts}")


@dataclass(frozen=True)
class TrainConfig:
    model: str = "sequential-lstm"
    hidden_units: int = 64
    batch_size: int = 128
    dropout: float = 0.0
    max_epochs: int = 100
    patience: int = 5
    seed: int = 0
    lr: float = 0.001
    demo_units: int = 32
    resample: str = "none"  # none | RUS | ROS
    threshold_source: str = "eval"

    def __post_init__(self):
        if self.model not in MODEL_KINDS:
            raise ConfigError(f"unknown model kind {self.model!r}; expected one of {MODEL_KINDS}")
        if min(self.hidden_units, self.batch_size, self.max_epochs, self.patience,
               self.demo_units) <= 0:
            raise ConfigError("sizes, epochs and patience must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.resample not in ("none", "RUS", "ROS"):
            raise ConfigError(f"resample must be none, RUS or ROS, got {self.resample!r}")
        if self.threshold_source not in THRESHOLD_SOURCES:
            raise ConfigError(f"threshold_source must be one of {THRESHOLD_SOURCES}")

    def to_dict(self):
        return asdict(self)

    def config_hash(self):
        return encoder_fingerprint(self.to_dict())

    @classmethod
    def from_mapping(cls, mapping):
        """Build from string values (as read from a config file); unknown keys are ignored."""
        kwargs = {}
        for f in fields(cls):
            if f.name in mapping:
                raw = mapping[f.name]
                typ = type(f.default)
                try:
                    kwargs[f.name] = typ(raw) if not isinstance(raw, typ) else raw
                except ValueError as exc:
                    raise ConfigError(f"bad value for {f.name}: {raw!r}") from exc
        return cls(**kwargs)


def parse_config(text):
    """``key = value`` lines; ``#`` starts a comment. Returns a dict of strings."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"config line {lineno}: expected 'key = value'")
        out[key.strip()] = value.strip()
    return out


# ------------------------------------------------------------------- splits


def split_out_of_time(sessions, spec: SplitSpec = SplitSpec()):
    """Chronological 80/10/10 cut on ``session_start``; ties keep input order."""
    sessions = list(sessions)
    n = len(sessions)
    if n < 10:
        raise SplitError(f"need at least 10 sessions to split, got {n}")
    ordered = sorted(sessions, key=lambda s: s.session_start)  # stable
    n_train = int(round(spec.train * n))
    n_val = int(round(spec.val * n))
    return ordered[:n_train], ordered[n_train : n_train + n_val], ordered[n_train + n_val :]


# ------------------------------------------------------------- prepared data


@dataclass
class SplitData:
    """Aligned model inputs for one split."""

    ds: EncodedDataset
    eng: np.ndarray
    demo: Optional[np.ndarray]

    @property
    def y(self):
        return self.ds.y

    def __len__(self):
        return len(self.ds)

    def subset(self, idx):
        idx = np.asarray(idx)
        return SplitData(self.ds.subset(idx), self.eng[idx],
                         None if self.demo is None else self.demo[idx])


@dataclass
class PreparedData:
    train: SplitData
    val: SplitData
    test: SplitData
    encoder: SequenceEncoder
    featurizer: EngineeredFeaturizer
    demo_encoder: Optional[DemographyEncoder] = None

    def splits(self):
        return {"train": self.train, "val": self.val, "test": self.test}

    def fingerprint(self):
        parts = [self.encoder.vocab_.to_dict(), self.encoder.scaler_.to_dict(),
                 self.featurizer.scaler_.to_dict() if self.featurizer.scaler_ else None]
        if self.demo_encoder is not None:
            parts.append(self.demo_encoder.prep_.to_dict())
        return encoder_fingerprint(*parts)


def prepare(sessions, user_records=None, spec: SplitSpec = SplitSpec(), T=SEQ_LEN,
            min_fraction=0.01, schema=DEMOGRAPHY_SCHEMA) -> PreparedData:
    """Split labelled sessions and fit every encoder on the training split only."""
    sessions = list(sessions)
    train, val, test = split_out_of_time(sessions, spec)
    encoder = SequenceEncoder(T, min_fraction).fit(train)
    sets = [encoder.transform(part) for part in (train, val, test)]
    featurizer = EngineeredFeaturizer(encoder.vocab_).fit(sets[0])
    engs = [featurizer.transform(ds) for ds in sets]

    demo_encoder, demos = None, [None, None, None]
    if user_records is not None:
        missing = sorted({s.user_id for s in sessions} - set(user_records))
        if missing:
            raise DataError(f"no demographic record for user {missing[0]!r} "
                            f"({len(missing)} users missing)")
        # visit counters need every session of a user, whatever split it lands in
        records = dict(zip((s.session_id for s in sessions),
                           demography_records(sessions, user_records)))
        parts = [[records[s.session_id] for s in part] for part in (train, val, test)]
        demo_encoder = DemographyEncoder(schema).fit(parts[0])
        demos = [demo_encoder.transform(p) for p in parts]

    splits = [SplitData(ds, e, d) for ds, e, d in zip(sets, engs, demos)]
    return PreparedData(*splits, encoder, featurizer, demo_encoder)


def model_inputs(kind, split: SplitData, drop=None):
    """The input the model kind consumes, with ``drop`` = {source: columns} removed."""
    drop = drop or {}

    def cut(source, arr, axis):
        cols = drop.get(source)
        return np.delete(arr, cols, axis=axis) if cols else arr

    if kind in ("demography-ffnn", "concat-engineered", "concat-sequential") and split.demo is None:
        raise DataError(f"model {kind!r} needs demographic records")
    if kind == "engineered-ffnn":
        return cut("eng", split.eng, 1)
    if kind == "demography-ffnn":
        return cut("demo", split.demo, 1)
    if kind == "concat-engineered":
        return np.hstack([cut("eng", split.eng, 1), cut("demo", split.demo, 1)])
    if kind == "concat-sequential":
        return cut("seq", split.ds.X, 2), cut("demo", split.demo, 1)
    return cut("seq", split.ds.X, 2)


# ------------------------------------------------------------------- runs


@dataclass
class RunRecord:
    config: TrainConfig
    history: list
    stopped_epoch: int
    best_epoch: int
    reports: dict
    target_rate: float
    seed: int
    wall_clock: float = 0.0
    extra: dict = field(default_factory=dict)
    model: object = field(default=None, repr=False, compare=False)
    scores: dict = field(default_factory=dict, repr=False, compare=False)

    def to_dict(self):
        """JSON-ready record. Wall-clock time is left out so artifacts are reproducible."""
        return {
            "config": self.config.to_dict(),
            "config_hash": self.config.config_hash(),
            "history": [asdict(h) for h in self.history],
            "stopped_epoch": self.stopped_epoch,
            "best_epoch": self.best_epoch,
            "reports": {k: r.to_dict() for k, r in self.reports.items()},
            "target_rate": self.target_rate,
            "seed": self.seed,
            **self.extra,
        }

    @classmethod
    def from_dict(cls, d):
        reports = {k: EvalReport(**v) for k, v in d["reports"].items()}
        known = {"config", "config_hash", "history", "stopped_epoch", "best_epoch", "reports",
                 "target_rate", "seed"}
        return cls(TrainConfig(**d["config"]), [EpochLog(**h) for h in d["history"]],
                   d["stopped_epoch"], d["best_epoch"], reports, d["target_rate"], d["seed"],
                   extra={k: v for k, v in d.items() if k not in known})


def resample(y, mode, seed):
    """Row indices of a 50/50 balanced training set.

    RUS keeps every minority row plus a uniform minority-sized sample of the
    majority; ROS keeps every row and adds uniform minority duplicates.
    """
    y = np.asarray(y)
    pos, neg = np.flatnonzero(y == 1), np.flatnonzero(y == 0)
    if len(pos) == 0 or len(neg) == 0:
        raise ResampleError("resampling needs both classes present")
    minority, majority = (pos, neg) if len(pos) <= len(neg) else (neg, pos)
    rng = np.random.default_rng(seed)
    if mode == "RUS":
        keep = rng.choice(majority, size=len(minority), replace=False)
        return np.sort(np.concatenate([minority, keep]))
    if mode == "ROS":
        extra = rng.choice(minority, size=len(majority) - len(minority), replace=True)
        return np.concatenate([np.arange(len(y)), np.sort(extra)])
    raise ConfigError(f"unknown resampling mode {mode!r}")


def _make_model(config: TrainConfig, seed):
    cls = MODEL_CLASSES[config.model]
    kwargs = dict(hidden_units=config.hidden_units, batch_size=config.batch_size,
                  dropout=config.dropout, max_epochs=config.max_epochs,
                  patience=config.patience, seed=seed, lr=config.lr)
    if config.model == "concat-sequential":
        kwargs["demo_units"] = config.demo_units
    return cls(**kwargs)


def model_from_params(config: TrainConfig, params):
    """A fitted estimator around saved parameters."""
    model = _make_model(config, config.seed)
    model.params_ = params
    model.classes_ = np.array([0, 1])
    return model


def train_with_early_stopping(config: TrainConfig, data: PreparedData, drop=None,
                              train_override: Optional[SplitData] = None) -> RunRecord:
    """Fit on train, early-stop on validation AUC and report every split.

    The classification threshold targets the positive rate of the rows actually
    fitted plus the validation rows.
    """
    started = time.perf_counter()
    train = train_override if train_override is not None else data.train
    if config.resample != "none":
        train = train.subset(resample(train.y, config.resample, config.seed))
    Xtr = model_inputs(config.model, train, drop)
    Xv = model_inputs(config.model, data.val, drop)
    model = _make_model(config, config.seed)
    model.fit(Xtr, train.y, eval_set=(Xv, data.val.y))

    target_rate = float(np.concatenate([train.y, data.val.y]).mean())
    evaluated = {"train": train, "val": data.val, "test": data.test}
    scores = {name: model.decision_scores(model_inputs(config.model, part, drop))
              for name, part in evaluated.items()}
    threshold = None
    if config.threshold_source == "trainval":
        threshold = select_threshold(np.concatenate([scores["train"], scores["val"]]), target_rate)
    reports = {name: evaluate(scores[name], evaluated[name].y, target_rate, threshold)
               for name in evaluated}
    elapsed = time.perf_counter() - started
    log.info("%s H=%d b=%d p=%.1f: best epoch %d, val AUC %.4f, test AUC %.4f (%.1fs)",
             config.model, config.hidden_units, config.batch_size, config.dropout,
             model.best_epoch_, reports["val"].auc, reports["test"].auc, elapsed)
    return RunRecord(config, model.history_, model.stopped_epoch_, model.best_epoch_, reports,
                     target_rate, config.seed, elapsed, model=model, scores=scores)


def train_concatenated(kind, data: PreparedData, config: TrainConfig) -> RunRecord:
    if kind not in ("concat-engineered", "concat-sequential"):
        raise ConfigError(f"not a concatenated model kind: {kind!r}")
    for name, part in data.splits().items():
        if part.demo is None or len(part.demo) != len(part.ds):
            raise DataError(f"{name} split: demographic rows do not align with click sessions")
    return train_with_early_stopping(replace(config, model=kind), data)


# -------------------------------------------------------------- grid search


def _cell_key(cell):
    (H, batch, dropout), auc = cell
    return (-auc, H, batch, -dropout)


def select_best(matrix):
    """Argmax of ``{(H, batch, dropout): auc}``; ties go to smaller H, smaller batch, larger dropout."""
    if not matrix:
        raise ConfigError("empty grid")
    return min(matrix.items(), key=_cell_key)


@dataclass
class GridResult:
    best: TrainConfig
    best_auc: float
    matrix: dict  # (H, batch, dropout) -> validation AUC
    records: dict

    def to_dict(self):
        return {
            "best": self.best.to_dict(),
            "best_auc": self.best_auc,
            "cells": [{"hidden_units": H, "batch_size": b, "dropout": p, "val_auc": auc}
                      for (H, b, p), auc in sorted(self.matrix.items())],
        }


def grid_search(base: TrainConfig, grid, data: PreparedData) -> GridResult:
    """Train every (H, batch, dropout) cell with seed ``base.seed XOR cell index``."""
    hs, bs, ps = (list(grid[k]) for k in ("hidden_units", "batch_size", "dropout"))
    if not (hs and bs and ps):
        raise ConfigError("grid needs at least one value per axis")
    matrix, records, configs = {}, {}, {}
    for index, (H, b, p) in enumerate((H, b, p) for H in hs for b in bs for p in ps):
        cfg = replace(base, hidden_units=H, batch_size=b, dropout=p, seed=base.seed ^ index)
        try:
            rec = train_with_early_stopping(cfg, data)
        except Exception as exc:
            raise type(exc)(f"grid cell (H={H}, batch={b}, dropout={p}): {exc}") from exc
        matrix[(H, b, p)] = rec.reports["val"].auc
        records[(H, b, p)] = rec
        configs[(H, b, p)] = cfg
    key, auc = select_best(matrix)
    return GridResult(configs[key], auc, matrix, records)


# ------------------------------------------------------------ order analysis


def temporal_shuffle(ds: EncodedDataset, seed) -> EncodedDataset:
    """Independently permute the valid steps of every sequence; padding stays in front."""
    rng = np.random.default_rng(seed)
    X, dwell = ds.X.copy(), ds.dwell.copy()
    for k in range(len(ds)):
        valid = np.flatnonzero(ds.mask[k])
        if len(valid) < 2:
            continue
        perm = valid[rng.permutation(len(valid))]
        X[k, valid] = ds.X[k, perm]
        dwell[k, valid] = ds.dwell[k, perm]
    return replace(ds, X=X, dwell=dwell)


def shuffle_prepared(data: PreparedData, seed) -> PreparedData:
    """Shuffle train, validation and test; engineered features are rebuilt from the shuffled steps."""
    parts = []
    for k, part in enumerate((data.train, data.val, data.test)):
        ds = temporal_shuffle(part.ds, (int(seed), k))
        parts.append(SplitData(ds, data.featurizer.transform(ds), part.demo))
    return replace(data, train=parts[0], val=parts[1], test=parts[2])


# ---------------------------------------------------------------- ablation


def length_bin(length):
    k = (min(max(int(length), 1), SEQ_LEN) - 1) // 3
    return f"{3 * k + 1}-{3 * k + 3}"


def breakdown(scores, labels, keys):
    """AUC per key; ``None`` where a group holds a single class."""
    scores, labels = np.asarray(scores), np.asarray(labels)
    keys = np.asarray([str(k) for k in keys])
    rows = []
    for key in sorted(set(keys.tolist()), key=_natural):
        sel = keys == key
        y = labels[sel]
        auc = roc_auc(scores[sel], y)[0] if 0 < y.sum() < len(y) else None
        rows.append({"group": key, "n": int(sel.sum()), "n_pos": int(y.sum()), "auc": auc})
    return rows


def _natural(key):
    head = key.split("-")[0]
    return (0, int(head), key) if head.isdigit() else (1, 0, key)


def feature_groups(kind, data: PreparedData):
    """{group name: (source, column indices)} for the model kind's input."""
    if kind in SEQUENCE_KINDS:
        return {g: ("seq", c) for g, c in data.train.ds.column_groups().items()}
    if kind == "engineered-ffnn":
        return {g: ("eng", c) for g, c in data.featurizer.groups().items()}
    if kind == "demography-ffnn":
        if data.demo_encoder is None:
            raise DataError("demography ablation needs demographic records")
        return {g: ("demo", c) for g, c in data.demo_encoder.groups().items()}
    raise ConfigError(f"no ablation groups defined for {kind!r}")


@dataclass
class AblationResult:
    records: dict  # "base" or "no <group>" -> RunRecord
    by_length: list
    by_os: list

    def to_dict(self):
        return {
            "runs": {k: r.to_dict() for k, r in self.records.items()},
            "by_length": self.by_length,
            "by_os": self.by_os,
        }


def ablate_and_report(config: TrainConfig, data: PreparedData, groups=None) -> AblationResult:
    """Base run, one retrained run per removed group, and test-set AUC breakdowns."""
    available = feature_groups(config.model, data)
    groups = list(available) if groups is None else list(groups)
    unknown = [g for g in groups if g not in available]
    if unknown:
        raise ConfigError(f"unknown feature group(s) {unknown} for {config.model}; "
                          f"known: {sorted(available)}")
    records = {"base": train_with_early_stopping(config, data)}
    for g in groups:
        source, cols = available[g]
        records[f"no {g}"] = train_with_early_stopping(config, data, drop={source: cols})
    base = records["base"]
    test = data.test
    by_length = breakdown(base.scores["test"], test.y, [length_bin(n) for n in test.ds.lengths])
    by_os = breakdown(base.scores["test"], test.y, [o or "unknown" for o in test.ds.os])
    return AblationResult(records, by_length, by_os)


# ----------------------------------------------------------------- tables


def format_table(headers, rows):
    """Left-aligned text columns; floats printed with four decimals."""
    def cell(v):
        if v is None:
            return "-"
        if isinstance(v, float):
            return f"{v:.4f}"
        return str(v)

    body = [[cell(v) for v in row] for row in rows]
    widths = [max(len(str(h)), *(len(r[i]) for r in body)) if body else len(str(h))
              for i, h in enumerate(headers)]
    lines = ["  ".join(str(h).ljust(w) for h, w in zip(headers, widths)).rstrip()]
    lines.append("  ".join("-" * w for w in widths))
    lines += ["  ".join(v.ljust(w) for v, w in zip(r, widths)).rstrip() for r in body]
    return "\n".join(lines)


def results_rows(named_records):
    """Rows of (model, AUC, BA, precision, recall) on the test split."""
    rows = []
    for name, rec in named_records.items():
        rep = rec.reports["test"] if isinstance(rec, RunRecord) else rec
        rows.append([name, rep.auc, rep.balanced_accuracy, rep.precision, rep.recall])
    return rows


def relative_change(new, old):
    return (new - old) / old


def json_dumps(doc):
    return json.dumps(doc, sort_keys=True, indent=1)


def digest(text):
    return hashlib.sha256(text.encode()).hexdigest()[:16]
