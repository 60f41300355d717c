"""Engineered click aggregates and the demographic/time/place encoding."""

from __future__ import annotations

import logging
import math
import warnings
from collections import Counter
from dataclasses import dataclass, field
from datetime import datetime, timezone

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .exceptions import ConfigError, FitError, NotFittedError
from .sessions import EncodedDataset, Scaler, SEQ_LEN, Vocab

logger = logging.getLogger(__name__)

FEATURE_KINDS = ("numeric", "ordinal", "categorical", "cyclic")


@dataclass
class FeatureVector:
    values: np.ndarray
    layout: dict  # name -> (start, stop)

    def __post_init__(self):
        n = max((stop for _, stop in self.layout.values()), default=0)
        if n != len(self.values):
            raise ValueError(f"layout covers {n} entries, vector has {len(self.values)}")

    def __getitem__(self, name):
        start, stop = self.layout[name]
        return self.values[start] if stop - start == 1 else self.values[start:stop]


def engineered_layout(vocab: Vocab):
    names = []
    names += [f"time:{p}" for p in vocab.pages]
    names += [f"page_ratio:{p}" for p in vocab.pages]
    names += [f"click:{c}" for c in vocab.clicks]
    names += [f"click_rate:{c}" for c in vocab.clicks]
    names += ["pages", "avg_clicks"]
    return {name: (i, i + 1) for i, name in enumerate(names)}


def engineered_groups(vocab: Vocab):
    """Column indices of the web-page / click / time ablation groups."""
    P, K = vocab.n_pages, vocab.n_clicks
    return {
        "time": list(range(P)),
        "web-page": list(range(P, 2 * P)) + [2 * P + 2 * K],
        "click": list(range(2 * P, 2 * P + 2 * K)) + [2 * P + 2 * K + 1],
    }


def host_matrix(vocab: Vocab):
    """(P, K) 0/1 matrix: page category p hosted click field k in training."""
    M = np.zeros((vocab.n_pages, vocab.n_clicks))
    for j, cid in enumerate(vocab.clicks):
        for h in vocab.click_hosts.get(cid, []):
            M[vocab._page_index[h], j] = 1.0
    return M


def aggregate_batch(pages, hits, dwell, mask, vocab: Vocab):
    """Aggregates for a batch of step sequences.

    ``pages`` (N, T, P) one-hot, ``hits`` (N, T, K) 0/1, ``dwell`` (N, T) and
    ``mask`` (N, T). Every sum adds integers, so the result does not depend on
    step order.
    """
    P, K = vocab.n_pages, vocab.n_clicks
    m = mask.astype(np.float64)
    pages = pages * m[:, :, None]
    hits = hits * m[:, :, None]
    n = m.sum(axis=1)
    safe_n = np.where(n > 0, n, 1.0)
    out = np.zeros((pages.shape[0], 2 * P + 2 * K + 2))
    out[:, :P] = np.einsum("ntp,nt->np", pages, dwell * m)
    out[:, P : 2 * P] = pages.sum(axis=1) / safe_n[:, None]
    clicks = hits.sum(axis=1)
    out[:, 2 * P : 2 * P + K] = clicks
    # a click field "appears" on pageviews of its host categories or where it was clicked
    on_host = (pages @ host_matrix(vocab)) > 0
    appearances = ((on_host | (hits > 0)) & (m[:, :, None] > 0)).sum(axis=1)
    out[:, 2 * P + K : 2 * P + 2 * K] = np.divide(
        clicks, appearances, out=np.zeros_like(clicks), where=appearances > 0)
    out[:, 2 * P + 2 * K] = n
    out[:, 2 * P + 2 * K + 1] = clicks.sum(axis=1) / safe_n
    return out


def _aggregate(page_idx, click_hits, dwell, vocab: Vocab):
    """Aggregates of one session: ``page_idx`` (n,), ``click_hits`` (n, K), ``dwell`` (n,)."""
    n = len(page_idx)
    pages = np.zeros((1, n, vocab.n_pages))
    pages[0, np.arange(n), page_idx] = 1.0
    hits = np.asarray(click_hits, dtype=np.float64).reshape(1, n, vocab.n_clicks)
    return aggregate_batch(pages, hits, np.asarray(dwell, dtype=np.float64)[None],
                           np.ones((1, n), dtype=bool), vocab)[0]


def _steps_arrays(steps, vocab: Vocab):
    page_idx = np.array([vocab.page_index(st.page_url) for st in steps], dtype=np.int64)
    hits = np.zeros((len(steps), vocab.n_clicks))
    for i, st in enumerate(steps):
        for cid in st.clicks:
            j = vocab.click_index(cid)
            if j is not None:
                hits[i, j] = 1.0
    dwell = np.array([st.dwell for st in steps], dtype=np.float64)
    return page_idx, hits, dwell


def engineer_features(session, vocab: Vocab, T=SEQ_LEN) -> FeatureVector:
    """Raw (unstandardized) aggregate features over the session's first ``T`` pageviews.

    ``session`` may be a :class:`Session` or a list of :class:`Step`. A click
    field "appears" on every pageview of a page category it was seen on in
    training; its rate is 0 when it never appeared.
    """
    if vocab is None:
        raise NotFittedError("engineer_features needs a fitted vocabulary")
    steps = session.steps() if hasattr(session, "steps") else list(session)
    values = _aggregate(*_steps_arrays(steps[:T], vocab), vocab)
    return FeatureVector(values, engineered_layout(vocab))


def engineer_from_encoded(ds: EncodedDataset, vocab: Vocab):
    """Aggregate features rebuilt from encoded steps (same values as from sessions)."""
    P, K = vocab.n_pages, vocab.n_clicks
    return aggregate_batch(ds.X[:, :, :P], ds.X[:, :, P : P + K], ds.dwell, ds.mask, vocab)


class EngineeredFeaturizer(TransformerMixin, BaseEstimator):
    """Order-free session aggregates, standardized on the training rows.

    ``fit``/``transform`` take an :class:`EncodedDataset` so the aggregates come
    from exactly the steps the sequential model sees.
    """

    def __init__(self, vocab=None, standardize=True):
        self.vocab = vocab
        self.standardize = standardize

    def fit(self, ds, y=None):
        if self.vocab is None:
            raise NotFittedError("EngineeredFeaturizer needs a fitted vocab")
        raw = engineer_from_encoded(ds, self.vocab)
        self.layout_ = engineered_layout(self.vocab)
        self.scaler_ = Scaler().fit(raw, list(self.layout_)) if self.standardize else None
        return self

    def transform(self, ds):
        check_is_fitted(self, "layout_")
        raw = engineer_from_encoded(ds, self.vocab)
        return self.scaler_.transform(raw) if self.scaler_ is not None else raw

    def groups(self):
        return engineered_groups(self.vocab)


# ---------------------------------------------------------------- demography


@dataclass
class FeatureSpec:
    name: str
    kind: str
    impute: str  # mean | median | mode | max
    levels: list = field(default_factory=list)  # ordinal order / cyclic labels
    period: int = 0
    group: str = "demographic"


def parse_schema(lines):
    """Parse ``name = kind[:arg] [group]`` lines.

    ``numeric:max`` imputes with the training maximum, ``ordinal:a,b,c`` fixes
    the level order, ``cyclic:12`` or ``cyclic:mon,tue,...`` gives the period.
    """
    if isinstance(lines, str):
        lines = lines.splitlines()
    specs = []
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"schema line {lineno}: expected 'name = kind'")
        name, rhs = (part.strip() for part in line.split("=", 1))
        tokens = rhs.split()
        kind, _, arg = tokens[0].partition(":")
        group = tokens[1] if len(tokens) > 1 else "demographic"
        if kind not in FEATURE_KINDS:
            raise ConfigError(f"schema line {lineno}: unknown kind {kind!r}")
        spec = FeatureSpec(name, kind, {"numeric": "mean", "ordinal": "median",
                                        "categorical": "mode", "cyclic": "mode"}[kind],
                           group=group)
        if kind == "numeric" and arg:
            if arg != "max":
                raise ConfigError(f"schema line {lineno}: numeric accepts only ':max'")
            spec.impute = "max"
        elif kind == "ordinal" and arg:
            spec.levels = [t.strip() for t in arg.split(",")]
        elif kind == "cyclic":
            if not arg:
                raise ConfigError(f"schema line {lineno}: cyclic feature needs a period")
            if arg.isdigit():
                spec.period = int(arg)
            else:
                spec.levels = [t.strip() for t in arg.split(",")]
                spec.period = len(spec.levels)
        specs.append(spec)
    return specs


def _missing(v):
    return v is None or (isinstance(v, float) and math.isnan(v))


@dataclass
class DemographyPrep:
    specs: list
    impute: dict
    ordinal_codes: dict
    categories: dict
    periods: dict
    scaler: Scaler
    scaled_columns: list
    layout: dict
    unknown_levels: Counter = field(default_factory=Counter)

    @property
    def width(self):
        return max(stop for _, stop in self.layout.values())

    def groups(self):
        out = {}
        for spec in self.specs:
            cols = [i for name, (a, b) in self.layout.items()
                    if name == spec.name or name.startswith(spec.name + "=")
                    or name in (spec.name + "_sin", spec.name + "_cos")
                    for i in range(a, b)]
            out.setdefault(spec.group, []).extend(cols)
        return {k: sorted(v) for k, v in out.items()}

    def to_dict(self):
        return {
            "specs": [vars(s) for s in self.specs],
            "impute": self.impute,
            "ordinal_codes": self.ordinal_codes,
            "categories": self.categories,
            "periods": self.periods,
            "scaler": self.scaler.to_dict(),
            "scaled_columns": self.scaled_columns,
        }


def _ordinal_code(spec, value, codes):
    if spec.levels:
        return float(codes[str(value)])
    return float(value)


def _cyclic_code(spec, value):
    if spec.levels:
        return spec.levels.index(str(value))
    return int(value) % spec.period


def _encode_raw(record, prep_parts, count_unknown=None):
    specs, impute, codes, categories, periods = prep_parts
    out = []
    for spec in specs:
        v = record.get(spec.name)
        if _missing(v):
            v = impute[spec.name]
        if spec.kind == "numeric":
            out.append(float(v))
        elif spec.kind == "ordinal":
            out.append(_ordinal_code(spec, v, codes.get(spec.name, {})))
        elif spec.kind == "categorical":
            onehot = [0.0] * len(categories[spec.name])
            key = str(v)
            if key in categories[spec.name]:
                onehot[categories[spec.name].index(key)] = 1.0
            elif count_unknown is not None:
                count_unknown[spec.name] += 1
            out.extend(onehot)
        else:
            angle = 2.0 * math.pi * _cyclic_code(spec, v) / periods[spec.name]
            out.extend([math.sin(angle), math.cos(angle)])
    return out


def fit_demography_prep(records, schema) -> DemographyPrep:
    """Imputation values, codes, one-hot maps and scaler from training rows only."""
    records = list(records)
    if isinstance(schema, str) or (schema and not isinstance(schema[0], FeatureSpec)):
        specs = parse_schema(schema)
    else:
        specs = list(schema)
    if not records:
        raise FitError("cannot fit demography preparation on zero records")
    impute, codes, categories, periods = {}, {}, {}, {}
    for spec in specs:
        observed = [r.get(spec.name) for r in records if not _missing(r.get(spec.name))]
        if not observed:
            raise FitError(f"feature {spec.name!r} is missing in every training record")
        if spec.kind == "numeric":
            vals = np.asarray(observed, dtype=np.float64)
            impute[spec.name] = float(vals.max() if spec.impute == "max" else vals.mean())
        elif spec.kind == "ordinal":
            if spec.levels:
                codes[spec.name] = {lvl: i for i, lvl in enumerate(spec.levels)}
                coded = [codes[spec.name][str(v)] for v in observed]
                med = int(np.floor(np.median(coded)))
                impute[spec.name] = spec.levels[med]
            else:
                impute[spec.name] = float(np.median(np.asarray(observed, dtype=np.float64)))
        elif spec.kind == "categorical":
            counts = Counter(str(v) for v in observed)
            categories[spec.name] = sorted(counts)
            # most frequent, ties to the smallest level
            impute[spec.name] = min(counts, key=lambda k: (-counts[k], k))
        else:
            counts = Counter(observed)
            impute[spec.name] = min(counts, key=lambda k: (-counts[k], str(k)))
            periods[spec.name] = spec.period

    layout, scaled, pos = {}, [], 0
    for spec in specs:
        if spec.kind == "categorical":
            for lvl in categories[spec.name]:
                layout[f"{spec.name}={lvl}"] = (pos, pos + 1)
                pos += 1
        elif spec.kind == "cyclic":
            for suffix in ("_sin", "_cos"):
                layout[spec.name + suffix] = (pos, pos + 1)
                scaled.append(pos)
                pos += 1
        else:
            layout[spec.name] = (pos, pos + 1)
            scaled.append(pos)
            pos += 1

    parts = (specs, impute, codes, categories, periods)
    raw = np.array([_encode_raw(r, parts) for r in records], dtype=np.float64)
    names = list(layout)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        scaler = Scaler().fit(raw[:, scaled], [names[i] for i in scaled])
    return DemographyPrep(specs, impute, codes, categories, periods, scaler, scaled, layout)


def encode_demographics(record, prep: DemographyPrep, standardize=True) -> FeatureVector:
    """Impute, encode and standardize one record. Unknown levels become all-zero one-hots."""
    parts = (prep.specs, prep.impute, prep.ordinal_codes, prep.categories, prep.periods)
    values = np.asarray(_encode_raw(record, parts, prep.unknown_levels), dtype=np.float64)
    if standardize:
        values[prep.scaled_columns] = prep.scaler.transform(values[prep.scaled_columns])
    return FeatureVector(values, dict(prep.layout))


class DemographyEncoder(TransformerMixin, BaseEstimator):
    def __init__(self, schema=None):
        self.schema = schema

    def fit(self, records, y=None):
        self.prep_ = fit_demography_prep(records, self.schema)
        return self

    def transform(self, records):
        check_is_fitted(self, "prep_")
        return np.array([encode_demographics(r, self.prep_).values for r in records])

    def groups(self):
        check_is_fitted(self, "prep_")
        return self.prep_.groups()


TIME_OF_DAY_BOUNDS = (6, 10, 12, 14, 18, 22)  # morning..night start hours


def session_context(session, previous_start=None, n_previous=0):
    """Time and place attributes of a session for the demography model."""
    dt = datetime.fromtimestamp(session.session_start, tz=timezone.utc)
    hour = dt.hour
    # 0 morning, 1 forenoon, 2 noon, 3 afternoon, 4 evening, 5 night
    tod = 5
    for k, start in enumerate(TIME_OF_DAY_BOUNDS[:-1]):
        if start <= hour < TIME_OF_DAY_BOUNDS[k + 1]:
            tod = k
    return {
        "month": dt.month - 1,
        "time_of_month": min((dt.day - 1) // 10, 2),
        "weekday": dt.weekday(),
        "time_of_day": tod,
        "os": session.os,
        "previous_visits": n_previous,
        "distance_to_last_visit": (
            None if previous_start is None else (session.session_start - previous_start) / 3600.0
        ),
    }


def demography_records(sessions, user_records):
    """One record per session: the user's attributes merged with session context.

    ``user_records`` maps user_id to a dict. Sessions must be in chronological
    order per user for the visit counters to be right.
    """
    seen = {}
    rows = []
    for s in sorted(sessions, key=lambda s: (s.session_start, s.user_id, s.index)):
        prev = seen.get(s.user_id)
        ctx = session_context(s, prev[0] if prev else None, prev[1] if prev else 0)
        seen[s.user_id] = (s.session_start, (prev[1] if prev else 0) + 1)
        rows.append((s.session_id, ctx))
    by_id = dict(rows)
    out = []
    for s in sessions:
        rec = dict(user_records.get(s.user_id, {}))
        rec.pop("user_id", None)
        rec.update(by_id[s.session_id])
        out.append(rec)
    return out
