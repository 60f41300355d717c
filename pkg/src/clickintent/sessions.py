"""Click-log ingestion, sessionization, labelling and fixed-length encoding."""

from __future__ import annotations

import hashlib
import io
import json
import logging
import re
import warnings
from collections import Counter, defaultdict
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from typing import Iterable, Optional

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .exceptions import DataError, FitError, NotFittedError, ParseError

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
SEQ_LEN = 30
GAP_MINUTES = 30
OTHER_PAGE = "(other)"
EVENT_TYPES = ("pageview", "click")


@dataclass(frozen=True)
class ClickEvent:
    user_id: str
    timestamp: int  # UTC epoch seconds
    page_url: str
    event_type: str
    click_id: Optional[str] = None
    os: Optional[str] = None

    @property
    def is_pageview(self):
        return self.event_type == "pageview"


@dataclass(frozen=True)
class Step:
    """One pageview with the clicks made before the next pageview."""

    page_url: str
    clicks: tuple
    delta: int  # seconds since the previous pageview, 0 for the first
    dwell: int  # seconds until the next pageview, 0 for the last


@dataclass
class Session:
    user_id: str
    events: list
    session_start: int
    y: Optional[int] = None
    os: Optional[str] = None
    session_id: str = ""
    index: int = 0  # position among this user's sessions

    @property
    def pageviews(self):
        return [e for e in self.events if e.is_pageview]

    @property
    def length(self):
        return sum(1 for e in self.events if e.is_pageview)

    def steps(self):
        """Fold clicks into their enclosing pageview and attach time deltas."""
        pv_times = [e.timestamp for e in self.events if e.is_pageview]
        steps, pending, current = [], [], None
        for ev in self.events:
            if ev.is_pageview:
                if current is not None:
                    steps.append((current, tuple(pending)))
                    pending = []
                current = ev
            else:
                pending.append(ev.click_id)
        if current is not None:
            steps.append((current, tuple(pending)))
        out = []
        for i, (pv, clicks) in enumerate(steps):
            delta = pv_times[i] - pv_times[i - 1] if i > 0 else 0
            dwell = pv_times[i + 1] - pv_times[i] if i + 1 < len(pv_times) else 0
            out.append(Step(pv.page_url, clicks, int(delta), int(dwell)))
        return out


class ParsedLog(list):
    """List of events; ``errors`` holds ``(line_number, message)`` for rejected lines."""

    def __init__(self, events=(), errors=()):
        super().__init__(events)
        self.errors = list(errors)


def parse_timestamp(value):
    if not isinstance(value, str):
        raise ValueError("ts must be an ISO-8601 string")
    text = value.strip()
    if text.endswith("Z"):
        text = text[:-1] + "+00:00"
    dt = datetime.fromisoformat(text)
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return int(dt.timestamp())


def format_timestamp(epoch):
    return datetime.fromtimestamp(int(epoch), tz=timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def _parse_line(line):
    rec = json.loads(line)
    if not isinstance(rec, dict):
        raise ValueError("line is not a JSON object")
    for key in ("user_id", "ts", "url", "type"):
        if key not in rec:
            raise ValueError(f"missing field {key!r}")
    etype = rec["type"]
    if etype not in EVENT_TYPES:
        raise ValueError(f"unknown event type {etype!r}")
    click_id = rec.get("click_id")
    if etype == "click" and not click_id:
        raise ValueError("click event without click_id")
    if etype == "pageview":
        click_id = None
    return ClickEvent(
        str(rec["user_id"]),
        parse_timestamp(rec["ts"]),
        str(rec["url"]),
        etype,
        None if click_id is None else str(click_id),
        rec.get("os"),
    )


def parse_click_log(stream, max_bad_fraction=0.10) -> ParsedLog:
    """Parse a JSON Lines click log from a binary or text stream.

    Malformed lines are skipped and reported. More than ``max_bad_fraction``
    malformed lines aborts with :class:`ParseError` carrying the report.
    """
    if isinstance(stream, (bytes, str)):
        stream = io.BytesIO(stream.encode() if isinstance(stream, str) else stream)
    events, errors, n_lines = [], [], 0
    try:
        for lineno, raw in enumerate(stream, start=1):
            line = raw.decode("utf-8") if isinstance(raw, bytes) else raw
            if not line.strip():
                continue
            n_lines += 1
            try:
                events.append(_parse_line(line))
            except (ValueError, TypeError) as exc:
                errors.append((lineno, str(exc)))
    except UnicodeDecodeError as exc:
        raise OSError(f"click log is not UTF-8: {exc}") from exc
    if n_lines and len(errors) / n_lines > max_bad_fraction:
        raise ParseError(
            f"{len(errors)} of {n_lines} lines malformed (first at line {errors[0][0]})", errors
        )
    for lineno, msg in errors:
        logger.warning("click log line %d rejected: %s", lineno, msg)
    return ParsedLog(events, errors)


def sessionize(events: Iterable[ClickEvent], gap_minutes=GAP_MINUTES):
    """Group events per user into sessions split by pageview gaps over ``gap_minutes``.

    The comparison is strict: a gap of exactly ``gap_minutes`` stays in the same
    session. Clicks join the session of the latest pageview before them; clicks
    preceding a user's first pageview join the first session. Users without a
    pageview produce no session.
    """
    gap = gap_minutes * 60
    by_user = defaultdict(list)
    for order, ev in enumerate(events):
        by_user[ev.user_id].append((ev.timestamp, order, ev))

    sessions = []
    for user_id, rows in by_user.items():
        rows.sort(key=lambda r: (r[0], r[1]))
        groups, leading = [], []
        last_pv = None
        for ts, _, ev in rows:
            if ev.is_pageview:
                if last_pv is None or ts - last_pv > gap:
                    groups.append([])
                    if leading:
                        groups[-1].extend(leading)
                        leading = []
                last_pv = ts
                groups[-1].append(ev)
            elif groups:
                groups[-1].append(ev)
            else:
                leading.append(ev)
        for k, evs in enumerate(groups):
            first_pv = next(e for e in evs if e.is_pageview)
            os_tag = next((e.os for e in evs if e.os), None)
            sessions.append(
                Session(user_id, evs, first_pv.timestamp, None, os_tag, f"{user_id}#{k}", k)
            )
    sessions.sort(key=lambda s: (s.session_start, s.user_id, s.index))
    return sessions


@dataclass(frozen=True)
class PurchaseMatcher:
    """Matches a purchase event by URL regex and/or click id."""

    url_pattern: Optional[str] = None
    click_ids: frozenset = frozenset()

    def __post_init__(self):
        if not self.url_pattern and not self.click_ids:
            raise ValueError("purchase matcher needs a URL pattern or click ids")

    @classmethod
    def parse(cls, text):
        """``url:<regex>`` or ``click:<id>[,<id>...]``; bare text is a URL regex."""
        text = text.strip()
        if text.startswith("click:"):
            ids = frozenset(t.strip() for t in text[6:].split(",") if t.strip())
            return cls(None, ids)
        if text.startswith("url:"):
            text = text[4:]
        return cls(text, frozenset())

    def matches(self, event: ClickEvent):
        if self.click_ids and event.click_id in self.click_ids:
            return True
        if self.url_pattern and event.is_pageview:
            return re.search(self.url_pattern, event.page_url) is not None
        return False

    def describe(self):
        if self.click_ids:
            return "click:" + ",".join(sorted(self.click_ids))
        return "url:" + self.url_pattern


class LabeledSessions(list):
    def __init__(self, sessions=(), n_dropped=0):
        super().__init__(sessions)
        self.n_dropped = n_dropped


def label_and_censor(sessions, purchase_matcher: PurchaseMatcher) -> LabeledSessions:
    """Label purchase sessions and cut the purchase event and everything after it.

    Sessions left without a pageview are dropped; ``n_dropped`` counts them.
    """
    out, dropped, any_match = [], 0, False
    for s in sessions:
        cut = next((i for i, e in enumerate(s.events) if purchase_matcher.matches(e)), None)
        if cut is None:
            out.append(replace(s, y=0, events=list(s.events)))
            continue
        any_match = True
        visible = list(s.events[:cut])
        if not any(e.is_pageview for e in visible):
            dropped += 1
            continue
        start = next(e.timestamp for e in visible if e.is_pageview)
        out.append(replace(s, y=1, events=visible, session_start=start))
    if sessions and not any_match:
        warnings.warn("purchase matcher matched no event in the corpus", stacklevel=2)
    if dropped:
        logger.info("dropped %d sessions emptied by censoring", dropped)
    return LabeledSessions(out, dropped)


def parent_url(url):
    """Strip the query/fragment, else the last path segment; ``None`` above the root."""
    for sep in ("#", "?"):
        if sep in url:
            return url.split(sep, 1)[0] or "/"
    path = url.rstrip("/")
    if not path:
        return None
    cut = path.rfind("/")
    return "/" if cut <= 0 else path[:cut]


@dataclass
class Vocab:
    pages: list  # category names, index = one-hot position
    page_map: dict  # raw url -> category name (training urls)
    clicks: list  # kept click ids
    click_hosts: dict  # click id -> sorted page categories where it was seen
    min_fraction: float = 0.01
    n_sessions: int = 0

    @property
    def n_pages(self):
        return len(self.pages)

    @property
    def n_clicks(self):
        return len(self.clicks)

    def __post_init__(self):
        self._page_index = {p: i for i, p in enumerate(self.pages)}
        self._click_index = {c: i for i, c in enumerate(self.clicks)}

    def page_category(self, url):
        if url in self.page_map:
            return self.page_map[url]
        node = url
        while node is not None:
            if node in self._page_index:
                return node
            node = parent_url(node)
        return OTHER_PAGE

    def page_index(self, url):
        return self._page_index[self.page_category(url)]

    def click_index(self, click_id):
        """Column of a click id, or ``None`` (the drop marker) for pruned ids."""
        return self._click_index.get(click_id)

    def to_dict(self):
        return {
            "pages": self.pages,
            "page_map": dict(sorted(self.page_map.items())),
            "clicks": self.clicks,
            "click_hosts": {k: list(v) for k, v in sorted(self.click_hosts.items())},
            "min_fraction": self.min_fraction,
            "n_sessions": self.n_sessions,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            list(d["pages"]),
            dict(d["page_map"]),
            list(d["clicks"]),
            {k: list(v) for k, v in d["click_hosts"].items()},
            d["min_fraction"],
            d["n_sessions"],
        )


def fit_vocab(train_sessions, min_fraction=0.01) -> Vocab:
    """Bin rare page URLs into their parent page and prune rare click ids.

    Frequencies are the fraction of training sessions containing the item. A URL
    under the threshold climbs its parent chain until the group it joins is
    frequent enough; anything that reaches the root lands in ``(other)``.
    """
    train_sessions = list(train_sessions)
    if not train_sessions:
        raise FitError("cannot fit a vocabulary on zero sessions")
    n = len(train_sessions)
    threshold = min_fraction * n

    url_sessions = defaultdict(set)
    click_sessions = Counter()
    for k, s in enumerate(train_sessions):
        for e in s.events:
            if e.is_pageview:
                url_sessions[e.page_url].add(k)
        for cid in {e.click_id for e in s.events if not e.is_pageview}:
            click_sessions[cid] += 1

    # climb until every group reaches the threshold
    assign = {url: url for url in url_sessions}
    while True:
        groups = defaultdict(set)
        for url, key in assign.items():
            groups[key] |= url_sessions[url]
        rare = [g for g, ks in groups.items() if len(ks) < threshold and g != OTHER_PAGE]
        if not rare:
            break
        moves = {}
        for g in rare:
            parent = parent_url(g)
            moves[g] = parent if parent is not None else OTHER_PAGE
        assign = {url: moves.get(key, key) for url, key in assign.items()}

    pages = sorted(set(assign.values()) - {OTHER_PAGE}) + [OTHER_PAGE]
    clicks = sorted(c for c, cnt in click_sessions.items() if cnt >= threshold)
    kept = set(clicks)

    hosts = defaultdict(set)
    for s in train_sessions:
        current = None
        for e in s.events:
            if e.is_pageview:
                current = assign[e.page_url]
            elif e.click_id in kept and current is not None:
                hosts[e.click_id].add(current)
    vocab = Vocab(
        pages,
        assign,
        clicks,
        {c: sorted(hosts[c]) for c in clicks},
        min_fraction,
        n,
    )
    logger.info(
        "vocab: %d urls -> %d page categories, %d click ids -> %d kept",
        len(url_sessions), len(pages), len(click_sessions), len(clicks),
    )
    return vocab


class Scaler:
    """Per-column mean / standard deviation fitted on training rows."""

    def __init__(self, mean=None, sd=None):
        self.mean = None if mean is None else np.asarray(mean, dtype=np.float64)
        self.sd = None if sd is None else np.asarray(sd, dtype=np.float64)

    def fit(self, X, names=None):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X[:, None]
        if X.shape[0] == 0:
            raise FitError("cannot fit a scaler on zero rows")
        self.mean = X.mean(axis=0)
        sd = X.std(axis=0)
        const = sd <= 0
        if np.any(const):
            cols = np.flatnonzero(const).tolist() if names is None else [names[i] for i in np.flatnonzero(const)]
            warnings.warn(f"constant features get sd=1: {cols}", stacklevel=2)
            sd = np.where(const, 1.0, sd)
        self.sd = sd
        return self

    @property
    def fitted(self):
        return self.mean is not None

    def transform(self, X):
        if not self.fitted:
            raise NotFittedError("scaler used before fit")
        return (np.asarray(X, dtype=np.float64) - self.mean) / self.sd

    def to_dict(self):
        return {"mean": self.mean.tolist(), "sd": self.sd.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(d["mean"], d["sd"])


@dataclass
class EncodedSequence:
    X: np.ndarray  # (T, D)
    mask: np.ndarray  # (T,) bool
    y: Optional[int]


@dataclass
class EncodedDataset:
    """Stacked encoded sequences with per-row side information.

    ``dwell`` keeps each valid step's raw dwell seconds aligned with ``X`` so
    order-free aggregates can be rebuilt from the same steps.
    """

    X: np.ndarray  # (N, T, D)
    mask: np.ndarray  # (N, T)
    y: np.ndarray  # (N,)
    dwell: np.ndarray  # (N, T)
    n_pages: int
    n_clicks: int
    session_ids: list = field(default_factory=list)
    lengths: Optional[np.ndarray] = None
    os: list = field(default_factory=list)
    starts: Optional[np.ndarray] = None

    def __len__(self):
        return self.X.shape[0]

    @property
    def T(self):
        return self.X.shape[1]

    @property
    def D(self):
        return self.X.shape[2]

    def column_groups(self):
        P, K = self.n_pages, self.n_clicks
        return {
            "web-page": list(range(P)),
            "click": list(range(P, P + K)),
            "time": [P + K],
        }

    def subset(self, idx):
        idx = np.asarray(idx)
        pick = lambda seq: [seq[i] for i in idx] if seq else []
        return EncodedDataset(
            self.X[idx], self.mask[idx], self.y[idx], self.dwell[idx], self.n_pages,
            self.n_clicks, pick(self.session_ids),
            None if self.lengths is None else self.lengths[idx], pick(self.os),
            None if self.starts is None else self.starts[idx],
        )

    def __getitem__(self, i):
        return EncodedSequence(self.X[i], self.mask[i], int(self.y[i]))


def _step_rows(steps, vocab, T):
    steps = steps[:T]
    P, K = vocab.n_pages, vocab.n_clicks
    rows = np.zeros((len(steps), P + K + 1))
    for i, st in enumerate(steps):
        rows[i, vocab.page_index(st.page_url)] = 1.0
        for cid in st.clicks:
            j = vocab.click_index(cid)
            if j is not None:
                rows[i, P + j] = 1.0
        rows[i, P + K] = st.delta
    return rows, np.array([st.dwell for st in steps], dtype=np.float64)


def encode_sequence(session, vocab: Vocab, scaler: Scaler, T=SEQ_LEN) -> EncodedSequence:
    """Page one-hot, click multi-hot and standardized time delta per pageview.

    Keeps the first ``T`` pageviews and pre-pads shorter sessions with zero rows.
    """
    if scaler is None or not scaler.fitted:
        raise NotFittedError("encode_sequence needs a fitted scaler")
    rows, _ = _step_rows(session.steps(), vocab, T)
    n = rows.shape[0]
    X = np.zeros((T, rows.shape[1]))
    mask = np.zeros(T, dtype=bool)
    if n:
        rows[:, -1] = scaler.transform(rows[:, -1:])[:, 0]
        X[T - n :] = rows
        mask[T - n :] = True
    return EncodedSequence(X, mask, session.y)


class SequenceEncoder(TransformerMixin, BaseEstimator):
    """Fit the page/click vocabulary and time scaler; transform sessions to a dataset."""

    def __init__(self, T=SEQ_LEN, min_fraction=0.01):
        self.T = T
        self.min_fraction = min_fraction

    def fit(self, sessions, y=None):
        sessions = list(sessions)
        self.vocab_ = fit_vocab(sessions, self.min_fraction)
        deltas = [st.delta for s in sessions for st in s.steps()[: self.T]]
        self.scaler_ = Scaler().fit(np.asarray(deltas, dtype=np.float64)[:, None], ["time_delta"])
        return self

    def transform(self, sessions) -> EncodedDataset:
        check_is_fitted(self, "vocab_")
        return encode_dataset(sessions, self.vocab_, self.scaler_, self.T)

    def fingerprint(self):
        check_is_fitted(self, "vocab_")
        return encoder_fingerprint(self.vocab_.to_dict(), self.scaler_.to_dict())


def encode_dataset(sessions, vocab, scaler, T=SEQ_LEN) -> EncodedDataset:
    sessions = list(sessions)
    n = len(sessions)
    D = vocab.n_pages + vocab.n_clicks + 1
    X = np.zeros((n, T, D))
    mask = np.zeros((n, T), dtype=bool)
    dwell = np.zeros((n, T))
    y = np.zeros(n, dtype=np.int64)
    for k, s in enumerate(sessions):
        rows, dw = _step_rows(s.steps(), vocab, T)
        m = rows.shape[0]
        if m:
            rows[:, -1] = scaler.transform(rows[:, -1:])[:, 0]
            X[k, T - m :] = rows
            mask[k, T - m :] = True
            dwell[k, T - m :] = dw
        y[k] = -1 if s.y is None else s.y
    return EncodedDataset(
        X, mask, y, dwell, vocab.n_pages, vocab.n_clicks,
        [s.session_id for s in sessions],
        np.array([s.length for s in sessions], dtype=np.int64),
        [s.os for s in sessions],
        np.array([s.session_start for s in sessions], dtype=np.int64),
    )


def encoder_fingerprint(*parts):
    blob = json.dumps(parts, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def dataset_to_dict(ds: EncodedDataset, vocab: Vocab, scaler: Scaler, extra=None):
    rows = []
    for k in range(len(ds)):
        rows.append({
            "mask": ds.mask[k].astype(int).tolist(),
            "X": ds.X[k].reshape(-1).tolist(),
            "dwell": ds.dwell[k].tolist(),
            "y": int(ds.y[k]),
            "session_id": ds.session_ids[k] if ds.session_ids else None,
            "length": int(ds.lengths[k]) if ds.lengths is not None else None,
            "os": ds.os[k] if ds.os else None,
            "start": int(ds.starts[k]) if ds.starts is not None else None,
        })
    doc = {
        "schema_version": SCHEMA_VERSION,
        "T": ds.T,
        "D": ds.D,
        "n_pages": ds.n_pages,
        "n_clicks": ds.n_clicks,
        "vocab": vocab.to_dict(),
        "scaler": scaler.to_dict(),
        "rows": rows,
    }
    if extra:
        doc.update(extra)
    return doc


def dataset_from_dict(doc) -> EncodedDataset:
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise DataError(f"unsupported dataset schema_version {doc.get('schema_version')!r}")
    T, D = doc["T"], doc["D"]
    rows = doc["rows"]
    n = len(rows)
    X = np.array([r["X"] for r in rows], dtype=np.float64).reshape(n, T, D)
    mask = np.array([r["mask"] for r in rows], dtype=bool).reshape(n, T)
    dwell = np.array([r["dwell"] for r in rows], dtype=np.float64).reshape(n, T)
    y = np.array([r["y"] for r in rows], dtype=np.int64)
    lengths = np.array([r.get("length") or 0 for r in rows], dtype=np.int64)
    starts = np.array([r.get("start") or 0 for r in rows], dtype=np.int64)
    return EncodedDataset(
        X, mask, y, dwell, doc["n_pages"], doc["n_clicks"],
        [r.get("session_id") for r in rows], lengths, [r.get("os") for r in rows], starts,
    )
