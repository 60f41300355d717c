"""Synthetic click logs and demographic records with a known intent model.

Each session has a latent purchase intent ``z``. Page *types* (landing, product,
quote, info) follow a first-order Markov chain whose transition matrix is
``(1 - lam) * M0 + lam * F[z]``: ``M0`` ignores intent, ``F[1]`` tends to walk
a cycle of page types forward and ``F[0]`` tends to walk it backwards. Dwell times,
clicks and session length depend on ``z`` independently per event, so at
``lam = 0`` the event order carries no information about intent.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from .sessions import format_timestamp

LANDING, PRODUCT, QUOTE, INFO = range(4)
TYPE_NAMES = ("landing", "product", "quote", "info")
PURCHASE_URL = "/checkout/confirmation"
PURCHASE_MATCHER = "url:^/checkout/confirmation"
START_EPOCH = 1735689600  # 2025-01-01T00:00:00Z
YEAR_SECONDS = 365 * 86400
OS_TAGS = ("Windows", "macOS", "Android", "iOS", "other")

INITIAL = np.array([0.60, 0.20, 0.05, 0.15])
# Intent-free chain and the two intent chains are all doubly stochastic, so the
# long-run page mix is uniform and only the direction of travel reveals intent:
# high intent walks the cycle landing -> product -> quote -> info -> landing,
# low intent walks it backwards.
M0 = np.full((4, 4), 0.25)


def cycle_chain(strength, forward=True):
    """Rows put ``0.25 + strength`` on the next state and ``0.25 - strength`` on the previous one."""
    step = 1 if forward else -1
    F = np.full((4, 4), 0.25)
    for i in range(4):
        F[i, (i + step) % 4] += strength
        F[i, (i - step) % 4] -= strength
    return F


DWELL_LOG_MEAN = np.log([25.0, 60.0, 90.0, 40.0])
DWELL_SIGMA = 0.8
DWELL_RANGE = (2, 1700)


class GenerationError(ValueError):
    pass


@dataclass
class GenConfig:
    n_sessions: int = 20000
    mean_sessions_per_user: float = 1.5
    n_pages: int = 14  # distinct base pages (P0)
    n_clicks: int = 12  # click fields (K0)
    prevalence: float = 0.13
    lam: float = 0.8
    seed: int = 0
    family_odds_ratio: float = 2.0
    returning_odds_ratio: float = 2.0
    dwell_shift: float = 0.1
    click_effect: float = 1.2
    mean_length: tuple = (4.2, 4.8)  # mean pageviews for z = 0, z = 1
    funnel_strength: float = 0.2

    def validate(self):
        if not 0.0 < self.prevalence < 1.0:
            raise GenerationError("prevalence must lie in (0, 1)")
        if not 0.0 <= self.lam <= 1.0:
            raise GenerationError("lam must lie in [0, 1]")
        if self.n_sessions <= 0 or self.mean_sessions_per_user < 1.0:
            raise GenerationError("need positive session counts and mean >= 1")
        if self.n_pages < 4 or self.n_clicks < 1:
            raise GenerationError("need at least one page per funnel type and one click field")
        if not 0.0 <= self.funnel_strength <= 0.25:
            raise GenerationError("funnel_strength must lie in [0, 0.25]")
        if min(self.mean_length) < 1.0:
            raise GenerationError("mean session length must be at least 1")
        if self.family_odds_ratio <= 0 or self.returning_odds_ratio <= 0:
            raise GenerationError("odds ratios must be positive")


def _logit(p):
    return math.log(p / (1 - p))


def _expit(x):
    return 1.0 / (1.0 + math.exp(-x))


def transition_matrix(lam, z, strength=0.2):
    return (1.0 - lam) * M0 + lam * cycle_chain(strength, forward=bool(z))


def total_variation(p, q):
    return 0.5 * float(np.abs(np.asarray(p) - np.asarray(q)).sum())


def page_catalogue(n_pages):
    """Base URLs per page type, filled round-robin over product/quote/info first."""
    names = {LANDING: ["/"], PRODUCT: [], QUOTE: [], INFO: []}
    product = ["car", "home", "travel", "pet", "life", "boat", "health", "accident"]
    quote = ["start", "details", "coverage", "price", "summary"]
    info = ["faq", "about", "contact", "claims", "blog", "terms", "careers"]
    pools = {PRODUCT: iter(product), QUOTE: iter(quote), INFO: iter(info)}
    order = [PRODUCT, QUOTE, INFO]
    k = 0
    while sum(len(v) for v in names.values()) < n_pages:
        t = order[k % 3]
        k += 1
        nxt = next(pools[t], None)
        if nxt is None:
            nxt = f"extra{k}"
        prefix = {PRODUCT: "/products/", QUOTE: "/quote/", INFO: "/"}[t]
        names[t].append(prefix + nxt)
    return names


def click_catalogue(n_clicks):
    """Click fields as (id, host page type, sign of the intent effect)."""
    base = [
        ("cta_get_quote", LANDING, +1),
        ("compare_prices", PRODUCT, +1),
        ("quote_next", QUOTE, +1),
        ("chat_open", INFO, -1),
        ("menu_open", LANDING, -1),
        ("read_terms", PRODUCT, -1),
        ("quote_back", QUOTE, -1),
        ("faq_expand", INFO, 0),
        ("select_coverage", PRODUCT, +1),
        ("add_extra", QUOTE, +1),
        ("newsletter", INFO, -1),
        ("share_page", PRODUCT, 0),
    ]
    out = []
    for k in range(n_clicks):
        name, host, sign = base[k % len(base)]
        if k >= len(base):
            name = f"{name}_{k // len(base)}"
        out.append((name, host, sign))
    return out


def demographic_record(rng, user_id, family):
    def maybe(value, p_missing):
        return None if rng.random() < p_missing else value

    return {
        "user_id": user_id,
        "age": int(np.clip(rng.normal(46, 14), 18, 90)),
        "gender": str(rng.choice(["man", "woman"])),
        "income_class": maybe(int(rng.integers(1, 5)), 0.005),
        "education_level": maybe(int(rng.integers(1, 6)), 0.005),
        "marital_status": maybe("couple" if family else "single", 0.005),
        "property_type": maybe(str(rng.choice(["rented", "owned", "equity"])), 0.02),
        "region": maybe(str(rng.choice(["capital", "zealand", "south", "central", "north"])), 0.003),
        "urban_density": maybe(str(rng.choice(["metropolis", "province", "village", "countryside"])), 0.005),
        "children": maybe(int(rng.integers(0, 4)), 0.005),
        "employment": maybe(str(rng.choice(["worker", "retired", "student", "unemployed"], p=[0.6, 0.2, 0.12, 0.08])), 0.005),
        "location": str(rng.choice(["home", "neighboring", "foreign"], p=[0.7, 0.25, 0.05])),
        "browser": str(rng.choice(["google", "apple", "microsoft", "mozilla", "other"])),
    }


DEMOGRAPHY_SCHEMA = """\
age = numeric demographic
gender = categorical demographic
income_class = ordinal demographic
education_level = ordinal demographic
marital_status = categorical demographic
property_type = categorical demographic
region = categorical demographic
urban_density = categorical demographic
children = ordinal demographic
employment = categorical demographic
month = cyclic:12 time
time_of_month = cyclic:3 time
weekday = cyclic:7 time
time_of_day = cyclic:6 time
location = categorical place
os = categorical place
previous_visits = numeric place
distance_to_last_visit = numeric:max place
browser = categorical place
"""


class IntentModel:
    """Per-event likelihoods of the generator, used for sampling and diagnostics."""

    def __init__(self, config: GenConfig):
        config.validate()
        self.config = config
        self.pages = page_catalogue(config.n_pages)
        self.clicks = click_catalogue(config.n_clicks)
        self.trans = [transition_matrix(config.lam, z, config.funnel_strength) for z in (0, 1)]
        self.click_prob = np.zeros((2, len(self.clicks)))
        for j, (_, _, sign) in enumerate(self.clicks):
            base = _logit(0.25)
            for z in (0, 1):
                self.click_prob[z, j] = _expit(base + config.click_effect * sign * (1 if z else -1) / 2)
        self.stop_prob = [1.0 / m for m in config.mean_length]
        self.hosted = {t: [j for j, c in enumerate(self.clicks) if c[1] == t] for t in range(4)}
        self.intercept = self._solve_intercept()

    def _solve_intercept(self):
        c = self.config
        p_first = 1.0 / c.mean_sessions_per_user
        lf, lr = math.log(c.family_odds_ratio), math.log(c.returning_odds_ratio)

        def prevalence(b):
            total = 0.0
            for fam in (0, 1):
                for ret, w in ((0, p_first), (1, 1 - p_first)):
                    total += 0.5 * w * _expit(b + lf * fam + lr * ret)
            return total

        lo, hi = -30.0, 30.0
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            if prevalence(mid) < c.prevalence:
                lo = mid
            else:
                hi = mid
        if hi - (-30.0) < 1e-6 or 30.0 - lo < 1e-6:
            raise GenerationError(
                f"prevalence {c.prevalence} is unreachable with the configured odds ratios")
        return 0.5 * (lo + hi)

    def intent_probability(self, family, returning):
        c = self.config
        return _expit(self.intercept + math.log(c.family_odds_ratio) * family
                      + math.log(c.returning_odds_ratio) * returning)

    def sample_session(self, rng, z):
        """Page types, dwell seconds and click-id lists for one session."""
        types, dwells, clicks = [], [], []
        state = rng.choice(4, p=INITIAL)
        while True:
            types.append(int(state))
            mu = DWELL_LOG_MEAN[state] + self.config.dwell_shift * (1 if z else -1)
            d = int(np.clip(round(rng.lognormal(mu, DWELL_SIGMA)), *DWELL_RANGE))
            dwells.append(d)
            hit = [j for j in self.hosted[state] if rng.random() < self.click_prob[z, j]]
            clicks.append(hit)
            if rng.random() < self.stop_prob[z] or len(types) >= 60:
                break
            state = rng.choice(4, p=self.trans[z][state])
        return types, dwells, clicks

    def log_likelihood(self, types, dwells, clicks, z):
        """log p(session | z); the last page's stop decision is included."""
        ll = math.log(INITIAL[types[0]])
        for a, b in zip(types[:-1], types[1:]):
            ll += math.log(self.trans[z][a][b])
        n = len(types)
        ll += (n - 1) * math.log(1 - self.stop_prob[z]) + math.log(self.stop_prob[z])
        for t, d, hit in zip(types, dwells, clicks):
            mu = DWELL_LOG_MEAN[t] + self.config.dwell_shift * (1 if z else -1)
            ll += -0.5 * ((math.log(d) - mu) / DWELL_SIGMA) ** 2
            hit = set(hit)
            for j in self.hosted[t]:
                p = self.click_prob[z, j]
                ll += math.log(p if j in hit else 1 - p)
        return ll

    def log_likelihood_ratio(self, types, dwells, clicks):
        return self.log_likelihood(types, dwells, clicks, 1) - self.log_likelihood(types, dwells, clicks, 0)


@dataclass
class GeneratedCorpus:
    click_log: str  # JSONL
    demographics: str  # JSONL
    labels: str  # JSONL: user_id, session_index, z
    sessions: list  # (user_id, index, z, types, dwells, clicks) for diagnostics


def _url_for(rng, model, t):
    urls = model.pages[t]
    url = urls[int(rng.integers(len(urls)))]
    if url == "/blog" or url.endswith("/blog"):
        url = f"/blog/post-{int(rng.integers(1, 300))}"
    elif t == LANDING and rng.random() < 0.3:
        url = f"/?utm_source={rng.choice(['ads', 'mail', 'social', 'partner'])}"
    elif rng.random() < 0.03:
        url = f"{url}?ref={int(rng.integers(1, 50))}"
    return url


def generate(config: GenConfig) -> GeneratedCorpus:
    """Deterministic corpus for ``config.seed``; per-user streams come from spawned seeds."""
    model = IntentModel(config)
    root = np.random.SeedSequence(config.seed)
    log_lines, demo_lines, label_lines, diag = [], [], [], []
    n_made = 0
    user_no = 0
    p_stop_user = 1.0 / config.mean_sessions_per_user
    while n_made < config.n_sessions:
        rng = np.random.default_rng(root.spawn(1)[0])
        user_id = f"u{user_no:06d}"
        user_no += 1
        family = int(rng.random() < 0.5)
        n_sess = min(int(rng.geometric(p_stop_user)), config.n_sessions - n_made)
        demo_lines.append(json.dumps(demographic_record(rng, user_id, family)))
        t = START_EPOCH + int(rng.integers(0, YEAR_SECONDS - 40 * 86400))
        os_tag = str(rng.choice(OS_TAGS, p=[0.35, 0.15, 0.25, 0.2, 0.05]))
        for k in range(n_sess):
            z = int(rng.random() < model.intent_probability(family, int(k > 0)))
            types, dwells, clicks = model.sample_session(rng, z)
            for typ, d, hit in zip(types, dwells, clicks):
                log_lines.append(json.dumps({"user_id": user_id, "ts": format_timestamp(t),
                                             "url": _url_for(rng, model, typ), "type": "pageview",
                                             "os": os_tag}))
                for j in hit:
                    offset = int(rng.integers(0, max(d, 1)))
                    log_lines.append(json.dumps({"user_id": user_id, "ts": format_timestamp(t + offset),
                                                 "url": "", "type": "click",
                                                 "click_id": model.clicks[j][0]}))
                t += d
            if z:
                log_lines.append(json.dumps({"user_id": user_id, "ts": format_timestamp(t),
                                             "url": PURCHASE_URL, "type": "pageview", "os": os_tag}))
                t += int(rng.integers(5, 60))
                log_lines.append(json.dumps({"user_id": user_id, "ts": format_timestamp(t),
                                             "url": "/account", "type": "pageview", "os": os_tag}))
            # next visit at least a few hours later
            t += int(3600 * (2 + rng.exponential(24 * 10)))
            label_lines.append(json.dumps({"user_id": user_id, "session_index": k, "z": z}))
            diag.append((user_id, k, z, types, dwells, clicks))
            n_made += 1
    return GeneratedCorpus(
        "\n".join(log_lines) + "\n",
        "\n".join(demo_lines) + "\n",
        "\n".join(label_lines) + "\n",
        diag,
    )


def config_dict(config: GenConfig):
    return asdict(config)
