import json
import warnings

import pytest

from clickintent.experiments import SplitSpec, prepare
from clickintent.sessions import PurchaseMatcher, label_and_censor, parse_click_log, sessionize
from clickintent.synthgen import PURCHASE_MATCHER, GenConfig, generate


def labelled_sessions(corpus):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        events = parse_click_log(corpus.click_log)
        return label_and_censor(sessionize(events), PurchaseMatcher.parse(PURCHASE_MATCHER))


def user_records(corpus):
    return {r["user_id"]: r for r in map(json.loads, corpus.demographics.splitlines()) if r}


def build(n_sessions=1500, seed=0, **kw):
    corpus = generate(GenConfig(n_sessions=n_sessions, seed=seed, **kw))
    sessions = labelled_sessions(corpus)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        data = prepare(sessions, user_records(corpus), SplitSpec())
    return corpus, sessions, data


@pytest.fixture(scope="session")
def small():
    """A small generated corpus with its labelled sessions and prepared splits."""
    return build()


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
