import itertools
import random
from fractions import Fraction

import pytest

from solaudit.backend import BackendUnavailable
from solaudit.prompts import Label
from solaudit.role.detector import FAIL_SAFE, STRICT_MAJORITY, Vote, VoteSet, detect, majority, vote
from solaudit.solidity import CallContext

V, S = Label.VULNERABLE, Label.SAFE

DETECTOR = "classification task"


def votes_of(labels):
    return VoteSet([Vote(i, l) for i, l in enumerate(labels, 1)])


def expected(labels):
    """Plain restatement of the voting rule: at least floor(m/2)+1 votes win, otherwise vulnerable."""
    m = len(labels)
    need = m // 2 + 1
    for label in (V, S):
        n = labels.count(label)
        if n >= need:
            return label, Fraction(n, m), STRICT_MAJORITY
    return V, Fraction(labels.count(V), m), FAIL_SAFE


def test_majority_all_patterns():
    patterns = list(itertools.product([V, S, None], repeat=5))
    assert len(patterns) == 243
    for labels in patterns:
        verdict = majority(votes_of(labels))
        assert (verdict.winner, verdict.confidence, verdict.decided_by) == expected(list(labels)), labels


def test_majority_permutations():
    rng = random.Random(42)
    for _ in range(10000):
        labels = [rng.choice([V, S, None]) for _ in range(rng.randint(1, 9))]
        shuffled = labels[:]
        rng.shuffle(shuffled)
        a, b = majority(votes_of(labels)), majority(votes_of(shuffled))
        assert (a.winner, a.confidence, a.decided_by) == (b.winner, b.confidence, b.decided_by)


@pytest.mark.parametrize(
    "labels, winner, confidence, decided_by",
    [
        ([V, V, V, V, S], V, 0.8, STRICT_MAJORITY),
        ([S, S, S, V, V], S, 0.6, STRICT_MAJORITY),
        ([V, V, S, S, None], V, 0.4, FAIL_SAFE),
        ([None] * 5, V, 0.0, FAIL_SAFE),
        ([S], S, 1.0, STRICT_MAJORITY),
        ([V, S], V, 0.5, FAIL_SAFE),
    ],
)
def test_majority_cases(labels, winner, confidence, decided_by):
    verdict = majority(votes_of(labels))
    assert verdict.winner == winner
    assert float(verdict.confidence) == confidence
    assert verdict.decided_by == decided_by


def test_majority_empty():
    with pytest.raises(ValueError):
        majority(VoteSet([]))


def test_vote(fn, make_session):
    replies = ["The label is vulnerable.", "safe", "I am unsure", {"error": "connection reset"}, "VULNERABLE"]
    session = make_session([{"contains": DETECTOR, "replies": replies}])
    vote_set = vote(fn, session)
    assert [v.label for v in vote_set.votes] == [V, S, None, None, V]
    assert [v.variant for v in vote_set.votes] == [1, 2, 3, 4, 5]
    assert vote_set.votes[3].error == "connection reset"
    assert vote_set.votes[2].to_dict()["label"] == "abstain"
    assert vote_set.count(V) == 2

    verdict = majority(vote_set)
    assert (verdict.winner, verdict.confidence, verdict.decided_by) == (V, Fraction(2, 5), FAIL_SAFE)
    assert verdict.to_dict()["confidence"] == 0.4


def test_vote_all_failed(fn, make_session):
    session = make_session([{"contains": DETECTOR, "reply": {"error": "down"}}])
    with pytest.raises(BackendUnavailable):
        vote(fn, session)


def test_vote_some_failed(fn, make_session):
    replies = [{"error": "down"}] * 4 + ["safe"]
    verdict = detect(fn, make_session([{"contains": DETECTOR, "replies": replies}]))
    assert verdict.winner == V
    assert verdict.decided_by == FAIL_SAFE
    assert verdict.confidence == 0


def test_detect(fn, make_session):
    session = make_session([{"contains": DETECTOR, "reply": "safe"}], detector__prompts=3)
    verdict = detect(fn, session)
    assert verdict.winner == S
    assert verdict.confidence == 1
    assert verdict.function_id == fn.id
    assert verdict.vote_set.m == 3
    assert len(set(verdict.transcript)) == 3


def test_context_modes(fn, make_session):
    ctx = CallContext(fn.id, callees=[("Bank.f()#1", "function f() {}")])
    rules = [{"contains": "As a Caller", "reply": "vulnerable"}, {"contains": DETECTOR, "reply": "safe"}]

    vote_set = vote(fn, make_session(rules), ctx)
    assert [v.with_context for v in vote_set.votes] == [False] * 5
    assert vote_set.count(S) == 5

    vote_set = vote(fn, make_session(rules, detector__context="call"), ctx)
    assert [v.with_context for v in vote_set.votes] == [True] * 5
    assert vote_set.count(V) == 5

    vote_set = vote(fn, make_session(rules, detector__context="call"))
    assert vote_set.count(S) == 5

    vote_set = vote(fn, make_session(rules, detector__context="both"), ctx)
    assert vote_set.m == 10
    assert [v.with_context for v in vote_set.votes] == [False] * 5 + [True] * 5
    assert majority(vote_set).decided_by == FAIL_SAFE
