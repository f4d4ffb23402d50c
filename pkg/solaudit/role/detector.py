from collections import Counter
from dataclasses import dataclass, field
from fractions import Fraction
from typing import List, Optional

from ..app import logger
from ..backend import BackendError, BackendUnavailable
from ..prompts import Label, parse_label
from ..solidity import CallContext, FunctionRecord

log = logger.getChild("detector")

STRICT_MAJORITY = "strict_majority"
FAIL_SAFE = "fail_safe_default"


@dataclass
class Vote:
    variant: int
    label: Optional[Label]
    with_context: bool = False
    prompt_hash: str = ""
    error: Optional[str] = None

    def to_dict(self):
        return {
            "variant": self.variant,
            "label": self.label.value if self.label else "abstain",
            "with_context": self.with_context,
            "prompt_hash": self.prompt_hash,
            "error": self.error,
        }


@dataclass
class VoteSet:
    votes: List[Vote]

    @property
    def m(self):
        return len(self.votes)

    def count(self, label: Optional[Label]):
        return sum(1 for v in self.votes if v.label == label)

    def to_dict(self):
        return {"m": self.m, "votes": [v.to_dict() for v in self.votes]}


@dataclass
class Verdict:
    winner: Label
    confidence: Fraction
    vote_set: VoteSet
    decided_by: str
    function_id: str = ""
    transcript: List[str] = field(default_factory=list)

    def to_dict(self):
        return {
            "winner": self.winner.value,
            "confidence": round(float(self.confidence), 4),
            "decided_by": self.decided_by,
            "vote_set": self.vote_set.to_dict(),
        }


def _prompts(fn: FunctionRecord, session, ctx: Optional[CallContext]):
    kit = session.prompts
    variants = range(1, session.m + 1)
    mode = session.detector_context
    prompts = []
    if mode in ("none", "both") or ctx is None:
        prompts += [kit.render_detector(fn, i) for i in variants]
    if mode in ("call", "both") and ctx is not None:
        prompts += [kit.render_detector(fn, i, ctx) for i in variants]
    return prompts


def vote(fn: FunctionRecord, session, ctx: Optional[CallContext] = None) -> VoteSet:
    """Ask every detector prompt once and collect the labels.

    Failed calls and replies without a label become abstentions.

    Raises:
        BackendUnavailable: only when every call failed.
    """
    prompts = _prompts(fn, session, ctx)
    results = session.complete_many("detector", prompts)
    votes = []
    for p, r in zip(prompts, results):
        if isinstance(r, BackendError):
            log.warning(f'Detector variant {p.variant.index} failed for "{fn.id}": {r}')
            votes.append(Vote(p.variant.index, None, p.variant.with_context, p.hash, str(r)))
        else:
            votes.append(Vote(p.variant.index, parse_label(r.output, session.precedence), p.variant.with_context, p.hash))
    if all(v.error for v in votes):
        raise BackendUnavailable(f'all {len(votes)} detector calls failed for "{fn.id}".')
    return VoteSet(votes)


def majority(vote_set: VoteSet) -> Verdict:
    """Majority voting over all m prompts, abstentions included in the denominator.

    A label needs strictly more than half of m. Without one the verdict falls back to vulnerable.
    """
    m = vote_set.m
    if m < 1:
        raise ValueError("majority needs at least one vote.")
    counts = Counter(v.label for v in vote_set.votes)
    for label in (Label.VULNERABLE, Label.SAFE):
        if 2 * counts[label] > m:
            return Verdict(label, Fraction(counts[label], m), vote_set, STRICT_MAJORITY)
    return Verdict(Label.VULNERABLE, Fraction(counts[Label.VULNERABLE], m), vote_set, FAIL_SAFE)


def detect(fn: FunctionRecord, session, ctx: Optional[CallContext] = None) -> Verdict:
    verdict = majority(vote(fn, session, ctx))
    verdict.function_id = fn.id
    verdict.transcript = [v.prompt_hash for v in verdict.vote_set.votes]
    log.info(
        f'Detector labeled "{fn.id}" {verdict.winner.value} '
        f"({verdict.vote_set.count(verdict.winner)}/{verdict.vote_set.m}, {verdict.decided_by})."
    )
    return verdict
