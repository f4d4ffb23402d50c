from dataclasses import asdict, dataclass, field
from fractions import Fraction
from typing import List, Optional, Sequence

from ..app import AuditError, logger
from ..backend import BackendError
from ..prompts import Label, MalformedReply, parse_agent_reply
from ..solidity import FunctionRecord

log = logger.getChild("deliberation")

AGREE = "agree"
ITERATION_CAP = "iteration_cap"

RETRY_NOTE = "Your previous reply could not be used ({reason}). Reply again with one fenced JSON block in the required format."


class NoCandidates(AuditError):
    pass


@dataclass
class RankerDecision:
    action: str
    chosen: List[int]
    confidence: int
    justification: str
    merged_text: Optional[str] = None
    fallback: bool = False

    def to_dict(self):
        return asdict(self)


@dataclass
class CriticFeedback:
    action: str
    critique: str = ""
    ids: List[int] = field(default_factory=list)
    fallback: bool = False

    def to_dict(self):
        return asdict(self)


@dataclass
class Round:
    decision: RankerDecision
    feedback: CriticFeedback

    def to_dict(self):
        return {"decision": self.decision.to_dict(), "feedback": self.feedback.to_dict()}


@dataclass
class FinalFinding:
    label: Label
    confidence: Fraction
    reason: str
    reason_provenance: dict

    def to_dict(self):
        return {
            "label": self.label.value,
            "confidence": round(float(self.confidence), 4),
            "reason": self.reason,
            "reason_provenance": self.reason_provenance,
        }


@dataclass
class Deliberation:
    rounds: List[Round]
    final: FinalFinding
    terminated_by: str

    def to_dict(self):
        return {
            "rounds": [r.to_dict() for r in self.rounds],
            "terminated_by": self.terminated_by,
            "final": self.final.to_dict(),
        }


def _usable(candidates):
    usable = [c for c in candidates if c.usable]
    if not usable:
        raise NoCandidates("no usable explanation to deliberate on.")
    return usable


def _ask(session, role, prompt, expected, check=None):
    """Ask an agent until its reply parses, at most `reply_attempts` times. Returns None when every attempt failed."""
    current = prompt
    for attempt in range(1, session.reply_attempts + 1):
        try:
            reply = parse_agent_reply(session.complete(role, current).output, expected)
            if check:
                check(reply)
            return reply
        except (MalformedReply, BackendError) as e:
            reason = e.reason if isinstance(e, MalformedReply) else str(e)
            log.warning(f"{expected.capitalize()} reply {attempt}/{session.reply_attempts} unusable: {reason}")
            current = prompt.with_note(RETRY_NOTE.format(reason=reason))
    return None


def rank_step(
    fn: FunctionRecord,
    label: Label,
    candidates: Sequence,
    session,
    feedback: Optional[CriticFeedback] = None,
    history: Sequence[RankerDecision] = (),
    force_merge=False,
    merge_ids: Sequence[int] = (),
) -> RankerDecision:
    """Let the Ranker select or merge the best explanation.

    Malformed replies are retried; when every attempt fails the first usable candidate is chosen
    at confidence 0 and the decision is flagged as a fallback.

    Raises:
        NoCandidates: no usable explanation among candidates.
    """
    usable = _usable(candidates)
    live = {c.id for c in usable}
    prompt = session.prompts.render_ranker(fn, label, usable, feedback, history, force_merge, merge_ids)

    def check(decision):
        unknown = [i for i in decision.chosen if i not in live]
        if unknown:
            raise MalformedReply(f"reasons {unknown} do not exist")
        if force_merge and decision.action != "merge":
            raise MalformedReply("a merge was requested")
        if merge_ids and sorted(set(decision.chosen)) != sorted(set(merge_ids)):
            raise MalformedReply(f"the merge must cover reasons {list(merge_ids)}")

    decision = _ask(session, "agents", prompt, "ranker", check)
    if decision is None:
        first = 1 if 1 in live else min(live)
        log.warning(f'Ranker gave no usable reply for "{fn.id}", falling back to reason {first}.')
        decision = RankerDecision("rank", [first], 0, "fallback: no usable ranker reply", fallback=True)
    return decision


def critic_step(decision: RankerDecision, fn: FunctionRecord, label: Label, candidates: Sequence, session) -> CriticFeedback:
    """Let the Critic judge a ranker decision. Without a usable reply it agrees, flagged as a fallback."""
    prompt = session.prompts.render_critic(fn, label, decision, candidates)
    feedback = _ask(session, "agents", prompt, "critic")
    if feedback is None:
        log.warning(f'Critic gave no usable reply for "{fn.id}", agreeing by default.')
        feedback = CriticFeedback(AGREE, "fallback: no usable critic reply", fallback=True)
    return feedback


def _final(verdict, decision: RankerDecision, rounds: List[Round], candidates, cap_hit) -> FinalFinding:
    by_id = {c.id: c for c in candidates}
    if decision.action == "merge" and decision.merged_text:
        reason = decision.merged_text
    else:
        reason = by_id[decision.chosen[0]].text
    provenance = {
        "ids": list(decision.chosen),
        "with_context": [by_id[i].with_context for i in decision.chosen],
        "variants": [by_id[i].variant for i in decision.chosen],
        "actions": [
            {"round": k, "ranker": r.decision.action, "chosen": r.decision.chosen, "critic": r.feedback.action}
            for k, r in enumerate(rounds, 1)
        ],
        "ranker_confidence": decision.confidence,
        "round": len(rounds),
        "cap_hit": cap_hit,
        "fallback": decision.fallback or any(r.feedback.fallback for r in rounds),
    }
    return FinalFinding(verdict.winner, verdict.confidence, reason, provenance)


def deliberate(fn: FunctionRecord, verdict, explanations: Sequence, session) -> Deliberation:
    """Alternate Ranker and Critic until the Critic agrees or the iteration cap is reached.

    A rerank passes the critique and all previous decisions to the next ranker step, a merge
    forces the next ranker step to merge (over the ids the Critic named, if any).
    On the cap the latest decision is final.
    """
    usable = _usable(explanations)
    live = {c.id for c in usable}
    label = verdict.winner
    rounds: List[Round] = []
    feedback = None
    while True:
        force_merge = bool(feedback and feedback.action == "merge" and len(live) >= 2)
        merge_ids = [i for i in feedback.ids if i in live] if force_merge else []
        if len(set(merge_ids)) < 2:
            merge_ids = []
        decision = rank_step(
            fn, label, usable, session, feedback, [r.decision for r in rounds], force_merge, merge_ids
        )
        feedback = critic_step(decision, fn, label, usable, session)
        rounds.append(Round(decision, feedback))
        log.info(
            f'Round {len(rounds)} for "{fn.id}": ranker {decision.action} {decision.chosen} '
            f"at {decision.confidence}/10, critic {feedback.action}."
        )
        if feedback.action == AGREE:
            terminated_by = AGREE
            break
        if len(rounds) >= session.max_iterations:
            terminated_by = ITERATION_CAP
            break
    final = _final(verdict, decision, rounds, usable, terminated_by == ITERATION_CAP)
    return Deliberation(rounds, final, terminated_by)
