from dataclasses import asdict, dataclass
from typing import List, Optional

from ..app import AuditError, logger
from ..backend import BackendError
from ..prompts import Label
from ..solidity import CallContext, FunctionRecord

log = logger.getChild("reasoner")


class AllPathsFailed(AuditError):
    pass


@dataclass
class Explanation:
    id: int
    text: str
    variant: int
    with_context: bool
    label_hint: Label
    usable: bool = True
    prompt_hash: str = ""

    def to_dict(self):
        d = asdict(self)
        d["label_hint"] = self.label_hint.value
        return d


def _placeholder(reason):
    return f"[unavailable: {reason}]"


def explain(fn: FunctionRecord, verdict, ctx: Optional[CallContext], session) -> List[Explanation]:
    """Generate the candidate explanations of a verdict, every reasoner variant with and without context.

    Explanations are ordered with-context first, then by variant, and numbered from 1 in that order.
    Failed or empty completions become placeholders with `usable=False`.

    Raises:
        AllPathsFailed: when no completion is usable.
    """
    if verdict.function_id and verdict.function_id != fn.id:
        raise ValueError(f'verdict of "{verdict.function_id}" does not belong to "{fn.id}".')
    kit = session.prompts
    ctx = ctx if ctx is not None else CallContext(fn.id)
    variants = range(1, len(kit.reasoner_variants) + 1)
    prompts = [kit.render_reasoner(fn, verdict.winner, ctx, i) for i in variants]
    prompts += [kit.render_reasoner(fn, verdict.winner, None, i) for i in variants]
    results = session.complete_many("reasoner", prompts)
    explanations = []
    for i, (p, r) in enumerate(zip(prompts, results), 1):
        meta = dict(id=i, variant=p.variant.index, with_context=p.variant.with_context, label_hint=verdict.winner)
        if isinstance(r, BackendError):
            log.warning(f'Reasoner path {i} failed for "{fn.id}": {r}')
            explanations.append(Explanation(text=_placeholder(r), usable=False, prompt_hash=p.hash, **meta))
        elif not r.output.strip():
            log.warning(f'Reasoner path {i} returned nothing for "{fn.id}".')
            explanations.append(Explanation(text=_placeholder("empty reply"), usable=False, prompt_hash=p.hash, **meta))
        else:
            explanations.append(Explanation(text=r.output.strip(), prompt_hash=p.hash, **meta))
    if not any(e.usable for e in explanations):
        raise AllPathsFailed(f'all {len(explanations)} reasoner paths failed for "{fn.id}".')
    log.debug(f'Reasoner produced {sum(e.usable for e in explanations)} usable explanations for "{fn.id}".')
    return explanations
