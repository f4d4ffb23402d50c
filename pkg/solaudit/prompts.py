import json
import re
from dataclasses import asdict, dataclass, replace
from enum import Enum
from functools import lru_cache
from pathlib import Path
from typing import List, Optional, Sequence

import yaml
from jinja2 import DictLoader, Environment, StrictUndefined, TemplateError as JinjaError

from . import utils
from .app import AuditError, logger

log = logger.getChild("prompts")

PACKAGED_TEMPLATES = Path(__file__).parent / "templates" / "prompts.yaml"
N_CONSTRAINTS = 10


class ContextMismatch(AuditError):
    pass


class TemplateError(AuditError):
    pass


class MalformedReply(AuditError):
    def __init__(self, reason):
        self.reason = reason
        super().__init__(f"malformed agent reply: {reason}")


class Label(str, Enum):
    SAFE = "safe"
    VULNERABLE = "vulnerable"

    def __str__(self):
        return self.value


@dataclass(frozen=True)
class PromptVariant:
    role: str
    index: int
    task_description: str
    task_instruction: str
    input_description: str
    with_context: bool = False
    caller_description: Optional[str] = None
    callee_description: Optional[str] = None
    response_preamble: Optional[str] = None


@dataclass(frozen=True)
class RenderedPrompt:
    text: str
    role: str
    variant: Optional[PromptVariant] = None
    code_hash: str = ""
    label_hint: Optional[Label] = None

    @property
    def hash(self):
        return utils.sha256_hex(self.text)

    def with_note(self, note):
        """The same prompt with a note appended, used when re-asking after a malformed reply."""
        return replace(self, text=f"{self.text}\n\n{note}")


def parse_label(text: str, precedence=Label.VULNERABLE) -> Optional[Label]:
    """Extract a label from model output by keyword matching.

    When both keywords appear the precedence label wins, so "not safe" still counts as vulnerable.

    Returns:
        Label or None when the output abstains.
    """
    text = (text or "").lower()
    found = [l for l in Label if l.value in text]
    if not found:
        return None
    if len(found) == 1:
        return found[0]
    return Label(precedence)


def parse_yes_no(text: str) -> Optional[bool]:
    """First "yes" or "no" word of a judge reply, None if there is neither."""
    m = re.search(r"\b(yes|no)\b", (text or "").lower())
    return m.group(1) == "yes" if m else None


def parse_numbers(text: str, upper: int) -> List[int]:
    """Item numbers 1..upper listed in a judge reply; "none" or no number gives an empty list."""
    seen = []
    for n in map(int, re.findall(r"\d+", text or "")):
        if 1 <= n <= upper and n not in seen:
            seen.append(n)
    return seen


class PromptKit:
    """Prompt set loaded from one versioned YAML document.

    The document holds the detector and reasoner variants, the ranker constraints and
    the jinja2 skeletons of every prompt the pipeline sends.
    """

    def __init__(self, doc: dict, source="<packaged>"):
        self.source = str(source)
        try:
            self.version = str(doc["version"])
            self.cot_tip = doc["cot_tip"]
            self.constraints = list(doc["constraints"])
            templates = dict(doc["templates"])
            self.detector_variants = [
                PromptVariant(role="detector", index=i, **v) for i, v in enumerate(doc["detector"], 1)
            ]
            self.reasoner_variants = [
                PromptVariant(role="reasoner", index=i, **v) for i, v in enumerate(doc["reasoner"], 1)
            ]
            self.detector_context = dict(doc.get("detector_context") or {})
        except (KeyError, TypeError) as e:
            raise TemplateError(f'invalid prompt document "{self.source}": {e}') from None
        self._check()
        self.env = Environment(
            loader=DictLoader(templates),
            autoescape=False,
            trim_blocks=True,
            lstrip_blocks=True,
            undefined=StrictUndefined,
        )

    def _check(self):
        if len(self.constraints) != N_CONSTRAINTS:
            raise TemplateError(f"expected {N_CONSTRAINTS} ranker constraints, got {len(self.constraints)}.")
        for variants in (self.detector_variants, self.reasoner_variants):
            if not variants:
                raise TemplateError(f'no variants in "{self.source}".')
            wording = {(v.task_description, v.task_instruction, v.input_description) for v in variants}
            if len(wording) != len(variants):
                raise TemplateError(f'{variants[0].role} variants in "{self.source}" are not distinct.')
        for v in self.reasoner_variants:
            if not v.response_preamble:
                raise TemplateError(f"reasoner variant {v.index} has no response preamble.")

    @classmethod
    def load(cls, path=None):
        path = Path(path) if path else PACKAGED_TEMPLATES
        log.debug(f'Loading prompt templates from "{path}".')
        try:
            with open(path, encoding="utf-8") as f:
                doc = yaml.safe_load(f)
        except (OSError, yaml.YAMLError) as e:
            raise TemplateError(f'can not load prompt templates "{path}": {e}') from None
        return cls(doc, source=path)

    def _render(self, name, **kw) -> str:
        try:
            return self.env.get_template(name).render(constraints=self.constraints, **kw).strip() + "\n"
        except JinjaError as e:
            raise TemplateError(f'can not render template "{name}": {e}') from None

    def _variant(self, variants: List[PromptVariant], index: int) -> PromptVariant:
        if not 1 <= index <= len(variants):
            raise ValueError(f"variant index {index} out of range 1..{len(variants)}.")
        return variants[index - 1]

    @staticmethod
    def _check_ctx(fn, ctx):
        if ctx is not None and ctx.function_id != fn.id:
            raise ContextMismatch(f'context of "{ctx.function_id}" does not belong to "{fn.id}".')

    def render(self, name, role=None, **kw) -> RenderedPrompt:
        """Render any named template of the document, e.g. the dataset and judge prompts."""
        code = kw.get("code")
        return RenderedPrompt(
            text=self._render(name, **kw), role=role or name, code_hash=utils.sha256_hex(code) if code else ""
        )

    def render_detector(self, fn, variant: int, ctx=None) -> RenderedPrompt:
        self._check_ctx(fn, ctx)
        v = self._variant(self.detector_variants, variant)
        text = self._render("detector", v=v, code=fn.source, ctx=ctx, **self._context_vars(ctx, self.detector_context))
        return RenderedPrompt(text, "detector", replace(v, with_context=ctx is not None), utils.sha256_hex(fn.source))

    def render_reasoner(self, fn, label: Label, ctx, variant: int) -> RenderedPrompt:
        self._check_ctx(fn, ctx)
        label = Label(label)
        v = self._variant(self.reasoner_variants, variant)
        sub = self.env.from_string
        text = self._render(
            "reasoner",
            v=v,
            task_instruction=sub(v.task_instruction).render(label=label.value),
            preamble=sub(v.response_preamble).render(label=label.value),
            cot_tip=self.cot_tip,
            code=fn.source,
            ctx=ctx,
            **self._context_vars(ctx, asdict(v)),
        )
        return RenderedPrompt(
            text, "reasoner", replace(v, with_context=ctx is not None), utils.sha256_hex(fn.source), label
        )

    @staticmethod
    def _context_vars(ctx, descriptions):
        if ctx is None:
            return {}
        return dict(
            callers=ctx.callers,
            callees=ctx.callees,
            caller_description=descriptions.get("caller_description") or "",
            callee_description=descriptions.get("callee_description") or "",
        )

    def render_ranker(
        self, fn, label: Label, candidates: Sequence, feedback=None, history: Sequence = (), force_merge=False,
        merge_ids: Sequence[int] = (),
    ) -> RenderedPrompt:
        """Render the Ranker prompt.

        Args:
            candidates (list of Explanation): usable explanations, numbered by their ids.
            feedback (CriticFeedback, optional): the critique of the previous round.
            history (list of RankerDecision): all previous decisions of this deliberation.
            force_merge (bool): the Critic asked for a merge.
            merge_ids (list of int): ids the Critic asked to merge.
        """
        if not candidates:
            raise ValueError("the ranker needs at least one candidate.")
        text = self._render(
            "ranker",
            code=fn.source,
            label=Label(label).value,
            candidates=candidates,
            feedback=feedback,
            history=history,
            force_merge=force_merge,
            merge_ids=list(merge_ids),
        )
        return RenderedPrompt(text, "ranker", code_hash=utils.sha256_hex(fn.source), label_hint=Label(label))

    def render_critic(self, fn, label: Label, decision, candidates: Sequence = ()) -> RenderedPrompt:
        if not decision.chosen:
            raise ValueError("the critic needs a decision with at least one chosen reason.")
        if decision.action == "merge" and decision.merged_text:
            selected = f"Merged reason:\n{decision.merged_text}"
        else:
            by_id = {c.id: c.text for c in candidates}
            selected = "\n\n".join(f"Reason {i}:\n{by_id.get(i, '')}" for i in decision.chosen)
        text = self._render("critic", code=fn.source, label=Label(label).value, decision=decision, selected=selected)
        return RenderedPrompt(text, "critic", code_hash=utils.sha256_hex(fn.source), label_hint=Label(label))


@lru_cache(maxsize=None)
def _cached_kit(path):
    return PromptKit.load(path)


def load_kit(path=None) -> PromptKit:
    """Load (and cache) the prompt kit of a template file, or the packaged one."""
    return _cached_kit(str(Path(path).resolve()) if path else None)


_FENCE = re.compile(r"```[^\n]*\n(.*?)```", re.S)
_KEY_VALUE = re.compile(r"^\s*[-*]?\s*\**\s*([A-Za-z_ ]+?)\s*\**\s*[:=]\s*(.*)$")
_CONFIDENCE = re.compile(r"^\s*(\d+)\s*(?:/\s*10)?\s*$")

_ALIASES = {
    "chosen": ("chosen", "choice", "choices", "selected", "reasons", "ids"),
    "justification": ("justification", "explanation", "rationale"),
    "merged_text": ("merged_text", "merged", "merged_reason"),
    "critique": ("critique", "feedback", "comment"),
}
_ACTIONS = {"ranker": ("rank", "merge"), "critic": ("agree", "rerank", "merge")}
_KNOWN_KEYS = {"action", "confidence"} | {k for v in _ALIASES.values() for k in v}


def _key_values(block: str) -> dict:
    """Loose `key: value` lines, continuation lines appended to the previous key."""
    data, key = {}, None
    for line in block.splitlines():
        m = _KEY_VALUE.match(line)
        if m and m.group(1).strip().lower().replace(" ", "_") in _KNOWN_KEYS:
            key = m.group(1).strip().lower().replace(" ", "_")
            data[key] = m.group(2).strip()
        elif key and line.strip():
            data[key] += "\n" + line.strip()
    return data


def _load_block(block: str) -> Optional[dict]:
    for loader in (json.loads, yaml.safe_load):
        try:
            data = loader(block)
        except (ValueError, yaml.YAMLError):
            continue
        if isinstance(data, dict):
            return {str(k).strip().lower().replace(" ", "_"): v for k, v in data.items()}
    data = _key_values(block)
    return data or None


def _get(data, field):
    for key in _ALIASES.get(field, (field,)):
        if data.get(key) not in (None, ""):
            return data[key]
    return None


def _ids(value) -> List[int]:
    if value is None:
        return []
    if isinstance(value, bool):
        raise MalformedReply(f"invalid reason ids {value!r}")
    if isinstance(value, int):
        return [value]
    if isinstance(value, (list, tuple)):
        return [i for v in value for i in _ids(v)]
    return [int(i) for i in re.findall(r"\d+", str(value))]


def _confidence(value) -> int:
    if isinstance(value, bool) or value is None:
        raise MalformedReply("missing confidence")
    if isinstance(value, int):
        c = value
    elif isinstance(value, float) and value.is_integer():
        c = int(value)
    else:
        m = _CONFIDENCE.match(str(value))
        if not m:
            raise MalformedReply(f"confidence {value!r} is not an integer out of 10")
        c = int(m.group(1))
    if not 0 <= c <= 10:
        raise MalformedReply(f"confidence {c} out of range 0..10")
    return c


def _action(data, expected):
    action = str(_get(data, "action") or "").strip().strip("\"'").lower()
    if not action:
        raise MalformedReply("missing action")
    if action not in _ACTIONS[expected]:
        raise MalformedReply(f'unknown {expected} action "{action}"')
    return action


def _ranker_decision(data):
    from .role.deliberation import RankerDecision

    action = _action(data, "ranker")
    chosen = _ids(_get(data, "chosen"))
    if not chosen:
        raise MalformedReply("missing chosen reasons")
    confidence = _confidence(_get(data, "confidence"))
    justification = _get(data, "justification")
    if not justification:
        raise MalformedReply("missing justification")
    merged_text = _get(data, "merged_text")
    if action == "rank" and len(chosen) != 1:
        raise MalformedReply(f"rank must choose exactly one reason, got {chosen}")
    if action == "merge":
        if len(set(chosen)) < 2:
            raise MalformedReply(f"merge must choose at least two reasons, got {chosen}")
        if not merged_text:
            raise MalformedReply("merge without merged_text")
    return RankerDecision(
        action, chosen, confidence, str(justification).strip(), str(merged_text).strip() if merged_text else None
    )


def _critic_feedback(data):
    from .role.deliberation import CriticFeedback

    action = _action(data, "critic")
    # a bare "action: agree" is accepted, the critique then stays empty
    critique = _get(data, "critique") or ""
    if action != "agree" and not critique:
        raise MalformedReply(f"{action} without critique")
    return CriticFeedback(action, str(critique).strip(), _ids(data.get("ids")))


def parse_agent_reply(text: str, expected: str):
    """Parse a Ranker or Critic reply.

    Fenced blocks are tried first, then the whole reply as JSON, YAML or loose `key: value` lines.
    The first block carrying every required field wins.

    Args:
        expected (str): "ranker" or "critic".

    Raises:
        MalformedReply: when no block carries the required fields.
    """
    if expected not in _ACTIONS:
        raise ValueError(f'unknown agent "{expected}".')
    build = _ranker_decision if expected == "ranker" else _critic_feedback
    reason = "no structured block found"
    for block in [*_FENCE.findall(text or ""), text or ""]:
        data = _load_block(block)
        if not data:
            continue
        try:
            return build(data)
        except MalformedReply as e:
            reason = e.reason
    raise MalformedReply(reason)
