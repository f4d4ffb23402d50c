import random
import re
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Tuple

from . import utils
from .app import AuditError, logger
from .backend import BackendError
from .prompts import Label, parse_numbers, parse_yes_no
from .solidity import CallContext, FunctionRecord, normalize_code

log = logger.getChild("dataset")

AUDIT_REPORT = "audit_report"
DERIVED_NEGATIVE = "derived_negative"
SPLITS = ("train", "val", "test")
RATIOS = (0.64, 0.16)

CANONICAL = {"positives": 1734, "negatives": 1810, "train": 2268, "val": 567, "test": 709}

LINK_TOKEN = "[link]"
_URL = re.compile(r"(?:\b[A-Za-z][A-Za-z0-9+.-]*://|\bwww\.)[^\s<>\"'`]*[^\s<>\"'`.,;:!?)\]]")
_SECTIONS = {
    "explanation": re.compile(r"^\W*explanation\b", re.I | re.M),
    "proof_of_concept": re.compile(r"^\W*(proof of concept|poc)\b", re.I | re.M),
    "recommendation": re.compile(r"^\W*(recommendations?|recommended fix)\b", re.I | re.M),
}


class TooFew(AuditError):
    pass


class ManifestError(AuditError):
    pass


@dataclass
class DatasetEntry:
    id: str
    code: str
    label: Label
    reason: str = ""
    provenance: str = AUDIT_REPORT
    source_ref: str = ""
    split: str = "unassigned"
    context: Optional[CallContext] = None
    flags: List[str] = field(default_factory=list)

    def __post_init__(self):
        self.label = Label(self.label)
        if self.label == Label.VULNERABLE and not self.reason.strip():
            raise ValueError(f'vulnerable entry "{self.id}" needs a reason.')

    def to_dict(self):
        return {
            "id": self.id,
            "code": self.code,
            "label": self.label.value,
            "reason": self.reason,
            "provenance": self.provenance,
            "source_ref": self.source_ref,
            "split": self.split,
            "context": self.context.to_dict() if self.context else None,
            "flags": list(self.flags),
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if d.get("context"):
            d["context"] = CallContext.from_dict(d["context"])
        return cls(**d)


@dataclass
class KnowledgeItem:
    functionality_description: str
    negligence: str
    group_id: str = ""
    group_functionality: str = ""

    def to_dict(self):
        return {
            "functionality_description": self.functionality_description,
            "negligence": self.negligence,
            "group_id": self.group_id,
            "group_functionality": self.group_functionality,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            functionality_description=d["functionality_description"],
            negligence=d["negligence"],
            group_id=str(d.get("group_id") or ""),
            group_functionality=d.get("group_functionality") or "",
        )


def strip_links(text: str) -> str:
    """Replace scheme-prefixed and bare www. URLs with a fixed token."""
    return _URL.sub(LINK_TOKEN, text or "")


def clean_code(code: str) -> str:
    return normalize_code(strip_links(code))


def ingest_reports(records: Iterable[dict]) -> Tuple[List[DatasetEntry], Counter]:
    """Turn exported audit-report records into positive entries.

    Records need `code` and `reason`; `source_ref` (or `report`) and `context` are optional.
    Records lacking code or reason are skipped, hash-equal code bodies keep their first record.

    Returns:
        (entries, tally of skipped records by cause)
    """
    entries, seen, skipped = [], set(), Counter()
    for n, r in enumerate(records, 1):
        code, reason = r.get("code") or "", r.get("reason") or ""
        if not code.strip():
            skipped["missing_code"] += 1
            log.debug(f"Skipped record {n}: no code.")
            continue
        if not reason.strip():
            skipped["missing_reason"] += 1
            log.debug(f"Skipped record {n}: no reason.")
            continue
        code = clean_code(code)
        digest = utils.sha256_hex(code)
        if digest in seen:
            skipped["duplicate"] += 1
            continue
        seen.add(digest)
        entries.append(
            DatasetEntry(
                id=f"pos-{digest[:12]}",
                code=code,
                label=Label.VULNERABLE,
                reason=strip_links(reason).strip(),
                provenance=AUDIT_REPORT,
                source_ref=str(r.get("source_ref") or r.get("report") or ""),
                context=CallContext.from_dict(r["context"]) if r.get("context") else None,
            )
        )
    log.info(f"Ingested {len(entries)} positives, skipped {sum(skipped.values())} records.")
    return entries, skipped


def group_knowledge(raw: Iterable[dict], session=None) -> List[KnowledgeItem]:
    """Load knowledge items, filling missing group ids and summaries with the judge.

    Items without a group id are grouped by a judge-assigned category. Groups without a
    functionality summary get a judge summary of their descriptions.
    """
    items = [KnowledgeItem.from_dict(r) for r in raw]
    ungrouped = [k for k in items if not k.group_id]
    if ungrouped:
        _need_judge(session, "group knowledge items")
        prompts = [session.prompts.render("categorize", functionality=k.functionality_description) for k in ungrouped]
        for k, r in zip(ungrouped, session.complete_many("judge", prompts)):
            if isinstance(r, BackendError):
                raise r
            k.group_id = re.sub(r"\s+", " ", r.output.strip().strip(".\"'")).lower() or "uncategorized"
    groups: Dict[str, List[KnowledgeItem]] = defaultdict(list)
    for k in items:
        groups[k.group_id].append(k)
    summaries = {g: next((k.group_functionality for k in ks if k.group_functionality), "") for g, ks in groups.items()}
    missing = sorted(g for g, s in summaries.items() if not s)
    if missing:
        _need_judge(session, "summarize knowledge groups")
        prompts = [
            session.prompts.render("summarize_group", descriptions=[k.functionality_description for k in groups[g]])
            for g in missing
        ]
        for g, r in zip(missing, session.complete_many("judge", prompts)):
            if isinstance(r, BackendError):
                raise r
            summaries[g] = r.output.strip()
    for k in items:
        k.group_functionality = summaries[k.group_id]
    log.info(f"Grouped {len(items)} knowledge items into {len(groups)} groups.")
    return items


def _need_judge(session, what):
    if session is None:
        raise ValueError(f"a judge session is needed to {what}.")


def _candidate_code(c) -> Tuple[str, str, Optional[CallContext]]:
    if isinstance(c, FunctionRecord):
        return c.id, c.source, None
    ctx = c.get("context")
    return str(c["id"]), c["code"], CallContext.from_dict(ctx) if ctx else None


def derive_negatives(candidates, knowledge: List[KnowledgeItem], session, positives=()) -> Tuple[List[DatasetEntry], Counter]:
    """Keep candidates that match no known vulnerability as negatives.

    Each candidate is matched hierarchically by the judge: against the group summaries, then the
    functionality of the items of matched groups, then the negligence of matched items. Only a
    match through all three stages excludes a candidate. Candidates whose judge calls fail are dropped,
    hash-equal candidates keep the first one.

    Args:
        candidates (list): FunctionRecords or dicts with `id` and `code`.
        knowledge (list of KnowledgeItem): grouped knowledge.
        positives (list of DatasetEntry, optional): candidates with equal code are dropped.

    Returns:
        (negatives, tally with matched, negative, judge_failed, known_positive and duplicate counts)
    """
    groups: Dict[str, List[KnowledgeItem]] = defaultdict(list)
    for k in knowledge:
        if not k.group_id:
            raise ValueError("knowledge must be grouped before matching.")
        groups[k.group_id].append(k)
    group_ids = sorted(groups)
    summaries = [groups[g][0].group_functionality or g for g in group_ids]
    known = {utils.sha256_hex(p.code) for p in positives}
    tally = Counter()

    pending, seen = [], set()
    for c in candidates:
        cid, code, ctx = _candidate_code(c)
        code = clean_code(code)
        digest = utils.sha256_hex(code)
        if digest in known:
            tally["known_positive"] += 1
            continue
        if digest in seen:
            tally["duplicate"] += 1
            log.debug(f'Skipped candidate "{cid}": same code as an earlier candidate.')
            continue
        seen.add(digest)
        pending.append((cid, code, ctx))

    def ask(prompts):
        return session.complete_many("judge", prompts) if prompts else []

    failed, matched = set(), set()
    # stage 1: group summaries
    stage1 = {}
    prompts = [session.prompts.render("match_group", code=code, groups=summaries) for _, code, _ in pending]
    for (cid, code, _), r in zip(pending, ask(prompts)):
        if isinstance(r, BackendError):
            failed.add(cid)
        else:
            stage1[cid] = [group_ids[i - 1] for i in parse_numbers(r.output, len(group_ids))]
    # stage 2: functionality of the items in matched groups
    jobs = [(cid, code, [k for g in stage1[cid] for k in groups[g]]) for cid, code, _ in pending if stage1.get(cid)]
    prompts = [
        session.prompts.render("match_functionality", code=code, descriptions=[k.functionality_description for k in items])
        for _, code, items in jobs
    ]
    stage2 = {}
    for (cid, code, items), r in zip(jobs, ask(prompts)):
        if isinstance(r, BackendError):
            failed.add(cid)
        else:
            stage2[cid] = [items[i - 1] for i in parse_numbers(r.output, len(items))]
    # stage 3: negligence of every matched item
    jobs = [(cid, code, k) for cid, code, _ in pending for k in stage2.get(cid, [])]
    prompts = [session.prompts.render("match_negligence", code=code, negligence=k.negligence) for _, code, k in jobs]
    for (cid, _, _), r in zip(jobs, ask(prompts)):
        if isinstance(r, BackendError):
            failed.add(cid)
        elif parse_yes_no(r.output):
            matched.add(cid)

    negatives = []
    for cid, code, ctx in pending:
        if cid in failed:
            tally["judge_failed"] += 1
            log.warning(f'Dropped candidate "{cid}": judge call failed.')
        elif cid in matched:
            tally["matched"] += 1
        else:
            tally["negative"] += 1
            negatives.append(
                DatasetEntry(
                    id=f"neg-{utils.sha256_hex(code)[:12]}",
                    code=code,
                    label=Label.SAFE,
                    provenance=DERIVED_NEGATIVE,
                    source_ref=cid,
                    context=ctx,
                )
            )
    log.info(f"Derived {len(negatives)} negatives from {len(pending)} candidates ({dict(tally)}).")
    return negatives, tally


def missing_sections(text: str) -> List[str]:
    return [name for name, pattern in _SECTIONS.items() if not pattern.search(text or "")]


def enhance_explanation(entry: DatasetEntry, session) -> DatasetEntry:
    return enhance_entries([entry], session)[0]


def enhance_entries(entries: List[DatasetEntry], session) -> List[DatasetEntry]:
    """Expand the reasons of positives into explanation, proof of concept and recommendation.

    Replies missing a section, and failed calls, keep the original reason and flag the entry.
    """
    positives = [e for e in entries if e.label == Label.VULNERABLE]
    if not positives:
        return entries
    prompts = [session.prompts.render("enhance", reason=e.reason, code=e.code) for e in positives]
    for e, r in zip(positives, session.complete_many("judge", prompts)):
        if isinstance(r, BackendError):
            log.warning(f'Enhancement of "{e.id}" failed: {r}')
            e.flags.append("enhancement_failed")
            continue
        missing = missing_sections(r.output)
        if missing:
            log.warning(f'Enhancement of "{e.id}" rejected, missing {", ".join(missing)}.')
            e.flags.append("enhancement_rejected")
            continue
        e.reason = strip_links(r.output).strip()
        e.flags.append("enhanced")
    return entries


def split_sizes(n: int) -> Tuple[int, int, int]:
    train, val = round(n * RATIOS[0]), round(n * RATIOS[1])
    return train, val, n - train - val


def split(entries: List[DatasetEntry], seed=42) -> Dict[str, List[str]]:
    """Assign entries to train/val/test, label-stratified and deterministic for a seed.

    Each label is shuffled on its own, then labels are interleaved by relative position so
    every split keeps the overall label balance.

    Raises:
        TooFew: if any split would be empty.
    """
    sizes = split_sizes(len(entries))
    if min(sizes) < 1:
        raise TooFew(f"{len(entries)} entries are too few for a train/val/test split {sizes}.")
    rng = random.Random(seed)
    by_label = defaultdict(list)
    for e in sorted(entries, key=lambda e: e.id):
        by_label[e.label.value].append(e)
    ordered = []
    for rank, label in enumerate(sorted(by_label)):
        group = by_label[label]
        rng.shuffle(group)
        ordered += [((i + 0.5) / len(group), rank, e) for i, e in enumerate(group)]
    ordered.sort(key=lambda t: t[:2])
    ids, start = {}, 0
    for name, size in zip(SPLITS, sizes):
        chunk = [e for _, _, e in ordered[start : start + size]]
        for e in chunk:
            e.split = name
        ids[name] = [e.id for e in chunk]
        start += size
    log.info(f"Split {len(entries)} entries into {sizes} with seed {seed}.")
    return ids


def build_manifest(entries: List[DatasetEntry], seed=42, canonical=False) -> dict:
    ids = split(entries, seed)
    labels = Counter(e.label.value for e in entries)
    manifest = {
        "seed": seed,
        "canonical": canonical,
        "positives": labels[Label.VULNERABLE.value],
        "negatives": labels[Label.SAFE.value],
        "counts": {name: len(ids[name]) for name in SPLITS},
        "ids": ids,
    }
    verify_manifest(manifest, entries)
    return manifest


def verify_manifest(manifest: dict, entries: Optional[List[DatasetEntry]] = None):
    """Check that a manifest is a partition of the dataset with consistent bookkeeping.

    Raises:
        ManifestError: on any inconsistency.
    """
    try:
        ids = {name: list(manifest["ids"][name]) for name in SPLITS}
        counts = {name: int(manifest["counts"][name]) for name in SPLITS}
        positives, negatives = int(manifest["positives"]), int(manifest["negatives"])
    except (KeyError, TypeError, ValueError) as e:
        raise ManifestError(f"incomplete manifest: {e}") from None
    for name in SPLITS:
        if len(ids[name]) != counts[name]:
            raise ManifestError(f'split "{name}" lists {len(ids[name])} ids but counts {counts[name]}.')
    all_ids = [i for name in SPLITS for i in ids[name]]
    if len(set(all_ids)) != len(all_ids):
        raise ManifestError("an entry appears in more than one split.")
    total = sum(counts.values())
    if total != positives + negatives:
        raise ManifestError(f"split sizes sum to {total}, but there are {positives} + {negatives} entries.")
    if manifest.get("canonical"):
        for key, expected in CANONICAL.items():
            actual = counts[key] if key in counts else {"positives": positives, "negatives": negatives}[key]
            if actual != expected:
                raise ManifestError(f'canonical corpus needs {expected} {key}, got {actual}.')
    if entries is not None:
        known = {e.id for e in entries}
        if set(all_ids) != known:
            missing, extra = known - set(all_ids), set(all_ids) - known
            raise ManifestError(f"manifest does not match dataset: {len(missing)} unassigned, {len(extra)} unknown ids.")
        labels = Counter(e.label.value for e in entries)
        if (labels[Label.VULNERABLE.value], labels[Label.SAFE.value]) != (positives, negatives):
            raise ManifestError("manifest label counts differ from the dataset.")
    return True


def read_entries(path) -> List[DatasetEntry]:
    return [DatasetEntry.from_dict(d) for d in utils.read_jsonl(path)]


def write_entries(entries: Iterable[DatasetEntry], path) -> int:
    return utils.write_jsonl((e.to_dict() for e in entries), Path(path))
