from collections import Counter, namedtuple
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Sequence

from .app import AuditError, logger
from .backend import BackendError
from .prompts import Label, parse_yes_no

log = logger.getChild("evalkit")

DEFAULT_BINS = (0.6, 0.8, 1.0)


class EmptyMatrix(AuditError):
    pass


class JudgeUnavailable(AuditError):
    pass


class LengthMismatch(AuditError):
    pass


class IdMismatch(AuditError):
    pass


class MetricsReport(namedtuple("MetricsReport", ["f1", "recall", "precision", "accuracy"])):
    __slots__ = ()

    def rounded(self, digits=4) -> dict:
        """Metrics as written to artifacts."""
        return {k: round(v, digits) for k, v in self._asdict().items()}


@dataclass(frozen=True)
class ConfusionMatrix:
    """Counts with vulnerable as the positive class."""

    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise ValueError("confusion matrix counts must be non-negative.")

    @property
    def total(self):
        return self.tp + self.fp + self.fn + self.tn

    @classmethod
    def from_pairs(cls, pairs: Iterable):
        """Count (prediction, truth) label pairs."""
        c = Counter((Label(p) == Label.VULNERABLE, Label(t) == Label.VULNERABLE) for p, t in pairs)
        return cls(tp=c[True, True], fp=c[True, False], fn=c[False, True], tn=c[False, False])

    def to_dict(self):
        return {"tp": self.tp, "fp": self.fp, "fn": self.fn, "tn": self.tn}


def _ratio(a, b):
    return a / b if b else 0.0


def metrics(cm: ConfusionMatrix) -> MetricsReport:
    """F1, recall, precision and accuracy; a metric whose denominator is zero is 0.

    Raises:
        EmptyMatrix: if the matrix counts nothing.
    """
    if cm.total == 0:
        raise EmptyMatrix("can not compute metrics of an empty confusion matrix.")
    precision = _ratio(cm.tp, cm.tp + cm.fp)
    recall = _ratio(cm.tp, cm.tp + cm.fn)
    f1 = _ratio(2 * precision * recall, precision + recall) if precision and recall else 0.0
    return MetricsReport(f1=f1, recall=recall, precision=precision, accuracy=(cm.tp + cm.tn) / cm.total)


def judge_consistency(final, truth: str, session) -> bool:
    """Ask the judge whether a final finding names the same root cause as the ground-truth reason.

    Args:
        final: a FinalFinding, or its dict from audit_report.json.
        truth (str): the dataset reason.

    Raises:
        JudgeUnavailable: the judge failed or answered neither yes nor no.
    """
    reason = final.reason if hasattr(final, "reason") else final["reason"]
    return judge_many([(reason, truth)], session)[0]


def judge_many(pairs: Sequence, session) -> List[bool]:
    """Judge (reason, truth) pairs concurrently, in input order."""
    if not pairs:
        return []
    prompts = [session.prompts.render("judge", reason=r, truth=t) for r, t in pairs]
    verdicts = []
    for r in session.complete_many("judge", prompts):
        if isinstance(r, BackendError):
            raise JudgeUnavailable(f"judge failed: {r}")
        verdict = parse_yes_no(r.output)
        if verdict is None:
            raise JudgeUnavailable(f'judge answered neither yes nor no: "{r.output[:60]}"')
        verdicts.append(verdict)
    return verdicts


def consistency_rate(pairs: Sequence, session) -> float:
    verdicts = judge_many(pairs, session)
    return _ratio(sum(verdicts), len(verdicts))


def confidence_histogram(confidences: Sequence[float], correct: Sequence[bool], bins=DEFAULT_BINS) -> Dict[str, dict]:
    """Proportions of voting confidences among correct and among wrong predictions.

    Every non-empty group lists the default bins plus any other observed value; an empty group is {}.

    Raises:
        LengthMismatch: if the two lists are not aligned.
    """
    if len(confidences) != len(correct):
        raise LengthMismatch(f"{len(confidences)} confidences but {len(correct)} correctness flags.")
    groups = {"correct": [], "incorrect": []}
    for c, ok in zip(confidences, correct):
        groups["correct" if ok else "incorrect"].append(round(float(c), 4))
    hist = {}
    for name, values in groups.items():
        if not values:
            hist[name] = {}
            continue
        counts = Counter(values)
        keys = sorted(set(bins) | set(counts))
        hist[name] = {str(k): counts[k] / len(values) for k in keys}
    return hist


def _with_context(final) -> List[bool]:
    prov = final.reason_provenance if hasattr(final, "reason_provenance") else final["reason_provenance"]
    return list(prov.get("with_context", []))


def reason_source_distribution(finals: Iterable) -> dict:
    """Share of final reasons coming from prompts with call context.

    A merged reason counts fractionally by its constituent explanations.
    """
    weights = []
    for final in finals:
        flags = _with_context(final)
        if flags:
            weights.append(sum(flags) / len(flags))
    share = _ratio(sum(weights), len(weights))
    return {
        "with_context": share,
        "without_context": 1.0 - share if weights else 0.0,
        "count": len(weights),
    }


def _records(report: dict) -> Dict[str, dict]:
    return {r["function"]["id"]: r for r in report["functions"]}


def predicted_label(record: dict) -> Optional[Label]:
    if record.get("final"):
        return Label(record["final"]["label"])
    if record.get("verdict"):
        return Label(record["verdict"]["winner"])
    return None


def per_variant_metrics(report: dict, truth: Dict[str, Label]) -> Dict[str, dict]:
    """Score every detector inference path on its own. An abstaining path counts as a vulnerable prediction."""
    pairs = {}
    for fid, record in _records(report).items():
        if fid not in truth or not record.get("verdict"):
            continue
        for v in record["verdict"]["vote_set"]["votes"]:
            key = f'{"ctx" if v["with_context"] else "plain"}-{v["variant"]}'
            label = Label.VULNERABLE if v["label"] == "abstain" else Label(v["label"])
            pairs.setdefault(key, []).append((label, truth[fid]))
    return {k: metrics(ConfusionMatrix.from_pairs(p)).rounded() for k, p in sorted(pairs.items())}


def build_eval_report(report: dict, entries: list, split: Optional[str] = None, session=None) -> dict:
    """Score an audit report of dataset entries.

    Args:
        report (dict): audit report loaded from audit_report.json.
        entries (list of DatasetEntry): ground truth.
        split (str, optional): only score entries of this split.
        session (Session, optional): judge consistency of vulnerable findings when given.

    Raises:
        IdMismatch: if report and dataset ids do not join.
    """
    if split:
        entries = [e for e in entries if e.split == split]
    truth = {e.id: e.label for e in entries}
    records = _records(report)
    missing = sorted(set(truth) - set(records))
    if missing or not truth:
        raise IdMismatch(f"{len(missing)} of {len(truth)} dataset ids are not in the report, e.g. {missing[:3]}.")
    extra = sorted(set(records) - set(truth))
    if extra:
        log.warning(f"{len(extra)} report functions are not in the dataset and are ignored.")

    pairs, confidences, correct, errors = [], [], [], []
    for fid in sorted(truth):
        record = records[fid]
        label = predicted_label(record)
        if label is None:
            errors.append(fid)
            continue
        pairs.append((label, truth[fid]))
        confidences.append(record["verdict"]["confidence"])
        correct.append(label == truth[fid])
    cm = ConfusionMatrix.from_pairs(pairs)
    result = {
        "entries": len(truth),
        "errors": errors,
        "confusion_matrix": cm.to_dict(),
        "metrics": metrics(cm).rounded(),
        "per_variant": per_variant_metrics(report, truth),
        "confidence_histogram": {
            name: {k: round(v, 4) for k, v in h.items()}
            for name, h in confidence_histogram(confidences, correct).items()
        },
    }
    finals = [records[fid]["final"] for fid in sorted(truth) if records[fid].get("final")]
    dist = reason_source_distribution(finals)
    result["reason_source"] = {k: round(v, 4) if isinstance(v, float) else v for k, v in dist.items()}
    if session is not None:
        by_id = {e.id: e for e in entries}
        judged = [
            (fid, records[fid]["final"]["reason"], by_id[fid].reason)
            for fid in sorted(truth)
            if truth[fid] == Label.VULNERABLE and records[fid].get("final") and by_id[fid].reason
            and records[fid]["final"]["label"] == Label.VULNERABLE.value
        ]
        verdicts = judge_many([(r, t) for _, r, t in judged], session)
        result["consistency"] = {
            "judged": len(verdicts),
            "consistent": sum(verdicts),
            "rate": round(_ratio(sum(verdicts), len(verdicts)), 4),
        }
    result["run"] = report.get("run", {})
    return result
