import textwrap
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Optional

from . import solidity, utils
from .app import AuditError, logger
from .backend import ScriptedBackend
from .prompts import Label
from .role import deliberation, detector, reasoner
from .role.deliberation import Deliberation, FinalFinding
from .role.detector import Verdict
from .role.reasoner import Explanation
from .solidity import FunctionRecord

log = logger.getChild("pipeline")


class NoFunctionsFound(AuditError):
    pass


@dataclass
class FunctionAudit:
    function: FunctionRecord
    verdict: Optional[Verdict] = None
    explanations: List[Explanation] = field(default_factory=list)
    deliberation: Optional[Deliberation] = None
    error: Optional[str] = None

    @property
    def final(self) -> Optional[FinalFinding]:
        return self.deliberation.final if self.deliberation else None

    @property
    def label(self) -> Optional[Label]:
        if self.final:
            return self.final.label
        return self.verdict.winner if self.verdict else None

    def to_dict(self):
        fn = self.function
        return {
            "function": {
                "id": fn.id,
                "contract": fn.contract,
                "name": fn.name,
                "signature": fn.signature,
                "path": fn.path,
                "span": list(fn.span),
            },
            "verdict": self.verdict.to_dict() if self.verdict else None,
            "explanations": [e.to_dict() for e in self.explanations],
            "deliberation": self.deliberation.to_dict() if self.deliberation else None,
            "final": self.final.to_dict() if self.final else None,
            "error": self.error,
        }


@dataclass
class AuditReport:
    project: str
    functions: List[FunctionAudit]
    run: dict

    @property
    def failed(self):
        return [f for f in self.functions if f.error]

    def to_dict(self):
        return {"project": self.project, "run": self.run, "functions": [f.to_dict() for f in self.functions]}


def audit_function(fn: FunctionRecord, session, context: Optional[Callable] = None) -> FunctionAudit:
    """Run detector, reasoner and deliberation on one function, recording any error in the result.

    Args:
        context (callable, optional): returns the CallContext of a function.
    """
    result = FunctionAudit(fn)
    try:
        ctx = context(fn) if context else None
        result.verdict = detector.detect(fn, session, ctx)
        if result.verdict.winner == Label.SAFE and not session.explain_safe:
            return result
        result.explanations = reasoner.explain(fn, result.verdict, ctx, session)
        result.deliberation = deliberation.deliberate(fn, result.verdict, result.explanations, session)
    except AuditError as e:
        log.error(f'Audit of "{fn.id}" failed: {e}')
        result.error = f"{type(e).__name__}: {e}"
    return result


def _run(project, functions: List[FunctionRecord], context, session) -> AuditReport:
    started = session.clock()
    # scripted replies are queued, so scripted runs audit one function at a time
    workers = 1 if isinstance(session.backend, ScriptedBackend) else session.workers
    log.info(f'Auditing {len(functions)} functions of "{project}" with {workers} workers.')
    with ThreadPoolExecutor(max_workers=workers, thread_name_prefix="audit") as pool:
        results = list(pool.map(lambda fn: audit_function(fn, session, context), functions))
    run = {
        "config_hash": session.config_hash,
        "backend_ids": [session.backend.backend_id],
        "template_version": session.prompts.version,
        "started": started.isoformat(),
        "finished": session.clock().isoformat(),
    }
    report = AuditReport(str(project), results, run)
    log.info(f"Audited {len(results)} functions, {len(report.failed)} failed.")
    return report


def audit_project(path, session) -> AuditReport:
    """Extract every function of a Solidity file or dir and audit each of them.

    Raises:
        NoFunctionsFound: if nothing could be extracted.
    """
    functions = solidity.extract_project(path)
    if not functions:
        raise NoFunctionsFound(f'no functions found in "{path}".')
    graph = solidity.build_call_graph(functions)
    return _run(Path(path).name, functions, lambda fn: solidity.context_for(fn, graph, session.context_budget), session)


def audit_entries(entries, session, project="dataset") -> AuditReport:
    """Audit dataset entries with their stored call context; function ids are the entry ids."""
    if not entries:
        raise NoFunctionsFound("no dataset entries to audit.")
    functions = [
        FunctionRecord(e.id, "", e.id, "", e.code, (1, e.code.count("\n") + 1), "", path=e.source_ref)
        for e in entries
    ]
    contexts = {e.id: e.context for e in entries}
    return _run(project, functions, lambda fn: contexts[fn.id], session)


def render_summary(report: AuditReport, width=100) -> str:
    """Plain-text summary with one block per function."""
    lines = [f"Audit of {report.project}", f"template version {report.run['template_version']}", ""]
    for f in report.functions:
        head = f"{f.function.id} ({f.function.path}:{f.function.span[0]})"
        if f.error:
            lines += [head, f"  error: {f.error}", ""]
            continue
        v = f.verdict
        lines.append(f"{head}: {v.winner.value}, confidence {float(v.confidence):.2f} ({v.decided_by})")
        if f.final:
            prov = f.final.reason_provenance
            lines.append(
                f"  reason from explanation(s) {', '.join(map(str, prov['ids']))}, "
                f"ranker confidence {prov['ranker_confidence']}/10, {f.deliberation.terminated_by} "
                f"after {len(f.deliberation.rounds)} round(s)"
            )
            for para in f.final.reason.splitlines():
                lines += textwrap.wrap(para, width, initial_indent="    ", subsequent_indent="    ") or [""]
        lines.append("")
    return "\n".join(lines).rstrip() + "\n"


def write_report(report: AuditReport, out):
    """Write audit_report.json and audit_summary.txt into dir out."""
    out = Path(out)
    utils.dump_json(report.to_dict(), out / "audit_report.json")
    with open(out / "audit_summary.txt", "w", encoding="utf-8") as f:
        f.write(render_summary(report))
    return out / "audit_report.json"
