import logging
import sys
import textwrap
from contextlib import contextmanager
from pathlib import Path

import box
import click
from rich import print
from rich.console import Console
from rich.logging import RichHandler
from rich.table import Table

logging.basicConfig(
    level=logging.NOTSET,
    format="%(message)s",
    datefmt="[%X]",
    handlers=[RichHandler(console=Console(stderr=True))]
)

from . import utils
from .app import AuditError, ConfigError, config, logger, new_conf

EXIT_CONFIG = 1
EXIT_EXTRACT = 2
EXIT_AUDIT = 3
EXIT_MANIFEST = 4
EXIT_EVAL = 5


@contextmanager
def exits(code, *errors):
    """Log errors of the given types and exit with code."""
    try:
        yield
    except errors as e:
        logger.error(str(e))
        sys.exit(code)


def mock_script_option():
    return click.option(
        "--mock-script", type=click.Path(dir_okay=False, exists=True), help="Answer model calls from a scripted reply file."
    )


def make_session(mock_script=None, **overrides):
    """A session from the loaded config, updated by command line overrides that were given."""
    from .backend import ScriptedBackend, Transcript
    from .session import Session

    with exits(EXIT_CONFIG, ConfigError, AuditError):
        conf = new_conf(config.to_dict())
        conf.merge_update({k: v for k, v in overrides.items() if v is not None})
        backend = None
        if mock_script:
            transcript = Transcript(conf.transcript) if conf.get("transcript") else None
            backend = ScriptedBackend.from_file(mock_script, transcript=transcript)
        return Session(conf, backend)


def print_table(title, rows, columns=("Key", "Value")):
    table = Table(title=title)
    for c in columns:
        table.add_column(c)
    for row in rows:
        table.add_row(*map(str, row))
    Console().print(table)


@click.group()
@click.option("--verbose", "-v", count=True, default=False, help="Set level of logging.")
@click.option("--quiet", "-q", is_flag=True, default=False, help="Mute all messages under warning level.")
@click.option("--config", "-c", "conf", type=click.Path(dir_okay=False), help="Extra config file to be loaded.")
def cli(verbose, quiet, conf):
    """Cli Controller of SolAudit package, a multi-role LLM pipeline for auditing Solidity smart contracts."""
    if conf:
        config.load(conf)
    if quiet:
        logger.setLevel(logging.WARNING)
        return None
    if verbose > 1:
        from rich import traceback
        traceback.install(suppress=[click, box])
    if verbose:
        logger.setLevel(logging.DEBUG)
    else:
        logger.setLevel(logging.INFO)


@cli.command()
@click.argument("fields", type=str, nargs=-1)
def debug(fields):
    """Print debug informations."""
    if not fields or "logger" in fields:
        print(f"Logger level: {logger.getEffectiveLevel()}")
    if not fields or "conf" in fields:
        print("Configs:")
        with exits(EXIT_CONFIG, ConfigError):
            print(textwrap.indent(config.to_yaml().rstrip(), " " * 2))


@cli.command()
@utils.inputs("path")
@utils.outputs()
def extract(path, out):
    """Extract functions and the call graph of Solidity sources into functions.jsonl and callgraph.json."""
    from .solidity import ParseError, build_call_graph, extract_project, write_extraction

    with exits(EXIT_EXTRACT, ParseError, IOError):
        functions = extract_project(path)
    if not functions:
        logger.error(f'No functions found in "{path}".')
        sys.exit(EXIT_EXTRACT)
    graph = build_call_graph(functions)
    write_extraction(functions, graph, out)
    d = graph.diagnostics
    print_table(
        "Extraction",
        [
            ("contracts", len({f.contract for f in functions if f.contract})),
            ("functions", len(functions)),
            ("call edges", len(graph.edges)),
            ("unresolved calls", f'{d["unresolved"]}/{d["calls"]}'),
        ],
    )


@cli.command()
@utils.inputs("path")
@utils.outputs()
@click.option("--seed", type=int, help="Seed of the run, recorded in the report config.")
@click.option("--parallelism", type=click.IntRange(min=1), help="Model calls in flight per fan-out.")
@click.option("--explain-safe/--no-explain-safe", default=None, help="Explain safe verdicts too.")
@click.option("--split", help="Only audit dataset entries of this split (for .jsonl datasets).")
@mock_script_option()
def audit(path, out, seed, parallelism, explain_safe, split, mock_script):
    """Audit a Solidity file or dir, or the entries of a dataset .jsonl, into audit_report.json."""
    from .dataset import read_entries
    from .pipeline import NoFunctionsFound, audit_entries, audit_project, write_report
    from .solidity import ParseError

    session = make_session(mock_script, seed=seed, parallelism=parallelism, explain_safe=explain_safe)
    with exits(EXIT_EXTRACT, ParseError, NoFunctionsFound, IOError):
        if Path(path).suffix.lower() == ".jsonl":
            entries = [e for e in read_entries(path) if not split or e.split == split]
            report = audit_entries(entries, session, project=Path(path).stem)
        else:
            report = audit_project(path, session)
    write_report(report, out)
    labels = [f.label.value if f.label else "error" for f in report.functions]
    print_table(
        "Audit",
        [(name, labels.count(name)) for name in ("vulnerable", "safe", "error")],
        columns=("Label", "Functions"),
    )
    if len(report.failed) == len(report.functions):
        logger.error("Every function failed to audit.")
        sys.exit(EXIT_AUDIT)


@cli.group()
def dataset():
    """Build the labeled dataset: ingest positives, derive negatives, enhance and split."""


@dataset.command()
@utils.inputs("records", dir_okay=False)
@utils.outputs()
def ingest(records, out):
    """Ingest exported audit-report records (.jsonl) into positives.jsonl."""
    from .dataset import ingest_reports, write_entries

    entries, skipped = ingest_reports(utils.read_jsonl(records))
    write_entries(entries, Path(out) / "positives.jsonl")
    print_table("Ingest", [("positives", len(entries)), *sorted(skipped.items())])


@dataset.command()
@utils.inputs("candidates")
@click.option("--knowledge", "-k", required=True, type=click.Path(dir_okay=False, exists=True), help="Knowledge items (.jsonl).")
@click.option("--positives", "-p", type=click.Path(dir_okay=False, exists=True), help="Positives to exclude (.jsonl).")
@utils.outputs()
@mock_script_option()
def negatives(candidates, knowledge, positives, out, mock_script):
    """Derive negatives from candidate functions (Solidity sources or .jsonl) by hierarchical matching."""
    from .dataset import derive_negatives, group_knowledge, read_entries, write_entries
    from .solidity import ParseError, extract_project

    session = make_session(mock_script)
    with exits(EXIT_EXTRACT, ParseError, IOError):
        if Path(candidates).suffix.lower() == ".jsonl":
            cands = list(utils.read_jsonl(candidates))
        else:
            cands = extract_project(candidates)
    with exits(EXIT_MANIFEST, AuditError):
        items = group_knowledge(utils.read_jsonl(knowledge), session)
    utils.write_jsonl((k.to_dict() for k in items), Path(out) / "knowledge.jsonl")
    entries, tally = derive_negatives(cands, items, session, read_entries(positives) if positives else ())
    write_entries(entries, Path(out) / "negatives.jsonl")
    print_table("Negatives", sorted(tally.items()))


@dataset.command()
@utils.inputs("data", dir_okay=False)
@utils.outputs()
@mock_script_option()
def enhance(data, out, mock_script):
    """Expand the reasons of positives into explanation, proof of concept and recommendation."""
    from .dataset import enhance_entries, read_entries, write_entries

    session = make_session(mock_script)
    entries = enhance_entries(read_entries(data), session)
    write_entries(entries, Path(out) / "enhanced.jsonl")
    flags = [f for e in entries for f in e.flags if f.startswith("enhance")]
    print_table("Enhance", [(f, flags.count(f)) for f in sorted(set(flags))])


@dataset.command()
@click.argument("data", nargs=-1, required=True, type=click.Path(dir_okay=False, exists=True))
@utils.outputs()
@click.option("--seed", type=int, default=None, help="Seed of the shuffle. Defaults to the config seed.")
@click.option("--canonical", is_flag=True, help="Require the canonical corpus bookkeeping.")
def split(data, out, seed, canonical):
    """Merge dataset files, assign train/val/test splits and write dataset.jsonl and splits.json."""
    from .dataset import TooFew, ManifestError, build_manifest, read_entries, write_entries

    entries = [e for d in data for e in read_entries(d)]
    seed = config.seed if seed is None else seed
    with exits(EXIT_MANIFEST, TooFew, ManifestError):
        manifest = build_manifest(entries, seed, canonical)
    write_entries(entries, Path(out) / "dataset.jsonl")
    utils.dump_json(manifest, Path(out) / "splits.json")
    print_table("Split", [(k, v) for k, v in manifest["counts"].items()], columns=("Split", "Entries"))


@dataset.command()
@utils.inputs("data", dir_okay=False)
@utils.inputs("manifest", dir_okay=False)
def check(data, manifest):
    """Verify a split manifest against a dataset."""
    from .dataset import ManifestError, read_entries, verify_manifest

    with exits(EXIT_MANIFEST, ManifestError):
        verify_manifest(utils.load_json(manifest), read_entries(data))
    logger.info(f'Manifest "{manifest}" is consistent with "{data}".')


@cli.command("eval")
@utils.inputs("report", dir_okay=False)
@utils.inputs("data", dir_okay=False)
@utils.outputs()
@click.option("--split", help="Only score entries of this split.")
@click.option("--judge/--no-judge", default=False, help="Judge explanation consistency with the judge endpoint.")
@mock_script_option()
def evaluate(report, data, out, split, judge, mock_script):
    """Score an audit report against a labeled dataset into eval_report.json."""
    from .dataset import read_entries
    from .evalkit import EmptyMatrix, IdMismatch, JudgeUnavailable, build_eval_report

    session = make_session(mock_script) if judge else None
    with exits(EXIT_EVAL, IdMismatch, EmptyMatrix, JudgeUnavailable):
        result = build_eval_report(utils.load_json(report), read_entries(data), split, session)
    utils.dump_json(result, Path(out) / "eval_report.json")
    print_table("Metrics", result["metrics"].items(), columns=("Metric", "Value"))


if __name__ == "__main__":
    cli()
