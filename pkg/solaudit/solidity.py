"""Function extraction and call graph construction for Solidity sources.

The parser is a tokenizer plus brace matching, not a grammar. It is enough to
cut function units out of files written for any compiler version and to link
them by name and arity within a project.
"""

from __future__ import annotations

import re
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterator, List, NamedTuple, Optional, Tuple

import networkx as nx

from . import utils
from .app import AuditError, logger

log = logger.getChild("solidity")

VISIBILITIES = ("public", "external", "internal", "private")
DEFINERS = ("function", "modifier", "constructor", "fallback", "receive")
CONTAINERS = ("contract", "interface", "library")

# Identifiers followed by "(" that are never calls into project code.
_KEYWORDS = {
    "if", "for", "while", "do", "else", "return", "returns", "require", "assert", "revert",
    "emit", "new", "try", "catch", "unchecked", "assembly", "mapping", "type", "function",
    "delete", "modifier", "event", "error", "constructor", "fallback", "receive", "override",
}
_BUILTINS = {
    "address", "payable", "bool", "string", "bytes", "byte", "keccak256", "sha256", "sha3",
    "ripemd160", "ecrecover", "addmod", "mulmod", "blockhash", "gasleft", "selfdestruct", "suicide",
}
_ELEMENTARY = re.compile(r"^(u?int|bytes|u?fixed)\d*(x\d+)?$")
_LOCATIONS = {"memory", "storage", "calldata", "indexed"}

_STRINGS = r'"(?:\\.|[^"\\\n])*"?|\'(?:\\.|[^\'\\\n])*\'?'
_COMMENTS = r"/\*[\s\S]*?(?:\*/|\Z)|//[^\n]*"
_HSPACE = r"[ \t\f\v\r]+"

_NORMALIZE = re.compile(rf"(?P<keep>{_COMMENTS}|{_STRINGS})|(?P<space>{_HSPACE})")
_TOKEN = re.compile(
    rf"(?P<comment>{_COMMENTS})"
    rf"|(?P<string>{_STRINGS})"
    rf"|(?P<space>{_HSPACE})"
    r"|(?P<newline>\n)"
    r"|(?P<ident>[A-Za-z_$][A-Za-z0-9_$]*)"
    r"|(?P<number>0[xX][0-9a-fA-F_]+|\d[\d_]*(?:\.\d[\d_]*)?(?:[eE][+-]?\d+)?)"
    r"|(?P<punct>.)",
    re.S,
)


class ParseError(AuditError):
    def __init__(self, path, line):
        super().__init__(f'unbalanced braces in "{path}" at line {line}.')
        self.path = path
        self.line = line


class UnknownFunction(AuditError):
    pass


class Token(NamedTuple):
    kind: str
    text: str
    start: int
    line: int


@dataclass
class SourceFile:
    path: str
    content: str
    content_hash: str = field(init=False)

    def __post_init__(self):
        if not self.path:
            raise ValueError("source file path must not be empty.")
        self.content_hash = utils.sha256_hex(self.content)

    @classmethod
    def read(cls, path):
        with open(path, encoding="utf-8") as f:
            return cls(str(path), f.read())


@dataclass
class FunctionRecord:
    id: str
    contract: str
    name: str
    signature: str
    source: str
    span: Tuple[int, int]
    visibility: str
    kind: str = "function"
    path: str = ""

    @property
    def arity(self) -> int:
        params = self.signature[self.signature.index("(") + 1 : -1]
        return len(_split_top(params)) if params else 0

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**{**d, "span": tuple(d["span"])})


@dataclass
class CallContext:
    function_id: str
    callers: List[Tuple[str, str]] = field(default_factory=list)
    callees: List[Tuple[str, str]] = field(default_factory=list)
    truncated: bool = False

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(
            function_id=d["function_id"],
            callers=[tuple(c) for c in d.get("callers", [])],
            callees=[tuple(c) for c in d.get("callees", [])],
            truncated=d.get("truncated", False),
        )


class CallGraph:
    """Directed caller -> callee edges over the functions of one project."""

    def __init__(self, functions=()):
        self.graph = nx.DiGraph()
        self.functions = {}
        self.diagnostics = Counter(calls=0, resolved=0, unresolved=0)
        for f in functions:
            self.add_function(f)

    def add_function(self, fn: FunctionRecord):
        self.functions[fn.id] = fn
        self.graph.add_node(fn.id)

    def add_edge(self, caller: str, callee: str):
        if caller not in self.graph or callee not in self.graph:
            raise UnknownFunction(f'edge ({caller}, {callee}) references an unknown function.')
        self.graph.add_edge(caller, callee)

    @property
    def nodes(self):
        return set(self.graph.nodes)

    @property
    def edges(self):
        return set(self.graph.edges)

    def callers(self, fid):
        return sorted(self.graph.predecessors(fid))

    def callees(self, fid):
        return sorted(self.graph.successors(fid))

    def to_dict(self):
        return {
            "nodes": sorted(self.graph.nodes),
            "edges": [list(e) for e in sorted(self.graph.edges)],
            "diagnostics": dict(self.diagnostics),
        }


def tokenize(text: str) -> Iterator[Token]:
    """Yield every token of text, whitespace and comments included."""
    line = 1
    for m in _TOKEN.finditer(text):
        kind = m.lastgroup
        yield Token(kind, m.group(), m.start(), line)
        line += m.group().count("\n")


def code_tokens(text: str) -> List[Token]:
    return [t for t in tokenize(text) if t.kind not in ("comment", "space", "newline")]


def normalize_code(raw: str) -> str:
    """Collapse horizontal whitespace outside literals and comments, strip line ends."""
    text = raw.replace("\r\n", "\n")
    text = _NORMALIZE.sub(lambda m: m.group("keep") or " ", text)
    return "\n".join(line.rstrip() for line in text.split("\n"))


def _match_pairs(tokens, path, opening="{", closing="}"):
    """Map index of every opening token to its closing index, raise on imbalance."""
    stack, pairs = [], {}
    for i, t in enumerate(tokens):
        if t.text == opening:
            stack.append(i)
        elif t.text == closing:
            if not stack:
                raise ParseError(path, t.line)
            pairs[stack.pop()] = i
    if stack:
        raise ParseError(path, tokens[stack[-1]].line)
    return pairs


def _skip_group(tokens, i):
    """Index just past the bracket group opening at i."""
    pairs = {"(": ")", "[": "]", "{": "}"}
    depth = 0
    for j in range(i, len(tokens)):
        if tokens[j].text in pairs:
            depth += 1
        elif tokens[j].text in pairs.values():
            depth -= 1
            if depth == 0:
                return j + 1
    return len(tokens)


def _split_top(text_or_tokens):
    """Split a parameter list (str or tokens) on top-level commas."""
    tokens = code_tokens(text_or_tokens) if isinstance(text_or_tokens, str) else text_or_tokens
    groups, cur, depth = [], [], 0
    for t in tokens:
        if t.text in "([{" and t.kind == "punct":
            depth += 1
        elif t.text in ")]}" and t.kind == "punct":
            depth -= 1
        if t.text == "," and depth == 0:
            groups.append(cur)
            cur = []
        else:
            cur.append(t)
    if cur or groups:
        groups.append(cur)
    return groups


def _canonical_type(word):
    if word == "uint":
        return "uint256"
    if word == "int":
        return "int256"
    return word


def _param_types(tokens) -> List[str]:
    types = []
    for group in _split_top(tokens):
        words = [t for t in group if t.text not in _LOCATIONS]
        if words and words[0].text == "function":
            types.append("function")
            continue
        if len(words) > 1 and words[-1].kind == "ident" and words[-1].text != "payable" and words[-2].text != ".":
            words = words[:-1]
        if len(words) > 1 and words[-1].text == "payable" and words[-2].text == "address":
            words = words[:-1]
        types.append("".join(_canonical_type(w.text) for w in words))
    return types


def _read_definition(tokens, i, pairs, sf: SourceFile, contract: str) -> Tuple[Optional[FunctionRecord], int]:
    """Try to read a definition starting at keyword tokens[i].

    Returns the record (None for declarations, function types and other
    lookalikes) and the index to continue scanning from.
    """
    kw = kind = tokens[i].text
    j = i + 1
    n = len(tokens)
    if kw in ("function", "modifier") and j < n and tokens[j].kind == "ident":
        name = tokens[j].text
        j += 1
    elif kw == "function":
        # pre-0.6 unnamed fallback
        name = kind = "fallback"
    elif kw == "modifier":
        return None, i + 1
    else:
        name = kw
    params = []
    if j < n and tokens[j].text == "(":
        end = _skip_group(tokens, j)
        params = tokens[j + 1 : end - 1]
        j = end
    elif kw != "modifier":
        return None, i + 1
    visibility = "unknown"
    while j < n:
        t = tokens[j]
        if t.text in ("(", "["):
            j = _skip_group(tokens, j)
            continue
        if t.text == "{":
            break
        if t.text in (";", ")", ",", "=", "}"):
            return None, i + 1
        if t.text in VISIBILITIES and visibility == "unknown":
            visibility = t.text
        j += 1
    else:
        return None, i + 1
    close = pairs[j]
    raw = sf.content[tokens[i].start : tokens[close].start + 1]
    source = normalize_code(raw)
    signature = f"{name}({','.join(_param_types(params))})"
    digest = utils.sha256_hex(source)[:8]
    fid = f"{contract}.{signature}#{digest}" if contract else f"{signature}#{digest}"
    record = FunctionRecord(
        id=fid,
        contract=contract,
        name=name,
        signature=signature,
        source=source,
        span=(tokens[i].line, tokens[close].line),
        visibility=visibility,
        kind=kind,
        path=sf.path,
    )
    return record, close + 1


def extract_functions(file: SourceFile) -> List[FunctionRecord]:
    """Extract one record per function, modifier, constructor, fallback and receive definition.

    Bodiless declarations (interfaces, abstract functions) are not definitions and are skipped.

    Raises:
        ParseError: when the brace structure of the file is unbalanced.
    """
    tokens = code_tokens(file.content)
    pairs = _match_pairs(tokens, file.path)
    records = []
    scope = []  # (contract name, depth inside its body)
    pending = None
    depth = 0
    i = 0
    while i < len(tokens):
        t = tokens[i]
        level = scope[-1][1] if scope else 0
        if t.text == "{" and t.kind == "punct":
            depth += 1
            if pending:
                scope.append((pending, depth))
                pending = None
        elif t.text == "}" and t.kind == "punct":
            if scope and scope[-1][1] == depth:
                scope.pop()
            depth -= 1
        elif t.kind == "ident" and depth == level:
            if t.text in CONTAINERS and i + 1 < len(tokens) and tokens[i + 1].kind == "ident":
                pending = tokens[i + 1].text
                i += 2
                continue
            if t.text in DEFINERS and (scope or t.text == "function"):
                record, nxt = _read_definition(tokens, i, pairs, file, scope[-1][0] if scope else "")
                if record:
                    records.append(record)
                    i = nxt
                    continue
        i += 1
    log.debug(f'Extracted {len(records)} functions from "{file.path}".')
    return records


def extract_project(path) -> List[FunctionRecord]:
    """Extract functions from a .sol file or every .sol file under a dir, with project-unique ids."""
    records = []
    for f in utils.parse_input(path):
        records.extend(extract_functions(SourceFile.read(f)))
    ids = utils.rename_dup([r.id for r in records])
    return [r if r.id == fid else replace(r, id=fid) for r, fid in zip(records, ids)]


def _call_sites(fn: FunctionRecord):
    """Yield (name, arity or None, qualifier) for every call-like expression of a function.

    The parameter list is skipped. Qualifier is "" for plain calls, "this"/"super" for
    self calls, ".Name" for member calls on a plain identifier, "." for other member
    calls and "modifier" for bare identifiers in the header, which may invoke modifiers
    without arguments.
    """
    tokens = code_tokens(fn.source)
    i = 1
    if fn.kind in ("function", "modifier") and i < len(tokens) and tokens[i].kind == "ident":
        i += 1
    if i < len(tokens) and tokens[i].text == "(":
        i = _skip_group(tokens, i)
    body = next((k for k in range(i, len(tokens)) if tokens[k].text == "{"), len(tokens))
    while i < len(tokens):
        t = tokens[i]
        if t.kind != "ident" or i + 1 >= len(tokens):
            i += 1
            continue
        prev = tokens[i - 1].text
        nxt = tokens[i + 1].text
        if prev in ("emit", "new", "revert", "catch", "function") or t.text in _KEYWORDS:
            i += 1
            continue
        if prev == ".":
            receiver = tokens[i - 2]
            if receiver.text in ("this", "super"):
                qualifier = receiver.text
            elif receiver.kind == "ident" and (i < 3 or tokens[i - 3].text != "."):
                qualifier = f".{receiver.text}"
            else:
                qualifier = "."
        else:
            qualifier = ""
        if nxt == "(":
            end = _skip_group(tokens, i + 1)
            yield t.text, _arity(tokens[i + 2 : end - 1]), qualifier
        elif i < body:
            yield t.text, 0, "modifier"
        elif nxt == "{":
            after = _skip_group(tokens, i + 1)
            if after < len(tokens) and tokens[after].text == "(":
                # call options, f{value: v}(...)
                yield t.text, None, qualifier
        i += 1


def _arity(inner) -> int:
    if not inner:
        return 0
    if inner[0].text == "{" and _skip_group(inner, 0) == len(inner):
        named = _split_top(inner[1:-1])
        return len(named)
    return len(_split_top(inner))


def build_call_graph(functions: List[FunctionRecord]) -> CallGraph:
    """Link functions by syntactic name and arity resolution within the project.

    Calls resolve to same-contract targets when there are any, otherwise to every
    project function with the name and arity. Member calls resolve only when the
    receiver names a project contract or library. Calls whose arity is not known
    match on name only. Unresolved calls only feed the diagnostics tally.
    """
    graph = CallGraph(functions)
    containers = {f.contract for f in functions if f.contract}
    by_name = defaultdict(list)
    for f in functions:
        if f.kind in ("function", "modifier"):
            by_name[f.name].append(f)
    for f in functions:
        for name, arity, qualifier in _call_sites(f):
            if qualifier == "modifier":
                # header words that name no modifier (visibility, mutability, types) are not calls
                targets = [t for t in by_name.get(name, []) if t.kind == "modifier"]
                targets = [t for t in targets if t.contract == f.contract] or targets
                if targets:
                    graph.diagnostics["calls"] += 1
                    graph.diagnostics["resolved"] += 1
                    for target in targets:
                        graph.add_edge(f.id, target.id)
                continue
            if qualifier.startswith("."):
                graph.diagnostics["calls"] += 1
                # members of project contracts and libraries, C.f(...) or L.f(...)
                receiver = qualifier[1:]
                targets = [
                    t for t in by_name.get(name, [])
                    if receiver in containers and t.contract == receiver and (arity is None or t.arity == arity)
                ]
                if not targets:
                    graph.diagnostics["unresolved"] += 1
                    continue
                graph.diagnostics["resolved"] += 1
                for target in targets:
                    graph.add_edge(f.id, target.id)
                continue
            if name in _BUILTINS or _ELEMENTARY.match(name):
                continue
            graph.diagnostics["calls"] += 1
            matched = [t for t in by_name.get(name, []) if arity is None or t.arity == arity]
            if qualifier == "super":
                matched = [t for t in matched if t.contract != f.contract]
            local = [t for t in matched if t.contract == f.contract]
            targets = local or matched
            if not targets:
                graph.diagnostics["unresolved"] += 1
                continue
            graph.diagnostics["resolved"] += 1
            for target in targets:
                graph.add_edge(f.id, target.id)
    log.debug(
        f"Call graph has {graph.graph.number_of_nodes()} nodes and {graph.graph.number_of_edges()} edges, "
        f"{graph.diagnostics['unresolved']} calls unresolved."
    )
    return graph


def _pack(items, budget):
    packed, used = [], 0
    for fid, src in items:
        room = budget - used
        if len(src) <= room:
            packed.append((fid, src))
            used += len(src)
        else:
            if room > 0:
                packed.append((fid, src[:room]))
            return packed, True
    return packed, False


def context_for(fn: FunctionRecord, graph: CallGraph, budget: int = 4000) -> CallContext:
    """Collect caller and callee excerpts of a function, each side packed greedily into budget chars.

    Raises:
        UnknownFunction: if fn is not a node of graph.
    """
    if fn.id not in graph.graph:
        raise UnknownFunction(f'function "{fn.id}" is not in the call graph.')
    if budget <= 0:
        raise ValueError("context budget must be positive.")
    callers = [(c, graph.functions[c].source) for c in graph.callers(fn.id) if c != fn.id]
    callees = [(c, graph.functions[c].source) for c in graph.callees(fn.id) if c != fn.id]
    callers, cut_callers = _pack(callers, budget)
    callees, cut_callees = _pack(callees, budget)
    return CallContext(fn.id, callers, callees, cut_callers or cut_callees)


def write_extraction(functions: List[FunctionRecord], graph: CallGraph, out):
    """Write functions.jsonl and callgraph.json into dir out."""
    out = Path(out)
    utils.write_jsonl((f.to_dict() for f in functions), out / "functions.jsonl")
    utils.dump_json(graph.to_dict(), out / "callgraph.json")
    return out / "functions.jsonl", out / "callgraph.json"
