import re

import pytest

from solaudit.app import new_conf
from solaudit.backend import Backend, BackendUnavailable, Completion
from solaudit.dataset import (
    AUDIT_REPORT,
    CANONICAL,
    DERIVED_NEGATIVE,
    SPLITS,
    DatasetEntry,
    KnowledgeItem,
    ManifestError,
    TooFew,
    build_manifest,
    clean_code,
    derive_negatives,
    enhance_entries,
    enhance_explanation,
    group_knowledge,
    ingest_reports,
    missing_sections,
    read_entries,
    split,
    split_sizes,
    strip_links,
    verify_manifest,
    write_entries,
)
from solaudit.prompts import Label
from solaudit.session import Session
from solaudit.solidity import CallContext

ENHANCED = """## Explanation
The balance is written after the external call, see https://swcregistry.io/docs/SWC-107.

## Proof of Concept
A contract whose fallback calls withdraw again drains the bank.

## Recommendation
Update the balance before the call."""

KNOWN = {3, 5, 7, 9, 13, 15, 17, 19, 23, 25, 27, 29, 33, 35}


def candidate(i):
    return {"id": f"c{i}", "code": f"function candidate_{i}() external {{}}"}


class JudgeBackend(Backend):
    """Stage answers by candidate number: groups match even ones, items every 4th, negligence every 8th.

    Candidates numbered 1 mod 10 fail at the first stage.
    """

    backend_id = "judge"

    def _complete(self, endpoint, text, prompt_hash):
        i = int(re.search(r"candidate_(\d+)", text).group(1))
        if "functionality groups" in text:
            if i % 10 == 1:
                raise BackendUnavailable("judge down")
            output = "1, 2" if i % 2 == 0 else "none"
        elif "functionality descriptions" in text:
            output = "1" if i % 4 == 0 else "None of them."
        else:
            output = "Yes." if i % 8 == 0 else "No."
        return Completion(prompt_hash, output, 0.0, backend_id=self.backend_id)


def knowledge():
    return [
        KnowledgeItem("transfers tokens between accounts", "balance updated after the external call", "transfer", "moves tokens"),
        KnowledgeItem("pays out rewards", "reward computed from a stale price", "transfer", "moves tokens"),
        KnowledgeItem("changes the owner", "missing access control", "owner", "controls who may call"),
    ]


def entries_of(n_pos, n_neg):
    pos = [DatasetEntry(f"pos-{i:05d}", f"function p{i}() {{}}", Label.VULNERABLE, "reentrancy") for i in range(n_pos)]
    neg = [DatasetEntry(f"neg-{i:05d}", f"function n{i}() {{}}", Label.SAFE) for i in range(n_neg)]
    return pos + neg


def test_strip_links():
    assert strip_links("see https://github.com/org/repo/issues/1.") == "see [link]."
    assert strip_links("(http://a.io/x) and www.example.com/page") == "([link]) and [link]"
    assert strip_links("no links here: a.b") == "no links here: a.b"
    assert strip_links(None) == ""
    assert clean_code("x  =  1; // https://a.io/b  ") == "x = 1; // [link]"


def test_entry():
    with pytest.raises(ValueError):
        DatasetEntry("pos-1", "function f() {}", Label.VULNERABLE, " ")
    entry = DatasetEntry("neg-1", "function f() {}", "safe", context=CallContext("neg-1", callers=[("a", "b")]))
    assert entry.label == Label.SAFE
    d = entry.to_dict()
    assert list(d) == ["id", "code", "label", "reason", "provenance", "source_ref", "split", "context", "flags"]
    assert d["label"] == "safe"
    assert DatasetEntry.from_dict(d) == entry


def test_ingest():
    records = [
        {"code": "function a() {  x = 1; }", "reason": "reentrancy, see https://a.io/r", "report": "r1.md"},
        {"code": "function a() { x = 1; }", "reason": "duplicate body"},
        {"code": "", "reason": "no code"},
        {"code": "function b() {}", "reason": "  "},
        {"code": "function c() {}", "reason": "overflow", "source_ref": "r2.md", "context": {"function_id": "x"}},
    ]
    entries, skipped = ingest_reports(records)
    assert skipped == {"duplicate": 1, "missing_code": 1, "missing_reason": 1}
    assert [e.code for e in entries] == ["function a() { x = 1; }", "function c() {}"]
    first = entries[0]
    assert re.fullmatch(r"pos-[0-9a-f]{12}", first.id)
    assert first.label == Label.VULNERABLE
    assert first.reason == "reentrancy, see [link]"
    assert first.provenance == AUDIT_REPORT
    assert first.source_ref == "r1.md"
    assert entries[1].context == CallContext("x")


def test_group_knowledge(make_session):
    session = make_session(
        [
            {"contains": "short category name", "replies": ["Token Transfer.", "token  transfer", "Access control"]},
            {"contains": "Summarize the common functionality", "replies": ["controls who may call", "moves tokens"]},
        ]
    )
    raw = [
        {"functionality_description": "transfers tokens", "negligence": "late balance update"},
        {"functionality_description": "pays rewards", "negligence": "stale price"},
        {"functionality_description": "changes the owner", "negligence": "no access control"},
    ]
    items = group_knowledge(raw, session)
    assert [k.group_id for k in items] == ["token transfer", "token transfer", "access control"]
    assert [k.group_functionality for k in items] == ["moves tokens", "moves tokens", "controls who may call"]

    assert group_knowledge([k.to_dict() for k in items]) == items
    with pytest.raises(ValueError):
        group_knowledge(raw)


def test_derive_negatives():
    session = Session(new_conf(), JudgeBackend())
    candidates = [candidate(i) for i in range(100)]
    positives = [DatasetEntry(f"pos-{i}", clean_code(candidate(i)["code"]), Label.VULNERABLE, "known") for i in KNOWN]
    negatives, tally = derive_negatives(candidates, knowledge(), session, positives)
    assert len(negatives) == 63
    assert tally == {"negative": 63, "matched": 13, "judge_failed": 10, "known_positive": 14}
    refs = {e.source_ref for e in negatives}
    assert "c4" in refs and "c2" in refs
    assert not refs & {"c0", "c8", "c1", "c3"}
    assert all(e.label == Label.SAFE and e.provenance == DERIVED_NEGATIVE for e in negatives)
    assert all(re.fullmatch(r"neg-[0-9a-f]{12}", e.id) for e in negatives)
    assert len({e.id for e in negatives}) == 63


def test_derive_negatives_ungrouped():
    with pytest.raises(ValueError):
        derive_negatives([candidate(0)], [KnowledgeItem("f", "n")], Session(new_conf(), JudgeBackend()))


def test_enhance(make_session):
    entries = entries_of(3, 1)
    session = make_session(
        [{"contains": "lacks detail", "replies": [ENHANCED, "## Explanation\nonly this", {"error": "down"}]}]
    )
    enhance_entries(entries, session)
    assert entries[0].flags == ["enhanced"]
    assert "[link]" in entries[0].reason and "https://" not in entries[0].reason
    assert entries[1].flags == ["enhancement_rejected"]
    assert entries[1].reason == "reentrancy"
    assert entries[2].flags == ["enhancement_failed"]
    assert entries[3].flags == []

    entry = enhance_explanation(entries_of(1, 0)[0], make_session([{"contains": "lacks detail", "reply": ENHANCED}]))
    assert entry.flags == ["enhanced"]


def test_missing_sections():
    assert missing_sections(ENHANCED) == []
    assert missing_sections("**Explanation**: x\nPoC: y") == ["recommendation"]
    assert missing_sections("") == ["explanation", "proof_of_concept", "recommendation"]


def test_split_sizes():
    assert split_sizes(10) == (6, 2, 2)
    assert split_sizes(CANONICAL["positives"] + CANONICAL["negatives"]) == (2268, 567, 709)


def test_split_toy():
    entries = entries_of(5, 5)
    ids = split(entries, seed=1)
    assert {k: len(v) for k, v in ids.items()} == {"train": 6, "val": 2, "test": 2}
    for name in SPLITS:
        labels = [e.label for e in entries if e.split == name]
        assert labels.count(Label.VULNERABLE) == labels.count(Label.SAFE)
    with pytest.raises(TooFew):
        split(entries_of(2, 1))


def test_split_deterministic():
    a, b = entries_of(30, 40), entries_of(30, 40)
    b.reverse()
    assert split(a, seed=7) == split(b, seed=7)
    assert split(a, seed=7) != split(a, seed=8)


def test_canonical_manifest():
    entries = entries_of(CANONICAL["positives"], CANONICAL["negatives"])
    manifest = build_manifest(entries, seed=42, canonical=True)
    assert manifest["counts"] == {"train": 2268, "val": 567, "test": 709}
    assert (manifest["positives"], manifest["negatives"]) == (1734, 1810)
    assigned = [i for name in SPLITS for i in manifest["ids"][name]]
    assert sorted(assigned) == sorted(e.id for e in entries)
    for name, ratio in zip(SPLITS, (0.64, 0.16, 0.20)):
        positives = sum(1 for i in manifest["ids"][name] if i.startswith("pos-"))
        assert abs(positives - ratio * 1734) <= 2
    assert verify_manifest(manifest, entries)


def test_verify_manifest():
    entries = entries_of(5, 5)
    manifest = build_manifest(entries, seed=3)
    assert not manifest["canonical"]

    bad = {**manifest, "counts": {**manifest["counts"], "train": 5}}
    with pytest.raises(ManifestError):
        verify_manifest(bad)
    ids = manifest["ids"]
    bad = {**manifest, "ids": {**ids, "val": [ids["train"][0], ids["val"][1]]}}
    with pytest.raises(ManifestError):
        verify_manifest(bad)
    with pytest.raises(ManifestError):
        verify_manifest({**manifest, "positives": 6})
    with pytest.raises(ManifestError):
        verify_manifest({**manifest, "canonical": True})
    with pytest.raises(ManifestError):
        verify_manifest(manifest, entries[:-1])
    with pytest.raises(ManifestError):
        verify_manifest({"seed": 1})
    with pytest.raises(ManifestError):
        build_manifest(entries_of(5, 5), canonical=True)


def test_entries_file(tmp_path):
    entries = entries_of(2, 2)
    entries[0].context = CallContext(entries[0].id, callees=[("x", "function x() {}")])
    assert write_entries(entries, tmp_path / "data" / "dataset.jsonl") == 4
    assert read_entries(tmp_path / "data" / "dataset.jsonl") == entries


def test_derive_negatives_duplicate_code():
    code = candidate(6)["code"]
    candidates = [{"id": "Token.c6", "code": code}, {"id": "Vault.c6", "code": code.replace(" {", "    {")}, candidate(2)]
    negatives, tally = derive_negatives(candidates, knowledge(), Session(new_conf(), JudgeBackend()))
    assert [e.source_ref for e in negatives] == ["Token.c6", "c2"]
    assert tally == {"negative": 2, "duplicate": 1}

    manifest = build_manifest(entries_of(4, 2) + negatives, seed=1)
    assigned = [i for name in SPLITS for i in manifest["ids"][name]]
    assert len(assigned) == len(set(assigned)) == 8
