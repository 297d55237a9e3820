import json
import os
import re

import pytest

from segfusion import vqa

FIXTURES = os.path.join(os.path.dirname(__file__), "fixtures")
HUMAN = re.compile(r"^<image>\n.+$", re.DOTALL)


def _records():
    with open(os.path.join(FIXTURES, "reports.jsonl")) as fh:
        return [vqa.ReportRecord(r["id"], r["image"], r["text"]) for r in map(json.loads, fh)]


def test_template_asset():
    t = vqa.prompt_templates()
    assert len(t) == 33 and len(set(t)) == 33
    assert t[0] == "Can you describe what you see in the image?"


# ------------------------------------------------------------------ extract_findings


def test_extract_findings_delimiters():
    assert vqa.extract_findings("FINDINGS: Clear lungs. IMPRESSION: Normal.") == "Clear lungs."


def test_extract_findings_missing_header():
    with pytest.raises(vqa.SkipRecord):
        vqa.extract_findings("IMPRESSION: Normal.")
    with pytest.raises(vqa.SkipRecord):
        vqa.extract_findings("FINDINGS:   \n IMPRESSION: x")


def test_extract_findings_normalises_whitespace():
    text = "EXAM: CXR\nfindings:\nHeart normal.\n\n\n  Lungs   clear.\n\nIMPRESSION:\nNone."
    assert vqa.extract_findings(text) == "Heart normal. Lungs clear."


def test_extract_findings_runs_to_end_without_impression():
    assert vqa.extract_findings("Findings: A.\nB.") == "A. B."


# ------------------------------------------------------------------ to_single_turn


def test_single_turn_invariants_and_determinism():
    rec = vqa.ReportRecord("abc", "img.png", "FINDINGS: Small effusion.")
    a, b = vqa.to_single_turn(rec, 3), vqa.to_single_turn(rec, 3)
    assert a == b
    human, gpt = a.conversations
    assert human["from"] == "human" and gpt == {"from": "gpt", "value": "Small effusion."}
    assert HUMAN.match(human["value"])
    assert human["value"].split("\n", 1)[1] in vqa.prompt_templates()


def test_fixture_corpus_conversion():
    recs = _records()
    assert len(recs) == 100
    chats, skipped = vqa.convert_records(recs, 7)
    assert len(chats) == 100 - len(skipped)
    templates = set(vqa.prompt_templates())
    for c in chats:
        human, gpt = c.conversations
        assert HUMAN.match(human["value"]) and human["value"][len("<image>\n"):] in templates
        assert gpt["value"].strip()
    assert [c.id for c in chats] == [r.id for r in recs if r.id not in skipped]
    assert len({c.conversations[0]["value"] for c in chats}) == 33
    again, _ = vqa.convert_records(recs, 7)
    assert again == chats
    lines = [json.dumps(c.to_json()) for c in chats]
    assert vqa.validate_corpus(lines) == []


def test_skipped_records_counted(tmp_path):
    src = tmp_path / "in.jsonl"
    rows = [
        {"id": "1", "image": "a.jpg", "text": "FINDINGS: Clear. IMPRESSION: ok"},
        {"id": "2", "image": "b.jpg", "text": "IMPRESSION: only"},
        {"id": "3", "image": "c.jpg", "text": "Findings:\nEffusion.\n"},
    ]
    src.write_text("\n".join(json.dumps(r) for r in rows) + "\n")
    out = tmp_path / "out.jsonl"
    counts = vqa.convert_jsonl(src, out, 0)
    assert counts == {"written": 2, "skipped": 1, "skipped_ids": ["2"]}
    written = out.read_text().splitlines()
    assert [json.loads(l)["id"] for l in written] == ["1", "3"]
    assert vqa.validate_corpus(written) == []


def test_duplicate_ids_rejected(tmp_path):
    src = tmp_path / "in.jsonl"
    src.write_text(json.dumps({"id": "1", "image": "a", "text": "FINDINGS: x"}) + "\n"
                   + json.dumps({"id": "1", "image": "b", "text": "FINDINGS: y"}) + "\n")
    with pytest.raises(ValueError):
        vqa.convert_jsonl(src, tmp_path / "o.jsonl", 0)


# ------------------------------------------------------------------ validate_corpus


def _good(i=0):
    return {"id": f"x{i}", "image": "i.png",
            "conversations": [{"from": "human", "value": "<image>\n" + vqa.prompt_templates()[i]},
                              {"from": "gpt", "value": "Clear."}]}


def test_validate_flags_missing_tag():
    bad = _good(1)
    bad["conversations"][0]["value"] = vqa.prompt_templates()[1]
    v = vqa.validate_corpus([json.dumps(_good()), json.dumps(bad)])
    assert len(v) == 1 and v[0].line == 2


def test_validate_flags_empty_answer_and_malformed_json():
    bad = _good(2)
    bad["conversations"][1]["value"] = "  "
    v = vqa.validate_corpus([json.dumps(bad), "{not json", json.dumps(_good(3))])
    assert [x.line for x in v] == [1, 2]
    assert "empty" in v[0].message and "malformed" in v[1].message


def test_validate_flags_unknown_prompt_and_turn_count():
    a = _good(4)
    a["conversations"][0]["value"] = "<image>\nTell me a joke."
    b = _good(5)
    b["conversations"] = b["conversations"][:1]
    v = vqa.validate_corpus([json.dumps(a), json.dumps(b)])
    assert [x.line for x in v] == [1, 2]
