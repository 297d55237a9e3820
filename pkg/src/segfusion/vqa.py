"""Convert report records into single-turn findings chats.

Input JSONL rows are ``{id, image, text}``; output rows are
``{id, image, style, conversations: [{from: "human", value}, {from: "gpt", value}]}``
where the human value is ``"<image>\\n" + prompt``.
"""

import hashlib
import json
import re
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources

__all__ = [
    "IMAGE_TAG",
    "SkipRecord",
    "ReportRecord",
    "ChatRecord",
    "Violation",
    "prompt_templates",
    "extract_findings",
    "to_single_turn",
    "convert_records",
    "convert_jsonl",
    "validate_corpus",
]

IMAGE_TAG = "<image>"
_FINDINGS = re.compile(r"FINDINGS:(.*?)(?=IMPRESSION:|\Z)", re.IGNORECASE | re.DOTALL)
_HUMAN = re.compile(r"\A<image>\n(.+)\Z", re.DOTALL)


class SkipRecord(Exception):
    """The report has no usable findings section."""


@lru_cache(maxsize=1)
def prompt_templates():
    with resources.files("segfusion.data").joinpath("prompts.json").open(encoding="utf-8") as fh:
        return tuple(json.load(fh))


@dataclass(frozen=True)
class ReportRecord:
    id: str
    image: str
    text: str


@dataclass(frozen=True)
class ChatRecord:
    id: str
    image: str
    conversations: tuple
    style: str = "single_turn"

    def to_json(self):
        return {
            "id": self.id,
            "image": self.image,
            "style": self.style,
            "conversations": [dict(turn) for turn in self.conversations],
        }


@dataclass(frozen=True)
class Violation:
    line: int
    message: str


def extract_findings(text):
    m = _FINDINGS.search(text)
    if m is None:
        raise SkipRecord("no FINDINGS: section")
    body = " ".join(m.group(1).split())
    if not body:
        raise SkipRecord("empty FINDINGS: section")
    return body


def _prompt_index(seed, record_id):
    digest = hashlib.sha256(f"{seed}:{record_id}".encode()).digest()
    return int.from_bytes(digest[:8], "little") % len(prompt_templates())


def to_single_turn(record, seed):
    findings = extract_findings(record.text)
    prompt = prompt_templates()[_prompt_index(seed, record.id)]
    turns = (
        {"from": "human", "value": f"{IMAGE_TAG}\n{prompt}"},
        {"from": "gpt", "value": findings},
    )
    return ChatRecord(record.id, record.image, turns)


def convert_records(records, seed):
    """Returns ``(chats, skipped_ids)``, preserving input order."""
    chats, skipped = [], []
    for rec in records:
        try:
            chats.append(to_single_turn(rec, seed))
        except SkipRecord:
            skipped.append(rec.id)
    return chats, skipped


def convert_jsonl(in_path, out_path, seed):
    with open(in_path, encoding="utf-8") as fh:
        records = [ReportRecord(str(r["id"]), r["image"], r["text"]) for r in map(json.loads, filter(str.strip, fh))]
    ids = [r.id for r in records]
    if len(set(ids)) != len(ids):
        raise ValueError("record ids must be unique")
    chats, skipped = convert_records(records, seed)
    with open(out_path, "w", encoding="utf-8") as fh:
        for c in chats:
            fh.write(json.dumps(c.to_json(), ensure_ascii=False) + "\n")
    return {"written": len(chats), "skipped": len(skipped), "skipped_ids": skipped}


def _check_record(obj, templates):
    problems = []
    for key in ("id", "image", "conversations"):
        if key not in obj:
            problems.append(f"missing field {key!r}")
    conv = obj.get("conversations")
    if not isinstance(conv, list) or len(conv) != 2:
        problems.append("conversations must hold exactly two turns")
        return problems
    human, gpt = conv
    if not isinstance(human, dict) or human.get("from") != "human":
        problems.append("first turn must come from 'human'")
    if not isinstance(gpt, dict) or gpt.get("from") != "gpt":
        problems.append("second turn must come from 'gpt'")
    value = human.get("value", "") if isinstance(human, dict) else ""
    m = _HUMAN.match(value)
    if m is None:
        problems.append("human turn must start with '<image>' followed by a newline and a prompt")
    elif m.group(1) not in templates:
        problems.append("prompt is not one of the findings templates")
    answer = gpt.get("value", "") if isinstance(gpt, dict) else ""
    if not isinstance(answer, str) or not answer.strip():
        problems.append("assistant turn is empty")
    return problems


def validate_corpus(lines):
    """Check every chat invariant; ``lines`` is an iterable of JSONL text lines."""
    templates = set(prompt_templates())
    out = []
    seen = {}
    for no, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as e:
            out.append(Violation(no, f"malformed JSON: {e.msg}"))
            continue
        if not isinstance(obj, dict):
            out.append(Violation(no, "record is not a JSON object"))
            continue
        out.extend(Violation(no, msg) for msg in _check_record(obj, templates))
        rid = obj.get("id")
        if rid in seen:
            out.append(Violation(no, f"duplicate id {rid!r} (first on line {seen[rid]})"))
        else:
            seen[rid] = no
    return out
