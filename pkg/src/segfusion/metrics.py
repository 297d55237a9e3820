"""Report-generation metrics: BLEU, ROUGE-L, METEOR-lite, CIDEr-D and CE.

All corpus functions take parallel lists of candidate and reference
reports (strings or token lists), one reference per candidate.
"""

import json
import math
import re
import string
from collections import Counter
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources

__all__ = [
    "ONTOLOGY",
    "TokenizedReport",
    "tokenize",
    "bleu",
    "rouge_l",
    "meteor_lite",
    "stem",
    "cider_d",
    "keyword_labeler",
    "ce_scores",
    "evaluate_corpus",
    "format_summary",
]

ONTOLOGY = (
    "Atelectasis",
    "Cardiomegaly",
    "Consolidation",
    "Edema",
    "Enlarged Cardiomediastinum",
    "Fracture",
    "Lung Lesion",
    "Lung Opacity",
    "No Finding",
    "Pleural Effusion",
    "Pleural Other",
    "Pneumonia",
    "Pneumothorax",
    "Support Devices",
)
NO_FINDING = ONTOLOGY.index("No Finding")

_PUNCT = string.punctuation


@dataclass(frozen=True)
class TokenizedReport:
    tokens: tuple
    text: str

    def __len__(self):
        return len(self.tokens)

    def __iter__(self):
        return iter(self.tokens)


def tokenize(text):
    """Lowercase, split on whitespace, strip edge punctuation.

    Tokens made only of punctuation (a standalone ``-``) are kept as-is.
    """
    toks = []
    for raw in text.lower().split():
        t = raw.strip(_PUNCT)
        if t:
            toks.append(t)
        elif raw == "-":
            toks.append(raw)
    return TokenizedReport(tuple(toks), text)


def _tokens(x):
    if isinstance(x, str):
        return tokenize(x).tokens
    return tuple(x)


def _corpus(cands, refs):
    cands = [_tokens(c) for c in cands]
    refs = [_tokens(r) for r in refs]
    if not cands:
        raise ValueError("empty corpus")
    if len(cands) != len(refs):
        raise ValueError(f"{len(cands)} candidates vs {len(refs)} references")
    return cands, refs


def _ngrams(toks, n):
    return Counter(tuple(toks[i : i + n]) for i in range(len(toks) - n + 1))


def bleu(cands, refs, max_n=4):
    """Corpus BLEU, uniform weights, no smoothing."""
    cands, refs = _corpus(cands, refs)
    log_p = 0.0
    for n in range(1, max_n + 1):
        clipped = total = 0
        for c, r in zip(cands, refs):
            cn, rn = _ngrams(c, n), _ngrams(r, n)
            clipped += sum(min(k, rn[g]) for g, k in cn.items())
            total += sum(cn.values())
        if clipped == 0:
            return 0.0
        log_p += math.log(clipped / total) / max_n
    c_len = sum(map(len, cands))
    r_len = sum(map(len, refs))
    bp = 1.0 if c_len > r_len else math.exp(1.0 - r_len / c_len)
    return bp * math.exp(log_p)


def _lcs(a, b):
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(cands, refs, beta=1.2):
    cands, refs = _corpus(cands, refs)
    scores = []
    for c, r in zip(cands, refs):
        if not c or not r:
            scores.append(1.0 if c == r else 0.0)
            continue
        l = _lcs(c, r)
        if l == 0:
            scores.append(0.0)
            continue
        p, rec = l / len(c), l / len(r)
        scores.append((1 + beta**2) * p * rec / (rec + beta**2 * p))
    return sum(scores) / len(scores)


_SUFFIXES = (
    ("ational", "ate"),
    ("ations", "ate"),
    ("ation", "ate"),
    ("nesses", ""),
    ("ness", ""),
    ("ments", ""),
    ("ment", ""),
    ("ingly", ""),
    ("ings", ""),
    ("ing", ""),
    ("edly", ""),
    ("ies", "y"),
    ("ied", "y"),
    ("ed", ""),
    ("es", ""),
    ("ly", ""),
    ("s", ""),
)


def stem(word):
    """Crude suffix stripper; keeps at least three characters of stem."""
    if word.endswith("ss"):
        return word
    for suf, rep in _SUFFIXES:
        if word.endswith(suf) and len(word) - len(suf) >= 3:
            return word[: -len(suf)] + rep
    return word


def _align(c, r):
    """Exact matches first, then stem matches; left-to-right greedy."""
    pairs = {}
    used = set()
    for key in (lambda w: w, stem):
        for i, w in enumerate(c):
            if i in pairs:
                continue
            kw = key(w)
            for j, v in enumerate(r):
                if j not in used and key(v) == kw:
                    pairs[i] = j
                    used.add(j)
                    break
    return sorted(pairs.items())


def _chunks(pairs):
    chunks = 0
    prev = None
    for i, j in pairs:
        if prev is None or i != prev[0] + 1 or j != prev[1] + 1:
            chunks += 1
        prev = (i, j)
    return chunks


def meteor_lite(cands, refs, alpha=0.9, gamma=0.5, penalty_exp=3.0):
    """Exact + stem unigram METEOR without synonym matching; mean of pair scores."""
    cands, refs = _corpus(cands, refs)
    scores = []
    for c, r in zip(cands, refs):
        pairs = _align(c, r)
        m = len(pairs)
        if m == 0:
            scores.append(0.0)
            continue
        p, rec = m / len(c), m / len(r)
        f = p * rec / (alpha * p + (1 - alpha) * rec)
        pen = gamma * (_chunks(pairs) / m) ** penalty_exp
        scores.append(f * (1 - pen))
    return sum(scores) / len(scores)


def cider_d(cands, refs, n=4, sigma=6.0):
    """CIDEr-D with document frequencies taken from the reference corpus.

    n-grams absent from every reference get ``df = 1`` (as in the common
    reference scorer), so the IDF stays finite.
    """
    cands, refs = _corpus(cands, refs)
    N = len(refs)
    if N < 2:
        raise ValueError("CIDEr-D needs at least two reference documents for IDF")
    log_n = math.log(N)
    df = Counter()
    for r in refs:
        for k in range(1, n + 1):
            df.update(_ngrams(r, k).keys())

    def vecs(toks):
        out = []
        for k in range(1, n + 1):
            v = {g: tf * (log_n - math.log(max(1, df[g]))) for g, tf in _ngrams(toks, k).items()}
            out.append((v, math.sqrt(sum(x * x for x in v.values()))))
        return out

    total = 0.0
    for c, r in zip(cands, refs):
        vc, vr = vecs(c), vecs(r)
        delta = len(c) - len(r)
        gauss = math.exp(-(delta**2) / (2 * sigma**2))
        s = 0.0
        for (hc, nc), (hr, nr) in zip(vc, vr):
            if nc == 0 or nr == 0:
                continue
            dot = sum(min(x, hr[g]) * hr[g] for g, x in hc.items() if g in hr)
            s += dot / (nc * nr) * gauss
        total += 10.0 * s / n
    return total / len(cands)


@lru_cache(maxsize=1)
def _lexicon():
    with resources.files("segfusion.data").joinpath("lexicon.json").open(encoding="utf-8") as fh:
        lex = json.load(fh)
    pats = {}
    for finding, phrases in lex["findings"].items():
        if phrases:
            alt = "|".join(re.escape(p) for p in sorted(phrases, key=len, reverse=True))
            pats[finding] = re.compile(rf"\b(?:{alt})\b")
    cues = "|".join(re.escape(c) for c in lex["negation_cues"])
    return pats, re.compile(rf"\b(?:{cues})\b")


_SENTENCE = re.compile(r"[.!?;\n]+")


def keyword_labeler(text):
    """14-finding presence vector from lexicon matches.

    A mention counts as positive unless a negation cue occurs earlier in the
    same sentence. "No Finding" is positive iff every other finding is not.
    """
    pats, neg = _lexicon()
    out = [False] * len(ONTOLOGY)
    for sent in _SENTENCE.split(text.lower()):
        for k, finding in enumerate(ONTOLOGY):
            pat = pats.get(finding)
            if pat is None or out[k]:
                continue
            for m in pat.finditer(sent):
                if not neg.search(sent, 0, m.start()):
                    out[k] = True
                    break
    out[NO_FINDING] = not any(v for k, v in enumerate(out) if k != NO_FINDING)
    return tuple(out)


def ce_scores(preds, golds):
    """Micro-averaged precision/recall/F1 over every (report, finding) decision."""
    if len(preds) != len(golds):
        raise ValueError(f"{len(preds)} predictions vs {len(golds)} gold vectors")
    if not preds:
        raise ValueError("empty corpus")
    tp = fp = fn = 0
    for p, g in zip(preds, golds):
        if len(p) != len(ONTOLOGY) or len(g) != len(ONTOLOGY):
            raise ValueError("CE vectors must have 14 entries")
        for a, b in zip(p, g):
            tp += a and b
            fp += a and not b
            fn += b and not a
    prec = tp / (tp + fp) if tp + fp else 0.0
    rec = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
    return {"precision": prec, "recall": rec, "f1": f1}


def evaluate_corpus(cands, refs, labeler=keyword_labeler):
    """All metrics in the JSON output layout."""
    preds = [labeler(c if isinstance(c, str) else " ".join(c)) for c in cands]
    golds = [labeler(r if isinstance(r, str) else " ".join(r)) for r in refs]
    return {
        "bleu1": bleu(cands, refs, 1),
        "bleu4": bleu(cands, refs, 4),
        "rougeL": rouge_l(cands, refs),
        "meteor": meteor_lite(cands, refs),
        "ciderD": cider_d(cands, refs),
        "ce": ce_scores(preds, golds),
    }


def format_summary(summary):
    """JSON text with every number written as fixed 6-decimal."""

    def emit(x, indent):
        pad = " " * indent
        if isinstance(x, dict):
            items = [f'{pad} "{k}": {emit(v, indent + 1).lstrip()}' for k, v in sorted(x.items())]
            return pad + "{\n" + ",\n".join(items) + "\n" + pad + "}"
        return f"{pad}{x:.6f}"

    return emit(summary, 0)
