"""Deliberately naive reference implementations used as test oracles.

Written from the metric definitions without sharing code with the
library, except the suffix stemmer, which is part of the METEOR-lite
definition rather than its algorithm.
"""

import itertools
import math
import re
from functools import lru_cache

import numpy as np

from segfusion.metrics import stem


def toks(text):
    out = []
    for w in text.lower().split():
        core = re.sub(r"^[^\w]+|[^\w]+$", "", w)
        if core:
            out.append(core)
        elif w == "-":
            out.append("-")
    return out


def grams(seq, n):
    return [tuple(seq[i : i + n]) for i in range(len(seq) - n + 1)]


def count(items):
    d = {}
    for x in items:
        d[x] = d.get(x, 0) + 1
    return d


def bleu(cands, refs, max_n):
    C = [toks(c) for c in cands]
    R = [toks(r) for r in refs]
    precisions = []
    for n in range(1, max_n + 1):
        num = den = 0
        for c, r in zip(C, R):
            rc = count(grams(r, n))
            for g, k in count(grams(c, n)).items():
                num += min(k, rc.get(g, 0))
                den += k
        precisions.append(num / den if den else 0.0)
    if min(precisions) == 0:
        return 0.0
    c_len = sum(len(c) for c in C)
    r_len = sum(len(r) for r in R)
    bp = math.exp(1 - r_len / c_len) if c_len < r_len else 1.0
    return bp * math.prod(precisions) ** (1.0 / max_n)


def lcs(a, b):
    @lru_cache(maxsize=None)
    def go(i, j):
        if i == len(a) or j == len(b):
            return 0
        if a[i] == b[j]:
            return 1 + go(i + 1, j + 1)
        return max(go(i + 1, j), go(i, j + 1))

    return go(0, 0)


def rouge_l(cands, refs, beta=1.2):
    scores = []
    for c, r in zip(cands, refs):
        c, r = toks(c), toks(r)
        l = lcs(tuple(c), tuple(r)) if c and r else 0
        if l == 0:
            scores.append(1.0 if not c and not r else 0.0)
            continue
        P, Rc = l / len(c), l / len(r)
        scores.append((1 + beta**2) * P * Rc / (Rc + beta**2 * P))
    return sum(scores) / len(scores)


def meteor(cands, refs):
    scores = []
    for c, r in zip(cands, refs):
        c, r = toks(c), toks(r)
        match = [None] * len(c)
        taken = [False] * len(r)
        for f in (lambda w: w, stem):
            for i in range(len(c)):
                if match[i] is not None:
                    continue
                j = next((j for j in range(len(r)) if not taken[j] and f(r[j]) == f(c[i])), None)
                if j is not None:
                    match[i] = j
                    taken[j] = True
        pairs = [(i, j) for i, j in enumerate(match) if j is not None]
        m = len(pairs)
        if m == 0:
            scores.append(0.0)
            continue
        chunks = 1 + sum(1 for (i0, j0), (i1, j1) in zip(pairs, pairs[1:]) if not (i1 == i0 + 1 and j1 == j0 + 1))
        P, Rc = m / len(c), m / len(r)
        F = 10 * P * Rc / (Rc + 9 * P)
        scores.append(F * (1 - 0.5 * (chunks / m) ** 3))
    return sum(scores) / len(scores)


def cider_d(cands, refs, sigma=6.0):
    C = [toks(c) for c in cands]
    R = [toks(r) for r in refs]
    N = len(R)
    total = 0.0
    for c, r in zip(C, R):
        per_n = []
        for n in range(1, 5):
            def vec(seq):
                v = {}
                for g, tf in count(grams(seq, n)).items():
                    df = sum(1 for doc in R if g in grams(doc, n))
                    v[g] = tf * math.log(N / max(df, 1))
                return v

            vc, vr = vec(c), vec(r)
            nc = math.sqrt(sum(x * x for x in vc.values()))
            nr = math.sqrt(sum(x * x for x in vr.values()))
            if nc == 0 or nr == 0:
                per_n.append(0.0)
                continue
            dot = sum(min(vc[g], vr[g]) * vr[g] for g in vc if g in vr)
            per_n.append(dot / (nc * nr) * math.exp(-((len(c) - len(r)) ** 2) / (2 * sigma**2)))
        total += 10 * sum(per_n) / 4
    return total / len(C)


def conv1d(x, K, bias, stride=1, pad=0):
    x = np.pad(np.asarray(x, float), ((0, 0), (pad, pad)))
    c_out, c_in, k = K.shape
    L_out = (x.shape[1] - k) // stride + 1
    out = np.zeros((c_out, L_out))
    for o in range(c_out):
        for t in range(L_out):
            s = bias[o]
            for i in range(c_in):
                for j in range(k):
                    s += x[i, t * stride + j] * K[o, i, j]
            out[o, t] = s
    return out


def avg_pool1d(x, out_len):
    L = x.shape[-1]
    cols = []
    for i in range(out_len):
        lo = math.floor(i * L / out_len)
        hi = math.ceil((i + 1) * L / out_len)
        cols.append(x[..., lo:hi].mean(axis=-1))
    return np.stack(cols, axis=-1)


def avg_pool2d(x, g):
    H, W = x.shape[-2:]
    out = np.zeros(x.shape[:-2] + (g, g))
    for i, j in itertools.product(range(g), range(g)):
        r0, r1 = math.floor(i * H / g), math.ceil((i + 1) * H / g)
        c0, c1 = math.floor(j * W / g), math.ceil((j + 1) * W / g)
        out[..., i, j] = x[..., r0:r1, c0:c1].mean(axis=(-2, -1))
    return out
