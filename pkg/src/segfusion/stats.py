"""Repeated-run summaries and Welch's unequal-variance t-test.

The Student-t CDF is evaluated through the regularized incomplete beta
function, computed with a modified-Lentz continued fraction.
"""

import json
import math
from dataclasses import dataclass

__all__ = [
    "RunGroup",
    "TestResult",
    "DegenerateTestError",
    "summarize",
    "betainc",
    "t_cdf",
    "t_sf",
    "welch_test",
    "welch_from_groups",
    "compare_json",
    "format_table",
]

_TINY = 1e-300
_EPS = 1e-15
_MAX_ITER = 500


class DegenerateTestError(ValueError):
    """Both groups have zero spread; the t statistic is undefined."""


@dataclass(frozen=True)
class RunGroup:
    label: str
    scores: tuple

    def __post_init__(self):
        object.__setattr__(self, "scores", tuple(float(s) for s in self.scores))
        if any(not math.isfinite(s) for s in self.scores):
            raise ValueError(f"group {self.label!r} has non-finite scores")


@dataclass(frozen=True)
class TestResult:
    t: float
    df: float
    p: float
    sided: str


def summarize(group, ddof=1):
    """Mean and standard deviation (sample std by default)."""
    xs = group.scores if isinstance(group, RunGroup) else tuple(float(v) for v in group)
    n = len(xs)
    if n < 2:
        raise ValueError(f"need at least 2 scores, got {n}")
    mean = math.fsum(xs) / n
    var = math.fsum((x - mean) ** 2 for x in xs) / (n - ddof)
    return {"mean": mean, "std": math.sqrt(var), "n": n}


def _betacf(a, b, x):
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = 1.0 / (d if abs(d) > _TINY else _TINY)
    h = d
    for m in range(1, _MAX_ITER + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > _TINY else _TINY)
        c = 1.0 + aa / c
        c = c if abs(c) > _TINY else _TINY
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > _TINY else _TINY)
        c = 1.0 + aa / c
        c = c if abs(c) > _TINY else _TINY
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _EPS:
            return h
    raise ArithmeticError(f"incomplete beta continued fraction did not converge (a={a}, b={b}, x={x})")


def betainc(a, b, x):
    """Regularized incomplete beta ``I_x(a, b)`` for ``a, b > 0``, ``0 <= x <= 1``."""
    if not 0.0 <= x <= 1.0:
        raise ValueError(f"x must lie in [0, 1], got {x}")
    if x == 0.0 or x == 1.0:
        return x
    log_front = (
        math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b) + a * math.log(x) + b * math.log1p(-x)
    )
    front = math.exp(log_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def _tail(t, df):
    # P(T > |t|)
    return 0.5 * betainc(df / 2.0, 0.5, df / (df + t * t))


def t_cdf(t, df):
    if df <= 0:
        raise ValueError("degrees of freedom must be positive")
    if t == 0:
        return 0.5
    tail = _tail(t, df)
    return 1.0 - tail if t > 0 else tail


def t_sf(t, df):
    """Upper tail ``P(T > t)``, accurate for large positive ``t``."""
    if df <= 0:
        raise ValueError("degrees of freedom must be positive")
    if t == 0:
        return 0.5
    tail = _tail(t, df)
    return tail if t > 0 else 1.0 - tail


def welch_test(m1, s1, n1, m2, s2, n2, sided="greater"):
    """Welch's t-test from summary statistics.

    ``sided="greater"`` tests mean1 > mean2; ``"two"`` is the symmetric
    two-sided test.
    """
    if sided not in ("greater", "two"):
        raise ValueError(f"sided must be 'greater' or 'two', got {sided!r}")
    if n1 < 2 or n2 < 2:
        raise ValueError("each group needs at least 2 runs")
    if s1 < 0 or s2 < 0:
        raise ValueError("standard deviations must be non-negative")
    v1, v2 = s1 * s1 / n1, s2 * s2 / n2
    se2 = v1 + v2
    if se2 == 0:
        raise DegenerateTestError("both groups have zero variance")
    t = (m1 - m2) / math.sqrt(se2)
    df = se2 * se2 / (v1 * v1 / (n1 - 1) + v2 * v2 / (n2 - 1))
    if sided == "greater":
        p = t_sf(t, df)
    else:
        p = min(1.0, 2.0 * _tail(t, df))
    return TestResult(t, df, p, sided)


def welch_from_groups(a, b, sided="greater", ddof=1):
    sa, sb = summarize(a, ddof), summarize(b, ddof)
    return welch_test(sa["mean"], sa["std"], sa["n"], sb["mean"], sb["std"], sb["n"], sided)


def compare_json(spec):
    """Run every comparison of ``{"groups": [...], "comparisons": [[a, b, sided], ...]}``."""
    if isinstance(spec, str):
        spec = json.loads(spec)
    groups = {g["label"]: RunGroup(g["label"], g["scores"]) for g in spec["groups"]}
    rows = []
    for a, b, sided in spec["comparisons"]:
        for lab in (a, b):
            if lab not in groups:
                raise KeyError(f"unknown group {lab!r}")
        r = welch_from_groups(groups[a], groups[b], sided)
        rows.append({"a": a, "b": b, "sided": sided, "t": r.t, "df": r.df, "p": r.p})
    return rows


def format_table(rows):
    head = f"{'A':<24} {'B':<24} {'sided':<7} {'t':>9} {'df':>7} {'p':>10}"
    lines = [head, "-" * len(head)]
    for r in rows:
        lines.append(
            f"{r['a']:<24} {r['b']:<24} {r['sided']:<7} {r['t']:>9.4f} {r['df']:>7.3f} {r['p']:>10.3g}"
        )
    return "\n".join(lines)
