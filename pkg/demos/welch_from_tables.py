"""Recompute significance from summary means and standard deviations.

With only four runs per arm, a difference of a few hundredths of F1 can be
decisive or meaningless depending on the spread. Each row below is a Welch
test computed from summary values alone.

    python3 demos/welch_from_tables.py
"""
from segfusion import stats

ROWS = [
    ("features+segmaps", (0.4149, 0.0034), "two-stage baseline", (0.3872, 0.0037), "greater"),
    ("concatenation", (0.3868, 0.0016), "baseline", (0.3781, 0.0046), "greater"),
    ("addition, alpha=1", (0.3828, 0.0020), "baseline", (0.3781, 0.0046), "greater"),
    ("addition, alpha=0", (0.3726, 0.0015), "baseline", (0.3781, 0.0046), "two"),
    ("superclasses only", (0.4148, 0.0015), "all 212 classes", (0.4149, 0.0034), "two"),
]


def main():
    out = []
    for a, (ma, sa), b, (mb, sb), sided in ROWS:
        r = stats.welch_test(ma, sa, 4, mb, sb, 4, sided)
        out.append({"a": a, "b": b, "sided": sided, "t": r.t, "df": r.df, "p": r.p})
    print(stats.format_table(out))


if __name__ == "__main__":
    main()
