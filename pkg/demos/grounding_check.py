"""Cross-check the findings in a report against segmentation presence.

A finding the report asserts but no mask supports is flagged
``report-only``; that is the row a reader should be sceptical about.

    python3 demos/grounding_check.py
"""
import numpy as np

from segfusion import cli
from segfusion.segstack import MaskStack, class_table


def main():
    table = class_table()
    masks = np.zeros((len(table), 64, 64), np.uint8)
    masks[table.index("Effusion"), 40:60, 4:24] = 1
    masks[table.index("Pneumothorax"), 2:10, 50:60] = 1
    report = "Small left pleural effusion. Bibasilar atelectasis. No pneumothorax."
    print("report:", report, "\n")
    rows = cli.cmd_ground(report, MaskStack.from_array(masks))
    print(cli.format_ground(rows))
    flagged = [r["finding"] for r in rows if r["label"] == "report-only"]
    missed = [r["finding"] for r in rows if r["label"] == "segmentation-only"]
    print("\nunsupported by the masks:", ", ".join(flagged) or "none")
    print("visible but not reported:", ", ".join(missed) or "none")


if __name__ == "__main__":
    main()
