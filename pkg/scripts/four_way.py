"""Run the pipeline comparison over several seeds and print one table.

    python3 scripts/four_way.py --seeds 0 1 2 3 4 --out runs/compare
"""

import argparse
import json
import time
from pathlib import Path

from dpcompress.compare import ComparisonSetup, medians, run_comparison, summary_table


def main():
    ap = argparse.ArgumentParser(description="pipeline comparison on synthetic data")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--out", type=Path, default=Path("runs/compare"))
    ap.add_argument("--epochs", type=float, default=ComparisonSetup.epochs)
    args = ap.parse_args()

    t0 = time.perf_counter()
    rows = run_comparison(ComparisonSetup(epochs=args.epochs), args.seeds, args.out)
    print(summary_table(rows))
    print(f"\n{len(rows)} runs in {time.perf_counter() - t0:.1f} s")
    (args.out / "summary.json").write_text(json.dumps({"medians": medians(rows), "runs": rows}, indent=2) + "\n")


if __name__ == "__main__":
    main()
