"""Tabulate worst-case ppm round-trip error over every ADC code.

Writes data/roundtrip_<gas>.csv and prints the bound per gas. The tests read
the LPG bound back from the checked-in table.
"""

import argparse
import csv
import sys
from pathlib import Path

ROOT = Path(__file__).resolve().parents[1]
sys.path.insert(0, str(ROOT / "tests"))

from oracles import SLOPES, roundtrip_table  # noqa: E402


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--lo", type=float, default=300.0)
    ap.add_argument("--hi", type=float, default=8000.0)
    ap.add_argument("--out", type=Path, default=ROOT / "data")
    args = ap.parse_args()
    args.out.mkdir(exist_ok=True)
    for gas in SLOPES:
        rows = roundtrip_table(gas, args.lo, args.hi)
        with open(args.out / f"roundtrip_{gas}.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["code", "ppm_lo", "ppm_hi", "estimate", "worst_rel_err"])
            for c, lo, hi, est, err in rows:
                w.writerow([c, f"{lo:.6f}", f"{hi:.6f}", f"{est:.6f}", f"{err:.9f}"])
        worst = max(rows, key=lambda r: r[4])
        print(f"{gas:8s} codes={len(rows):4d} worst={worst[4]:.6%} at code {worst[0]}")


if __name__ == "__main__":
    main()
