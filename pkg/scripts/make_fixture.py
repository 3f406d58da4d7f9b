"""Regenerate the bundled 70-row FER2013-format fixture."""
import argparse
from pathlib import Path

from emonext.data import synthetic_samples, write_csv

ROOT = Path(__file__).resolve().parents[1]


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", type=Path, default=ROOT / "fixtures" / "fer_mini.csv")
    ap.add_argument("--per-class", type=int, default=10)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    samples = synthetic_samples(args.per_class, args.seed)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    write_csv(args.out, samples)
    print(f"wrote {len(samples)} rows to {args.out}")


if __name__ == "__main__":
    main()
