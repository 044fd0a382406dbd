"""Regenerate the shipped synthetic LibSVM fixture."""
import argparse
from pathlib import Path

from mast import data

FIXTURE = Path(__file__).resolve().parents[1] / "src" / "mast" / "fixtures" / "mixed.libsvm"


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--n", type=int, default=2000)
    ap.add_argument("--d", type=int, default=100)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", type=Path, default=FIXTURE)
    args = ap.parse_args()
    ds = data.synthetic_mixed(args.n, args.d, seed=args.seed)
    args.out.write_text(data.serialize_libsvm(ds))
    print(f"wrote {args.out} n={ds.n} d={ds.d} hash={ds.content_hash:016x}")


if __name__ == "__main__":
    main()
