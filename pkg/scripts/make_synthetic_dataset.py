"""Write a raw synthetic dataset (images/, masks/, unlabeled/) ready for `dfutissue prepare`."""
import argparse

from dfutissue.dataset_io import write_raw_dataset
from dfutissue.synthetic import occurrence_fixture, synthetic_unlabeled


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("out")
    p.add_argument("--labeled", type=int, default=110)
    p.add_argument("--unlabeled", type=int, default=100)
    p.add_argument("--size", type=int, nargs=2, default=[96, 128], metavar=("H", "W"))
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()
    pairs = occurrence_fixture(args.seed, tuple(args.size), args.labeled)
    unlabeled = synthetic_unlabeled(args.unlabeled, args.seed + 1, tuple(args.size))
    write_raw_dataset(pairs, args.out, unlabeled)
    print(f"wrote {len(pairs)} labeled and {len(unlabeled)} unlabeled images to {args.out}")


if __name__ == "__main__":
    main()
