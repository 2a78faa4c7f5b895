"""Build an IDX-format MNIST subset from the ``mnist`` npm package.

The npm package ships 10000 real MNIST digits as JSON arrays of pixel
values divided by 255 and rounded to three decimals; rounding back to
8-bit recovers the original bytes exactly.  The digits are shuffled with a
fixed seed and split 8000 / 2000 into train / t10k files.

    npm pack mnist@1.1.0
    python scripts/mnist_from_npm.py mnist-1.1.0.tgz data/mnist
"""

import argparse
import io
import json
import tarfile
from pathlib import Path

import numpy as np

from fgrelu.data import Dataset, write_mnist


def read_digits(src: Path):
    images, labels = [], []
    if src.is_file():
        tar = tarfile.open(src)
        get = lambda d: tar.extractfile(f"package/src/digits/{d}.json").read()
    else:
        get = lambda d: (src / "src" / "digits" / f"{d}.json").read_bytes()
    for d in range(10):
        flat = np.array(json.load(io.BytesIO(get(d)))["data"], dtype=np.float64)
        px = np.round(flat * 255.0)
        assert np.all(np.round(px / 255.0, 3) == flat), "pixel values do not round-trip"
        images.append(px.reshape(-1, 784))
        labels.append(np.full(len(images[-1]), d))
    return np.concatenate(images) / 255.0, np.concatenate(labels)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("source", type=Path, help="npm tarball or extracted package directory")
    ap.add_argument("out", type=Path)
    ap.add_argument("--n-test", type=int, default=2000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    images, labels = read_digits(args.source)
    order = np.random.default_rng(args.seed).permutation(len(labels))
    test_idx, train_idx = order[:args.n_test], order[args.n_test:]
    train = Dataset(images[train_idx], labels[train_idx], "train")
    test = Dataset(images[test_idx], labels[test_idx], "test")
    write_mnist(args.out, train, test, compress=True)
    print(f"wrote {len(train)} train / {len(test)} test digits to {args.out}")


if __name__ == "__main__":
    main()
