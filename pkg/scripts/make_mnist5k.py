"""Write the 5,000-image MNIST subset shipped with mlxtend as IDX files.

The subset holds 500 images per digit. A seeded stratified split keeps 400
per class for training and 100 for testing:

    pip install mlxtend
    python scripts/make_mnist5k.py data/mnist5k
"""

import argparse
import gzip
import os
from pathlib import Path

import numpy as np

from layerwise.data import MNIST_FILES, write_idx


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("out", type=Path)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--test-per-class", type=int, default=100)
    args = parser.parse_args()

    import mlxtend

    src = os.path.join(os.path.dirname(mlxtend.__file__), "data", "data", "mnist_5k.csv.gz")
    with gzip.open(src) as fh:
        table = np.loadtxt(fh, delimiter=",", dtype=np.int64)
    images, labels = table[:, :-1].astype(np.uint8).reshape(-1, 28, 28), table[:, -1]

    rng = np.random.default_rng(args.seed)
    train_idx, test_idx = [], []
    for digit in range(10):
        idx = rng.permutation(np.flatnonzero(labels == digit))
        test_idx.append(idx[: args.test_per_class])
        train_idx.append(idx[args.test_per_class:])
    train_idx = rng.permutation(np.concatenate(train_idx))
    test_idx = rng.permutation(np.concatenate(test_idx))

    args.out.mkdir(parents=True, exist_ok=True)
    for split, idx in (("train", train_idx), ("test", test_idx)):
        img_name, lbl_name = MNIST_FILES[split]
        write_idx(args.out / f"{img_name}.gz", images[idx])
        write_idx(args.out / f"{lbl_name}.gz", labels[idx])
        print(f"{split}: {len(idx)} images")


if __name__ == "__main__":
    main()
