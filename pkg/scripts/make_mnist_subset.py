"""Write a 5000-image MNIST sample as IDX files (4000 train / 1000 test).

The sample ships inside the ``mlxtend`` wheel as ``mnist_5k.csv.gz``
(784 pixel columns followed by the label). The wheel is fetched with
``pip download`` so nothing needs to be installed.

    python scripts/make_mnist_subset.py data/mnist5k
"""
import argparse
import glob
import gzip
import io
import subprocess
import sys
import tempfile
import zipfile
from pathlib import Path

import numpy as np

from pcnet.data import encode_idx_images, encode_idx_labels

CSV_MEMBER = "mlxtend/data/data/mnist_5k.csv.gz"


def read_sample(wheel: str = None) -> tuple:
    with tempfile.TemporaryDirectory() as tmp:
        if wheel is None:
            subprocess.run(
                [sys.executable, "-m", "pip", "download", "mlxtend==0.24.0", "--no-deps", "-q", "-d", tmp],
                check=True,
            )
            wheel = glob.glob(f"{tmp}/mlxtend-*.whl")[0]
        raw = gzip.decompress(zipfile.ZipFile(wheel).read(CSV_MEMBER))
    table = np.loadtxt(io.BytesIO(raw), delimiter=",", dtype=np.int64)
    return table[:, :-1].astype(np.uint8).reshape(-1, 28, 28), table[:, -1].astype(np.uint8)


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("out_dir")
    parser.add_argument("--wheel", help="use an already downloaded mlxtend wheel")
    parser.add_argument("--n-test", type=int, default=1000)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args(argv)

    images, labels = read_sample(args.wheel)
    order = np.random.default_rng(args.seed).permutation(len(labels))
    images, labels = images[order], labels[order]
    split = len(labels) - args.n_test
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {
        "train-images-idx3-ubyte.gz": encode_idx_images(images[:split]),
        "train-labels-idx1-ubyte.gz": encode_idx_labels(labels[:split]),
        "t10k-images-idx3-ubyte.gz": encode_idx_images(images[split:]),
        "t10k-labels-idx1-ubyte.gz": encode_idx_labels(labels[split:]),
    }
    for name, payload in files.items():
        # mtime=0 keeps the output byte-stable
        (out / name).write_bytes(gzip.compress(payload, mtime=0))
    print(f"wrote {split} train / {len(labels) - split} test images to {out}")


if __name__ == "__main__":
    main()
