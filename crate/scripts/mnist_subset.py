"""Write a 2000/3000 MNIST train/test split in IDX format.

Source is the 5000-image sample shipped inside the mlxtend wheel
(mlxtend/data/data/mnist_5k.csv.gz: 784 pixel columns then the label).

    python3 scripts/mnist_subset.py --wheel mlxtend-0.24.0-py3-none-any.whl --out data/mnist
"""

import argparse
import gzip
import pathlib
import random
import struct
import zipfile

MEMBER = "mlxtend/data/data/mnist_5k.csv.gz"


def write_images(path, rows):
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, len(rows), 28, 28))
        for pixels, _ in rows:
            f.write(bytes(pixels))


def write_labels(path, rows):
    with open(path, "wb") as f:
        f.write(struct.pack(">II", 0x00000801, len(rows)))
        f.write(bytes(label for _, label in rows))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--wheel", required=True)
    ap.add_argument("--out", default="data/mnist")
    ap.add_argument("--train", type=int, default=2000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    text = gzip.decompress(zipfile.ZipFile(args.wheel).read(MEMBER)).decode()
    rows = []
    for line in text.splitlines():
        values = [int(float(v)) for v in line.split(",")]
        rows.append((values[:784], values[784]))
    random.Random(args.seed).shuffle(rows)

    out = pathlib.Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train, test = rows[: args.train], rows[args.train :]
    write_images(out / "train-images-idx3-ubyte", train)
    write_labels(out / "train-labels-idx1-ubyte", train)
    write_images(out / "test-images-idx3-ubyte", test)
    write_labels(out / "test-labels-idx1-ubyte", test)
    print(f"{len(train)} train and {len(test)} test images in {out}")


if __name__ == "__main__":
    main()
