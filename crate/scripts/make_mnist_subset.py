"""Write a class-balanced 4096-image subset of the MNIST 5k sample bundled
with mlxtend as gzip-compressed IDX files. The source rows are sorted by
label, so classes are interleaved round-robin.

    pip download --no-deps -d /tmp/wheels mlxtend
    python3 scripts/make_mnist_subset.py /tmp/wheels/mlxtend-*.whl data/mnist-subset
"""
import glob
import gzip
import struct
import sys
import zipfile

N = 4096


def main(wheel, out_dir):
    with zipfile.ZipFile(glob.glob(wheel)[0]) as z:
        raw = gzip.decompress(z.read("mlxtend/data/data/mnist_5k.csv.gz")).decode()
    all_rows = [list(map(int, map(float, line.split(",")))) for line in raw.splitlines()]
    by_class = [[r for r in all_rows if r[-1] == c] for c in range(10)]
    rows = [by_class[i % 10][i // 10] for i in range(N)]
    pixels = bytes(v for r in rows for v in r[:-1])
    labels = bytes(r[-1] for r in rows)
    images = struct.pack(">IIII", 0x00000803, N, 28, 28) + pixels
    lab = struct.pack(">II", 0x00000801, N) + labels
    # mtime=0 keeps the archives byte-reproducible
    with open(f"{out_dir}/train-images-idx3-ubyte.gz", "wb") as f:
        f.write(gzip.compress(images, mtime=0))
    with open(f"{out_dir}/train-labels-idx1-ubyte.gz", "wb") as f:
        f.write(gzip.compress(lab, mtime=0))


if __name__ == "__main__":
    main(sys.argv[1], sys.argv[2])
