#!/usr/bin/env python3
"""Write the 5000-image MNIST sample bundled with the mlxtend wheel as IDX files.

    pip download --no-deps -d /tmp/wheels mlxtend
    python3 tools/mnist5k_to_idx.py /tmp/wheels/mlxtend-*.whl data/mnist5k

Produces images-idx3-ubyte (magic 0x00000803) and labels-idx1-ubyte
(magic 0x00000801). 500 images per digit, in the wheel's row order.
"""
import gzip
import io
import struct
import sys
import zipfile
from pathlib import Path

import numpy as np


def main() -> int:
    if len(sys.argv) != 3:
        print(__doc__, file=sys.stderr)
        return 2
    wheel, out_dir = Path(sys.argv[1]), Path(sys.argv[2])
    raw = zipfile.ZipFile(wheel).read("mlxtend/data/data/mnist_5k.csv.gz")
    rows = np.loadtxt(io.BytesIO(gzip.decompress(raw)), delimiter=",")
    pixels = rows[:, :-1].astype(np.uint8)
    labels = rows[:, -1].astype(np.uint8)
    n = pixels.shape[0]

    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "images-idx3-ubyte", "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, n, 28, 28))
        f.write(pixels.tobytes())
    with open(out_dir / "labels-idx1-ubyte", "wb") as f:
        f.write(struct.pack(">II", 0x00000801, n))
        f.write(labels.tobytes())
    print(f"wrote {n} images to {out_dir}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
