#!/usr/bin/env python3
# Copyright 2026 The qtrain Authors.
#
# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
#     http://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.
"""Converts the digits shipped in the `mnist` npm package into gzipped IDX.

Usage:
    npm pack mnist && tar xzf mnist-*.tgz
    python3 tools/make_mnist_subset.py package/src/digits data/mnist10k

The package stores 1001 MNIST digits per class as flat [0, 1] floats rounded
to three decimals; pixels are restored with round(v * 255).
"""
import gzip
import json
import pathlib
import struct
import sys


def main(src: str, dst: str) -> None:
    src_dir = pathlib.Path(src)
    out_dir = pathlib.Path(dst)
    out_dir.mkdir(parents=True, exist_ok=True)
    images = bytearray()
    labels = bytearray()
    count = 0
    # Interleave classes so a prefix of the file is class balanced.
    per_class = []
    for digit in range(10):
        flat = json.loads((src_dir / f"{digit}.json").read_text())["data"]
        assert len(flat) % 784 == 0
        per_class.append([flat[i:i + 784] for i in range(0, len(flat), 784)])
    depth = max(len(c) for c in per_class)
    for i in range(depth):
        for digit in range(10):
            if i < len(per_class[digit]):
                images.extend(min(255, max(0, round(v * 255))) for v in per_class[digit][i])
                labels.append(digit)
                count += 1
    img_header = struct.pack(">IIII", 0x00000803, count, 28, 28)
    lbl_header = struct.pack(">II", 0x00000801, count)
    with gzip.GzipFile(out_dir / "images-idx3-ubyte.gz", "wb", mtime=0) as f:
        f.write(img_header + bytes(images))
    with gzip.GzipFile(out_dir / "labels-idx1-ubyte.gz", "wb", mtime=0) as f:
        f.write(lbl_header + bytes(labels))
    print(f"wrote {count} samples to {out_dir}")


if __name__ == "__main__":
    if len(sys.argv) != 3:
        sys.exit(__doc__)
    main(sys.argv[1], sys.argv[2])
