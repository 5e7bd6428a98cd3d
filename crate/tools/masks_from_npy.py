#!/usr/bin/env python3
"""Convert a stack of boolean masks to the BDGP-MASKS JSON format.

Accepts a .npy file holding a (n_masks, n_rows, n_cols) boolean (or 0/1)
array, or a .npz archive whose arrays are individual (n_rows, n_cols)
masks. This is the bridge from any external segmenter: export its masks
as numpy arrays and run this script.

    python3 tools/masks_from_npy.py segments.npy masks.json

The output encodes each mask as row-major run-length counts alternating
(0-run, 1-run) starting with a 0-run and summing to n_rows * n_cols.
"""

import json
import sys

import numpy as np


def rle_encode(mask):
    flat = np.asarray(mask, dtype=bool).ravel()
    runs = []
    current = False  # encoding starts with a 0-run
    run = 0
    for bit in flat:
        if bit == current:
            run += 1
        else:
            runs.append(run)
            current = bit
            run = 1
    runs.append(run)
    return runs


def load_masks(path):
    if path.endswith(".npz"):
        archive = np.load(path)
        return [archive[name] for name in sorted(archive.files)]
    array = np.load(path)
    if array.ndim == 2:
        return [array]
    if array.ndim == 3:
        return list(array)
    raise SystemExit(f"expected a 2-D or 3-D array, got shape {array.shape}")


def main():
    if len(sys.argv) != 3:
        raise SystemExit(__doc__)
    masks = load_masks(sys.argv[1])
    if not masks:
        raise SystemExit("no masks found in the input")
    n_rows, n_cols = masks[0].shape
    for i, m in enumerate(masks):
        if m.shape != (n_rows, n_cols):
            raise SystemExit(f"mask {i} has shape {m.shape}, expected {(n_rows, n_cols)}")
    document = {
        "magic": "BDGP-MASKS",
        "version": 1,
        "n_rows": int(n_rows),
        "n_cols": int(n_cols),
        "masks": [{"rle": rle_encode(m)} for m in masks],
    }
    with open(sys.argv[2], "w") as handle:
        json.dump(document, handle)
    print(f"wrote {len(masks)} masks ({n_rows}x{n_cols}) to {sys.argv[2]}")


if __name__ == "__main__":
    main()
