"""Writer for the LRMMFEAT binary feature file.

Layout (all integers little-endian uint32): 8-byte magic "LRMMFEAT",
version, record count, vector dim, then per record an id length, the
UTF-8 id bytes, and dim little-endian float32 values. Records appear in
write order and the file embeds nothing run-dependent, so re-running an
extraction over identical inputs reproduces the file byte for byte.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"LRMMFEAT"
VERSION = 1


def write_features(path, records: list[tuple[str, np.ndarray]], dim: int):
    """Write (item_id, vector) pairs in the given order."""
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(records)))
        f.write(struct.pack("<I", dim))
        for item_id, vec in records:
            v = np.asarray(vec)
            if v.shape != (dim,):
                raise ValueError(
                    f"feature vector for {item_id!r} has shape {v.shape}, expected ({dim},)"
                )
            raw = item_id.encode("utf-8")
            f.write(struct.pack("<I", len(raw)))
            f.write(raw)
            f.write(v.astype("<f4").tobytes())
