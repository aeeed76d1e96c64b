"""Labeled seed derivation.

All randomness in the pipeline flows from one root seed expanded by component
labels, so adding or reordering parallel work never changes results.
"""

import hashlib


def derive_seed(root: int, *labels) -> int:
    """Deterministic 63-bit child seed for (root, labels...)."""
    h = hashlib.sha256()
    h.update(str(int(root)).encode())
    for label in labels:
        h.update(b"/")
        h.update(str(label).encode())
    return int.from_bytes(h.digest()[:8], "little") >> 1
