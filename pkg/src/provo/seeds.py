"""Deterministic seed derivation.

Every run takes a single master seed; all other randomness (per-subject
masks, per-stage weight init, shuffling, phantom anatomy) is derived from
it by hashing the master seed together with a string path of tags. The
scheme is stable across platforms and Python versions.
"""

import hashlib


def derive_seed(master: int, *tags) -> int:
    """Derive a 32-bit sub-seed from a master seed and a tag path.

    derive_seed(7, "mask", "sub003") always returns the same value, and
    distinct tag paths give independent streams for practical purposes.
    """
    key = str(int(master)) + "/" + "/".join(str(t) for t in tags)
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "little")
