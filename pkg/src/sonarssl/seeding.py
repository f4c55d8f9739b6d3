"""Deterministic derivation of independent RNG streams from a master seed."""

import hashlib


def derive_seed(*parts: "int | str") -> int:
    """Hash a tuple of stream labels into a stable 63-bit seed.

    Used wherever a run needs an independent, reproducible stream keyed by
    structured coordinates, e.g. ``derive_seed(run_seed, "aug", patch_index,
    view_index, epoch)`` or ``derive_seed(run_seed, "slices", step)``.  The
    mapping is platform-independent (blake2b of the '/'-joined decimal/text
    parts), so runs reproduce across machines.
    """
    key = "/".join(str(p) for p in parts).encode()
    h = hashlib.blake2b(key, digest_size=8)
    return int.from_bytes(h.digest(), "little") >> 1
