"""Deterministic seed derivation.

Every stochastic component (generator patients, MC draws, dropout, batch
shuffles, bootstrap resamples) derives its seed from a root seed plus a
string/int path, so runs are reproducible without threading RNG objects
through the whole call stack.
"""

import hashlib


def derive(*parts) -> int:
    """Hash a tuple of ints/strings into a stable 63-bit seed."""
    key = "\x1f".join(str(p) for p in parts).encode("utf-8")
    digest = hashlib.sha256(key).digest()
    return int.from_bytes(digest[:8], "little") & 0x7FFF_FFFF_FFFF_FFFF
