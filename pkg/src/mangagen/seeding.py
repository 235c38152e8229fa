"""Single-seed randomness discipline.

Every stochastic stage derives its own seed from one root seed, a stream name
and a counter, so runs reproduce end to end and training can resume from a
step counter without serializing generator internals.
"""

from __future__ import annotations

import hashlib

__all__ = ["derive_seed"]


def derive_seed(root_seed: int, stream: str, counter: int = 0) -> int:
    """Deterministic 63-bit sub-seed for (root, stream, counter)."""
    digest = hashlib.sha256(f"{root_seed}:{stream}:{counter}".encode()).digest()
    return int.from_bytes(digest[:8], "little") % (2**63)
