"""Stable, labelled seed derivation."""

from __future__ import annotations

import hashlib
import json
from typing import Sequence


def derive_seed(master_seed: int, labels: Sequence[tuple[str, object]]) -> int:
    """64-bit seed from a master seed and a labelled path.

    The path is hashed as canonical JSON with BLAKE2b, so the result is
    the same on every platform and Python version.
    """
    path = [[str(name), value] for name, value in labels]
    blob = json.dumps([int(master_seed), path], sort_keys=True, separators=(",", ":")).encode()
    return int.from_bytes(hashlib.blake2b(blob, digest_size=8).digest(), "big")
