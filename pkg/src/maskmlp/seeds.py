"""Deterministic seed derivation.

All randomness in a run flows from one master seed through named
sub-streams, so individual components (data, masks, init, folds) can be
re-seeded independently without disturbing the others.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _label_entropy(label: str) -> int:
    digest = hashlib.sha256(label.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def child_seed(master: int, label: str, *ids: int) -> int:
    """Derive a stable 64-bit seed for the sub-stream named by ``label``/``ids``."""
    seq = np.random.SeedSequence([int(master), _label_entropy(label), *map(int, ids)])
    return int(seq.generate_state(1, dtype=np.uint64)[0])


def sub_rng(master: int, label: str, *ids: int) -> np.random.Generator:
    """Generator seeded from the named sub-stream."""
    return np.random.default_rng(child_seed(master, label, *ids))
