"""Stable, order-independent random substreams keyed by (master seed, labels)."""

import hashlib

import numpy as np


def stream_seed(master_seed: int, *keys) -> int:
    """64-bit seed from SHA-256 of the master seed and string keys."""
    text = "\x1f".join([str(int(master_seed))] + [str(k) for k in keys])
    return int.from_bytes(hashlib.sha256(text.encode("utf-8")).digest()[:8], "little")


def rng_for(master_seed: int, *keys) -> np.random.Generator:
    return np.random.default_rng(stream_seed(master_seed, *keys))
