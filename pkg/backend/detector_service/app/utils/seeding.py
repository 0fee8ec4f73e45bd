"""
Stable seed derivation.

Random streams are keyed by content (seed, purpose, video id, frame index)
rather than by call order, so results do not depend on thread scheduling or
on which frames another stream happened to consume.
"""

import hashlib

import numpy as np


def derive_seed(*parts: object) -> int:
    """64-bit integer from a blake2b digest of the parts' string forms."""
    digest = hashlib.blake2b(digest_size=8)
    for part in parts:
        digest.update(str(part).encode("utf-8"))
        digest.update(b"\x1f")
    return int.from_bytes(digest.digest(), "little")


def stream(*parts: object) -> np.random.Generator:
    """Independent generator for the given key."""
    return np.random.default_rng(np.random.SeedSequence(derive_seed(*parts)))


def frame_stream(seed: int, epoch: int, video_id: str, frame_index: int) -> np.random.Generator:
    """Augmentation draws for one frame in one sampling epoch."""
    return stream("augment", seed, epoch, video_id, frame_index)


def content_key(*parts: object) -> str:
    """16 hex digits naming the parts; equal parts give equal keys."""
    return f"{derive_seed(*parts):016x}"
