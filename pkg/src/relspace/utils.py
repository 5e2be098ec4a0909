"""Seed derivation and canonical serialization helpers.

All randomness in the package flows from one integer seed.  Module-level
consumers derive independent streams with `derive_rng(seed, *labels)`:
the labels (strings or ints) are hashed with crc32 and fed to numpy's
SeedSequence as the spawn key, so every (seed, label path) pair names one
reproducible stream and streams for different label paths are independent.
"""

import json
import hashlib
import zlib

import numpy as np


def _label_key(label):
    if isinstance(label, (int, np.integer)):
        return int(label) & 0xFFFFFFFF
    return zlib.crc32(str(label).encode("utf-8"))


def derive_seed_sequence(seed, *labels):
    """SeedSequence for the stream named by `labels` under the master seed."""
    return np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(_label_key(l) for l in labels))


def derive_rng(seed, *labels):
    """Independent Generator for the stream named by `labels`."""
    return np.random.default_rng(derive_seed_sequence(seed, *labels))


def canonical_json(obj):
    """Deterministic JSON text: sorted keys, fixed separators, trailing newline.

    Floats serialize via repr (shortest round-trip form), so equal inputs
    always produce byte-identical output.
    """
    return json.dumps(obj, sort_keys=True, separators=(",", ": "), indent=1) + "\n"


def write_json(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(canonical_json(obj))


def read_json(path):
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def content_id(obj):
    """Short stable identifier derived from canonical JSON content."""
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()[:16]
