"""Seed tree: named, order-independent substreams of one master seed."""
import hashlib

import numpy as np


def _label_words(label):
    digest = hashlib.sha256(repr(label).encode()).digest()
    return [int.from_bytes(digest[i:i + 4], "little") for i in range(0, 16, 4)]


def seed_sequence(master, *labels):
    """SeedSequence keyed by ``master`` and a path of labels.

    Adding a new label path never perturbs existing ones because each path is
    hashed independently rather than drawn from a shared stream.
    """
    words = [int(master) & 0xFFFFFFFF, (int(master) >> 32) & 0xFFFFFFFF]
    for lab in labels:
        if isinstance(lab, (int, np.integer)) and lab >= 0:
            words.append(int(lab) & 0xFFFFFFFF)
            words.append(int(lab) >> 32)
        else:
            words.extend(_label_words(lab))
    return np.random.SeedSequence(words)


def rng(master, *labels):
    return np.random.Generator(np.random.PCG64(seed_sequence(master, *labels)))


def derive_seed(master, *labels):
    """A 63-bit integer seed for a child component."""
    return int(seed_sequence(master, *labels).generate_state(2, np.uint32).view(np.uint64)[0] >> 1)
