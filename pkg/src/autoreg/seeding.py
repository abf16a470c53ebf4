"""Stateless seed derivation.

Every random draw in the package is keyed by (seed, *tags) through a hash,
never by mutable RNG state, so any epoch of any stage can be reproduced in
isolation and checkpoint resume needs no RNG serialization.
"""

import hashlib

import numpy as np


def derive_seed(*parts):
    text = "|".join(str(p) for p in parts)
    digest = hashlib.blake2b(text.encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def derive_rng(*parts):
    return np.random.default_rng(derive_seed(*parts))


def derive_perm(n, *parts):
    return derive_rng(*parts).permutation(n)
