"""Counter-based random streams keyed by integer paths."""

from __future__ import annotations

import numpy as np


def child_seed(seed, *keys: int) -> np.random.SeedSequence:
    """Seed sequence for the stream at ``keys`` below ``seed``.

    ``seed`` may be an int or a :class:`numpy.random.SeedSequence`; the
    result depends only on ``seed`` and ``keys``, never on call order.
    """
    if isinstance(seed, np.random.SeedSequence):
        return np.random.SeedSequence(seed.entropy, spawn_key=tuple(seed.spawn_key) + tuple(int(k) for k in keys))
    return np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in keys))


def philox(seed) -> np.random.Generator:
    if not isinstance(seed, np.random.SeedSequence):
        seed = np.random.SeedSequence(int(seed))
    return np.random.Generator(np.random.Philox(seed))
