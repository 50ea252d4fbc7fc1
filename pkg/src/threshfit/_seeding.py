"""Counter-based seed derivation.

Every random stream in the package comes from ``derive_rng(seed, *keys)``,
which feeds ``[seed, *keys]`` to :class:`numpy.random.SeedSequence`. Keys are
small integers: a stream tag followed by counters (iteration, pair index,
scene index, ...). A single run can therefore be replayed in isolation from
its master seed and its counters alone.
"""

import numpy as np

# stream tags
RANSAC = 1
SPLIT = 2
PAIR = 3
SCENE = 4
FINAL = 5
SIMFIT = 6
OUTLIER = 7
POSE = 8


def derive_seed(seed, *keys):
    """Derive a 63-bit child seed from ``seed`` and integer ``keys``."""
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, *map(int, keys)])
    return int(ss.generate_state(2, dtype=np.uint32).view(np.uint64)[0] >> np.uint64(1))


def derive_rng(seed, *keys):
    return np.random.default_rng([int(seed) & 0xFFFFFFFFFFFFFFFF, *map(int, keys)])
