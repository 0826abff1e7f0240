"""Deterministic RNG derivation.

All randomness in the package flows from ``np.random.SeedSequence`` keyed by
(master seed, stream id, index...) tuples, so parallel work is
order-independent and every run is reproducible from its config seed.
"""

import numpy as np

# stream ids, kept unique so different consumers never share a stream
STREAM_TRIAL = 1
STREAM_PREDICTOR_INIT = 2
STREAM_PREDICTOR_EPOCH = 3
STREAM_PREDICTOR_SAMPLE = 4
STREAM_REFINER_INIT = 5
STREAM_REFINER_EPOCH = 6
STREAM_RESIDUAL_SAMPLE = 7
STREAM_ALPHA = 8
STREAM_VALIDATION = 9


def derive_rng(*keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) & 0xFFFFFFFFFFFFFFFF for k in keys]))
