"""Named random substreams.

Every random draw in the package comes from a generator built here, keyed
by the user seed plus a path of names and indices.  Two calls with the same
key path always see the same stream, no matter which worker runs them or in
what order, which is what makes reports independent of the worker count.
"""
import os
import zlib

import numpy as np

from .errors import ConfigError

WORKERS_ENV = "SIGSLEUTH_WORKERS"


def _key_to_int(key):
    if isinstance(key, (int, np.integer)):
        if key < 0:
            raise ValueError("stream keys must be non-negative")
        return int(key)
    if isinstance(key, str):
        return zlib.crc32(key.encode("utf-8"))
    raise TypeError(f"unsupported stream key {key!r}")


def seed_sequence(seed, *keys):
    """SeedSequence for ``seed`` refined by ``keys`` (ints or strings)."""
    entropy = [_key_to_int(seed)] + [_key_to_int(k) for k in keys]
    return np.random.SeedSequence(entropy)


def rng(seed, *keys):
    """Generator for the substream ``(seed, *keys)``."""
    return np.random.default_rng(seed_sequence(seed, *keys))


def int_seed(seed, *keys):
    """A 32-bit integer derived from the substream, for APIs that need one."""
    return int(seed_sequence(seed, *keys).generate_state(1)[0])


def resolve_workers(workers=None):
    """Worker count from the argument, else ``SIGSLEUTH_WORKERS``, else 1."""
    if workers is None:
        env = os.environ.get(WORKERS_ENV)
        try:
            workers = int(env) if env else 1
        except ValueError:
            raise ConfigError(f"{WORKERS_ENV} must be an integer, got {env!r}") from None
    workers = int(workers)
    if workers < 1:
        raise ConfigError("workers must be >= 1")
    return workers


def parallel_map(fn, items, workers=None):
    """``[fn(item) for item in items]``, threaded when ``workers > 1``.

    Results keep input order, so output never depends on scheduling.
    """
    items = list(items)
    workers = resolve_workers(workers)
    if workers == 1 or len(items) < 2:
        return [fn(item) for item in items]
    from joblib import Parallel, delayed

    return Parallel(n_jobs=workers, prefer="threads")(delayed(fn)(item) for item in items)
