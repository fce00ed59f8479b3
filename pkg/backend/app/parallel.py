"""Reproducible random substreams and an order-preserving worker map.

Every stochastic task is keyed by a tuple of integers (stream id, outcome, block, ...).
The key alone decides the random stream, so results do not depend on how tasks are
spread over workers.
"""
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from typing import Callable, List, Sequence, TypeVar

import numpy as np

logger = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")

STREAM_HOMODYNE = 1
STREAM_QJUMP = 2


def default_workers() -> int:
    return max(1, int(os.getenv("LIOUVILLE_WORKERS", "1")))


def substream(seed: int, *key: int) -> np.random.Generator:
    sequence = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.default_rng(sequence)


def ordered_map(fn: Callable[[T], R], tasks: Sequence[T], workers: int = 1) -> List[R]:
    """Map ``fn`` over ``tasks`` and return results in task order."""
    if workers <= 1 or len(tasks) <= 1:
        return [fn(task) for task in tasks]
    logger.debug("dispatching %d tasks to %d workers", len(tasks), workers)
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, tasks))
