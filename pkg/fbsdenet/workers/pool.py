import logging
import threading
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, List, Optional, TypeVar

import torch

from fbsdenet.monitoring.metrics import worker_pool_size

logger = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")

executor: Optional[ThreadPoolExecutor] = None
_local = threading.local()


def init_pool(threads: int = 1):
    global executor
    if threads < 1:
        raise ValueError(f"threads must be >= 1, got {threads}")
    try:
        # all parallelism is across path chunks; intra-op threading would change reduction order
        torch.set_num_threads(1)
        executor = ThreadPoolExecutor(
            max_workers=threads,
            thread_name_prefix="fbsdenet",
            initializer=_mark_worker,
        )
        worker_pool_size.set(threads)
        logger.info("worker pool initialized threads=%d", threads)
    except Exception as e:
        logger.error("failed to initialize worker pool: %s", e)
        raise


def close_pool():
    global executor
    if executor:
        executor.shutdown(wait=True)
        executor = None
        worker_pool_size.set(0)
        logger.info("worker pool closed")


def _mark_worker():
    _local.inside = True


def map_ordered(fn: Callable[[T], R], items: Iterable[T]) -> List[R]:
    """Map over items, results in submission order.

    Calls made from inside a worker run serially so nested maps cannot
    starve the pool.
    """
    items = list(items)
    if executor is None or len(items) <= 1 or getattr(_local, "inside", False):
        return [fn(item) for item in items]
    return list(executor.map(fn, items))


def chunk_slices(total: int, chunk_size: Optional[int]) -> List[slice]:
    if total < 0:
        raise ValueError(f"total must be >= 0, got {total}")
    if chunk_size is None or chunk_size >= total:
        return [slice(0, total)]
    if chunk_size < 1:
        raise ValueError(f"chunk_size must be >= 1, got {chunk_size}")
    return [slice(start, min(start + chunk_size, total)) for start in range(0, total, chunk_size)]
