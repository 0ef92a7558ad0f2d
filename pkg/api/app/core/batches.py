from concurrent.futures import ThreadPoolExecutor
from typing import Callable, List, TypeVar

import numpy as np

T = TypeVar("T")


def map_batches(fn: Callable[[np.ndarray], T], data: np.ndarray, batch_size: int, threads: int = 1) -> List[T]:
    """Apply ``fn`` to consecutive batches of ``data``; results keep batch order."""
    batches = [data[start:start + batch_size] for start in range(0, data.shape[0], batch_size)]
    if threads <= 1 or len(batches) < 2:
        return [fn(batch) for batch in batches]
    with ThreadPoolExecutor(max_workers=min(threads, len(batches))) as executor:
        return list(executor.map(fn, batches))
