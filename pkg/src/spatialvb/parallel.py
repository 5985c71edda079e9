"""Ordered process-pool mapping and labeled random streams."""

from __future__ import annotations

import hashlib
import multiprocessing as mp
import os
from concurrent.futures import ProcessPoolExecutor

import numpy as np
from threadpoolctl import threadpool_limits

WORKERS_ENV = "SPATIALVB_WORKERS"


def resolve_workers(workers: int | None = None) -> int:
    """Explicit worker count, else the environment variable, else 1."""
    if workers is None:
        raw = os.environ.get(WORKERS_ENV, "").strip()
        workers = int(raw) if raw else 1
    workers = int(workers)
    if workers < 1:
        raise ValueError(f"worker count must be positive, got {workers}")
    return workers


def _run(job):
    fn, item = job
    # one BLAS thread per job keeps floating-point reductions identical everywhere
    with threadpool_limits(1):
        return fn(item)


def ordered_map(fn, items, workers: int | None = None) -> list:
    """``[fn(x) for x in items]`` evaluated on a process pool, results in input order.

    ``fn`` must be picklable (a module-level function or a partial of one).
    """
    items = list(items)
    workers = min(resolve_workers(workers), max(len(items), 1))
    if workers == 1:
        return [_run((fn, x)) for x in items]
    ctx = mp.get_context("fork")
    with ProcessPoolExecutor(max_workers=workers, mp_context=ctx) as pool:
        return list(pool.map(_run, [(fn, x) for x in items]))


def _label_key(label: str) -> tuple:
    digest = hashlib.sha256(label.encode("utf-8")).digest()
    return tuple(int.from_bytes(digest[i:i + 4], "little") for i in range(0, 8, 4))


def rng_stream(seed: int, label: str, *indices: int) -> np.random.Generator:
    """Counter-based generator for the stream named ``label`` at ``indices``."""
    key = _label_key(label) + tuple(int(i) for i in indices)
    ss = np.random.SeedSequence(int(seed), spawn_key=key)
    return np.random.Generator(np.random.Philox(ss))
