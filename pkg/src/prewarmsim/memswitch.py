"""Latency model for page-table manipulation and pipelined weight transfer.

Weight loading maps virtual pages chunk by chunk while the previous chunk's
bytes copy over PCIe, so map latency hides behind transfer time whenever the
per-chunk map cost is below the per-chunk copy cost. KV-cache mappings run in
the background and only stall when the inference side consumes pages faster
than the mapper produces them. Unmaps are asynchronous: they occupy the
per-GPU map engine timeline but never gate instance-critical work.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import kernels


@dataclass(frozen=True)
class MappingOp:
    gpu_id: int
    target: str  # slot id or "kv"
    pages: int
    kind: str  # "map" | "unmap"
    issue_ms: float
    map_ms_per_page: float

    def __post_init__(self):
        if self.pages < 1:
            raise ValueError("mapping op needs at least one page")
        if self.map_ms_per_page <= 0:
            raise ValueError("map latency must be positive")
        if self.kind not in ("map", "unmap"):
            raise ValueError(f"unknown mapping kind {self.kind!r}")

    @property
    def duration_ms(self) -> float:
        return self.pages * self.map_ms_per_page


@dataclass(frozen=True)
class TransferPlan:
    total_bytes: int
    bandwidth: float  # bytes/ms
    chunk_pages: int
    page_size: int
    n_chunks: int
    first_chunk_map_ms: float
    finish_ms: float
    critical_path_stall_ms: float

    @property
    def transfer_ms(self) -> float:
        return self.total_bytes / self.bandwidth


def pipelined_load(
    total_bytes: int,
    bandwidth: float,
    map_ms_per_page: float,
    chunk_pages: int,
    page_size: int,
) -> TransferPlan:
    """Schedule a weight load through the two-stage map/copy pipeline.

    Returns durations relative to the load's start. When per-chunk map time
    never exceeds per-chunk copy time the stall is exactly zero and the load
    finishes one chunk-map latency after the raw transfer time.
    """
    if bandwidth <= 0:
        raise ValueError("bandwidth must be > 0")
    if total_bytes <= 0:
        raise ValueError("total_bytes must be > 0")
    if chunk_pages < 1:
        raise ValueError("chunk_pages must be >= 1")
    pages = int(math.ceil(total_bytes / page_size))
    n_chunks = int(math.ceil(pages / chunk_pages))
    chunk_page_counts = np.full(n_chunks, chunk_pages, dtype=np.int64)
    chunk_page_counts[-1] = pages - chunk_pages * (n_chunks - 1)
    # Last page of the last chunk may be partial; copy only real bytes.
    ends = np.minimum(np.cumsum(chunk_page_counts) * page_size, total_bytes)
    chunk_bytes = np.diff(np.concatenate(([0], ends)))
    map_ms = chunk_page_counts.astype(np.float64) * map_ms_per_page
    transfer_ms = chunk_bytes.astype(np.float64) / bandwidth
    finish = kernels.pipeline_finish(map_ms, transfer_ms)
    stall = finish - total_bytes / bandwidth - map_ms[0]
    return TransferPlan(
        total_bytes=total_bytes,
        bandwidth=bandwidth,
        chunk_pages=chunk_pages,
        page_size=page_size,
        n_chunks=n_chunks,
        first_chunk_map_ms=float(map_ms[0]),
        finish_ms=float(finish),
        critical_path_stall_ms=float(max(0.0, stall)),
    )


def background_kv_mapping(
    pages: int, map_ms_per_page: float, consumption_rate: float
) -> float:
    """Stall caused by KV-cache pages being consumed faster than mapped.

    ``consumption_rate`` is in pages/ms. With a mapping rate of 1/mu pages/ms
    at or above the consumption rate the stall is zero; otherwise the consumer
    ends up waiting one rate deficit per page.
    """
    if pages < 0:
        raise ValueError("pages must be >= 0")
    if map_ms_per_page <= 0 or consumption_rate <= 0:
        raise ValueError("rates must be positive")
    deficit = map_ms_per_page - 1.0 / consumption_rate
    if deficit <= 0:
        return 0.0
    return pages * deficit


def unmap_cost_ms(pages: int, map_ms_per_page: float) -> float:
    """Background map-engine time consumed by an asynchronous unmap."""
    return pages * map_ms_per_page
