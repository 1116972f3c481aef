"""Numeric kernels shared by the trace analytics and the transfer pipeline model.

Two hot loops live here: the concurrency sweep that turns request intervals
into per-window average/peak loads, and the two-stage map/transfer pipeline
schedule. Each has a numba-compiled implementation and a vectorized numpy
fallback. The active path is chosen once at import time: numba is used when
importable unless ``PREWARMSIM_NUMBA=0`` is set. Both implementations are
always importable so they can be cross-checked and benchmarked.
"""

from __future__ import annotations

import os

import numpy as np

_flag = os.environ.get("PREWARMSIM_NUMBA", "1").strip().lower()
_want_numba = _flag not in ("0", "false", "off", "no")

try:
    from numba import njit

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAS_NUMBA = False

NUMBA_ENABLED = HAS_NUMBA and _want_numba


def _window_aggregate_py(times, deltas, window_ms, n_windows):
    # Sweep over net concurrency deltas; windows are [w*W, (w+1)*W).
    avg = np.zeros(n_windows, dtype=np.float64)
    peak = np.zeros(n_windows, dtype=np.int64)
    conc = np.int64(0)
    integral = 0.0
    cur_peak = np.int64(0)
    seg_start = 0.0
    w = 0
    w_end = window_ms
    i = 0
    m = times.shape[0]
    while w < n_windows:
        t_next = times[i] if i < m else np.inf
        if t_next < w_end:
            integral += conc * (t_next - seg_start)
            conc += deltas[i]
            if conc > cur_peak:
                cur_peak = conc
            seg_start = t_next
            i += 1
        else:
            integral += conc * (w_end - seg_start)
            avg[w] = integral / window_ms
            peak[w] = cur_peak
            w += 1
            seg_start = w_end
            w_end = (w + 1) * window_ms
            integral = 0.0
            # Deltas landing exactly on the boundary take effect at the new
            # window's open; apply them before seeding its peak.
            while i < m and times[i] == seg_start:
                conc += deltas[i]
                i += 1
            cur_peak = conc
    return avg, peak


def _pipeline_finish_py(map_ms, transfer_ms):
    # Chunk c's copy starts once its pages are mapped and the previous copy
    # is done; map operations for successive chunks run back to back.
    mapped = 0.0
    done = 0.0
    for i in range(map_ms.shape[0]):
        mapped += map_ms[i]
        start = mapped if mapped > done else done
        done = start + transfer_ms[i]
    return done


if HAS_NUMBA:
    window_aggregate_numba = njit(cache=True)(_window_aggregate_py)
    pipeline_finish_numba = njit(cache=True)(_pipeline_finish_py)
else:  # pragma: no cover
    window_aggregate_numba = None
    pipeline_finish_numba = None


def window_aggregate_numpy(times, deltas, window_ms, n_windows):
    """Vectorized equivalent of the sweep: cut segments at window bounds,
    then reduce integrals and maxima per window."""
    bounds = np.arange(n_windows + 1, dtype=np.float64) * window_ms
    inside = times[times < bounds[-1]]
    cut = np.union1d(inside, bounds)
    conc_after = np.concatenate(([0], np.cumsum(deltas)))
    conc = conc_after[np.searchsorted(times, cut[:-1], side="right")]
    seg_len = np.diff(cut)
    starts = np.searchsorted(cut[:-1], bounds[:-1], side="left")
    integral = np.add.reduceat(conc * seg_len, starts)
    peak = np.maximum.reduceat(conc, starts)
    return integral / window_ms, peak.astype(np.int64)


def pipeline_finish_numpy(map_ms, transfer_ms):
    cum_map = np.cumsum(map_ms)
    cum_tr = np.cumsum(transfer_ms)
    lead = cum_map - np.concatenate(([0.0], cum_tr[:-1]))
    return float(cum_tr[-1] + np.max(lead))


def window_aggregate(times, deltas, window_ms, n_windows):
    """Per-window (time-weighted mean, peak) of the concurrency step function.

    ``times`` must be sorted and unique; ``deltas`` holds the net concurrency
    change at each time. Returns float64 and int64 arrays of length
    ``n_windows``.
    """
    times = np.ascontiguousarray(times, dtype=np.float64)
    deltas = np.ascontiguousarray(deltas, dtype=np.int64)
    if NUMBA_ENABLED:
        return window_aggregate_numba(times, deltas, float(window_ms), int(n_windows))
    return window_aggregate_numpy(times, deltas, float(window_ms), int(n_windows))


def pipeline_finish(map_ms, transfer_ms):
    """Completion time of a two-stage pipeline (map chunk c+1 while copying c),
    measured from the first map's start."""
    map_ms = np.ascontiguousarray(map_ms, dtype=np.float64)
    transfer_ms = np.ascontiguousarray(transfer_ms, dtype=np.float64)
    if map_ms.size == 0:
        return 0.0
    if NUMBA_ENABLED:
        return float(pipeline_finish_numba(map_ms, transfer_ms))
    return pipeline_finish_numpy(map_ms, transfer_ms)
