"""Corrective seasonal predictor for per-window average and peak loads.

The prediction for window i on day k is the mean of that window's loads over
the previous D days, plus an exponentially weighted average of the seasonal
prediction errors from the N most recent windows. One predictor instance
tracks one (model, target) series.
"""

from __future__ import annotations

from dataclasses import dataclass

from .trace import WindowStats


class ColdPredictorError(RuntimeError):
    """No usable history for the requested window; callers skip prewarming."""


@dataclass(frozen=True)
class Prediction:
    model_id: str
    day: int
    window: int
    seasonal: float
    delta: float
    predicted: float  # max(0, seasonal + delta)


class LoadPredictor:
    """Online predictor over an append-only (day, window) -> load history.

    ``target`` selects which WindowStats field observe() records. Queries are
    side-effect free; under chronological observation the lagged seasonal
    values recomputed for the corrective term equal the values that were
    current when those windows were predicted.
    """

    def __init__(
        self,
        model_id: str,
        windows_per_day: int,
        seasonal_days: int = 3,
        lookback: int = 10,
        weight_orientation: str = "recent",
        target: str = "peak",
    ):
        if seasonal_days < 1:
            raise ValueError("seasonal_days must be >= 1")
        if lookback < 1:
            raise ValueError("lookback must be >= 1")
        if windows_per_day < 1:
            raise ValueError("windows_per_day must be >= 1")
        if weight_orientation not in ("recent", "literal"):
            raise ValueError(f"unknown weight orientation {weight_orientation!r}")
        if target not in ("average", "peak"):
            raise ValueError(f"unknown target {target!r}")
        self.model_id = model_id
        self.windows_per_day = windows_per_day
        self.seasonal_days = seasonal_days
        self.lookback = lookback
        self.weight_orientation = weight_orientation
        self.target = target
        self._history: dict[tuple[int, int], float] = {}

    def observe(self, stats: WindowStats) -> "LoadPredictor":
        key = (stats.day, stats.window)
        if key in self._history:
            raise ValueError(f"duplicate observation for day={key[0]} window={key[1]}")
        value = stats.avg_load if self.target == "average" else float(stats.peak_load)
        self._history[key] = value
        return self

    def observe_value(self, day: int, window: int, value: float) -> "LoadPredictor":
        """Record a raw load value (used when feeding precomputed series)."""
        key = (day, window)
        if key in self._history:
            raise ValueError(f"duplicate observation for day={day} window={window}")
        self._history[key] = float(value)
        return self

    def _lag(self, day: int, window: int, j: int) -> tuple[int, int]:
        # Lag j windows, wrapping into the tail of the previous day.
        idx = window - j
        d = day
        while idx < 0:
            idx += self.windows_per_day
            d -= 1
        return d, idx

    def seasonal_component(self, day: int, window: int) -> float:
        values = [
            self._history[(day - j, window)]
            for j in range(1, self.seasonal_days + 1)
            if (day - j, window) in self._history
        ]
        if not values:
            raise ColdPredictorError(
                f"{self.model_id}: no history for window {window} before day {day}"
            )
        return sum(values) / len(values)

    def corrective_delta(self, day: int, window: int) -> float:
        errors: list[float] = []
        for j in range(1, self.lookback + 1):
            d, i = self._lag(day, window, j)
            if (d, i) not in self._history:
                break
            try:
                seasonal = self.seasonal_component(d, i)
            except ColdPredictorError:
                break
            errors.append(self._history[(d, i)] - seasonal)
        n = len(errors)
        if n == 0:
            return 0.0
        if self.weight_orientation == "recent":
            weights = [2 ** (n - j) for j in range(1, n + 1)]
        else:
            weights = [2 ** (j - 1) for j in range(1, n + 1)]
        num = sum(e * w for e, w in zip(errors, weights))
        return num / (2**n - 1)

    def predict(self, day: int, window: int) -> Prediction:
        seasonal = self.seasonal_component(day, window)
        delta = self.corrective_delta(day, window)
        return Prediction(
            model_id=self.model_id,
            day=day,
            window=window,
            seasonal=seasonal,
            delta=delta,
            predicted=max(0.0, seasonal + delta),
        )
