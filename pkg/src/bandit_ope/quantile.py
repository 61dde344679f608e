"""Order-statistics multiset with nearest-rank quantile queries."""

from __future__ import annotations

import math
from bisect import insort


class QuantileTracker:
    """Multiset of non-negative extended reals (``inf`` allowed).

    ``query()`` returns ``sorted[floor(q * (n - 1))]``, always an element of
    the multiset.  Inserts are binary insertions into a sorted list.
    """

    __slots__ = ("q", "_items")

    def __init__(self, q: float, items=()):
        if not 0.0 <= q <= 1.0:
            raise ValueError(f"quantile level must lie in [0, 1], got {q}")
        self.q = float(q)
        self._items: list[float] = []
        for v in items:
            self.insert(v)

    def insert(self, value: float) -> None:
        value = float(value)
        if math.isnan(value) or value < 0.0:
            raise ValueError(f"tracker admits non-negative values only, got {value}")
        insort(self._items, value)

    def rank_index(self, q: float | None = None) -> int:
        q = self.q if q is None else q
        return math.floor(q * (len(self._items) - 1))

    def query(self, q: float | None = None) -> float:
        if not self._items:
            raise IndexError("quantile of an empty tracker")
        q = self.q if q is None else q
        if not 0.0 <= q <= 1.0:
            raise ValueError(f"quantile level must lie in [0, 1], got {q}")
        return self._items[self.rank_index(q)]

    def min(self) -> float:
        return self._items[0]

    def max(self) -> float:
        return self._items[-1]

    def sorted_values(self) -> list[float]:
        return list(self._items)

    def __len__(self) -> int:
        return len(self._items)

    def __repr__(self) -> str:
        return f"QuantileTracker(q={self.q}, n={len(self._items)})"


def quantile_query(tracker: QuantileTracker, q: float | None = None) -> float:
    return tracker.query(q)
