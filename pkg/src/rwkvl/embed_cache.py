from __future__ import annotations

from collections import OrderedDict

import numpy as np


class LruEmbeddingCache:
    """Bounded LRU cache of embedding rows fetched lazily from a store.

    Capacity is counted in entries. Each resident row stays charged to the
    ``embedding`` component of ``meter`` until it is evicted or the cache is
    cleared.
    """

    def __init__(self, capacity: int = 1000, meter=None, tensor: str = "emb"):
        if capacity < 1:
            raise ValueError("cache capacity must be at least 1")
        self.capacity = capacity
        self.meter = meter
        self.tensor = tensor
        self._rows: OrderedDict[int, np.ndarray] = OrderedDict()
        self.row_bytes = 0
        self.hits = 0
        self.misses = 0
        self.evictions = 0
        self.bytes_fetched = 0

    def __len__(self):
        return len(self._rows)

    def __contains__(self, token):
        return token in self._rows

    def keys(self) -> list[int]:
        """Resident tokens, least recently used first."""
        return list(self._rows)

    def get(self, token: int, store) -> np.ndarray:
        token = int(token)
        row = self._rows.get(token)
        if row is not None:
            self._rows.move_to_end(token)
            self.hits += 1
            return row
        self.misses += 1
        n_rows = store.shape(self.tensor)[0]
        if not 0 <= token < n_rows:
            raise ValueError(f"token {token} outside vocabulary of {n_rows}")
        # evict before fetching so residency never exceeds capacity, even transiently
        if len(self._rows) >= self.capacity:
            self._rows.popitem(last=False)
            self.evictions += 1
            if self.meter is not None:
                self.meter.release("embedding", self.row_bytes)
        self.row_bytes = store.row_nbytes(self.tensor)
        row = store.fetch_rows(self.tensor, [token], meter=self.meter, tag="embedding")[0]
        self.bytes_fetched += self.row_bytes
        self._rows[token] = row
        return row

    def clear(self) -> None:
        if self.meter is not None and self._rows:
            self.meter.release("embedding", len(self._rows) * self.row_bytes)
        self._rows.clear()

    @property
    def resident_bytes(self) -> int:
        return len(self._rows) * self.row_bytes

    @property
    def hit_rate(self) -> float:
        total = self.hits + self.misses
        return self.hits / total if total else 0.0

    def stats(self) -> dict:
        return {
            "hits": self.hits,
            "misses": self.misses,
            "evictions": self.evictions,
            "resident": len(self._rows),
            "resident_bytes": self.resident_bytes,
            "bytes_fetched": self.bytes_fetched,
        }
