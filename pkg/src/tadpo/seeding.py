"""Counter-based random streams: every consumer gets its own generator keyed by name."""
from __future__ import annotations

import zlib

import numpy as np


def stream_key(name: str | int) -> int:
    return name if isinstance(name, int) else zlib.crc32(name.encode("utf-8"))


def make_rng(seed: int, *keys: str | int) -> np.random.Generator:
    """Independent generator for ``(seed, *keys)``; adding a new stream never shifts another."""
    return np.random.default_rng([int(seed), *(stream_key(k) for k in keys)])


class Streams:
    """Lazily created named generators sharing one root seed."""

    def __init__(self, seed: int, *prefix: str | int):
        self.seed = int(seed)
        self.prefix = prefix
        self._cache: dict[str, np.random.Generator] = {}

    def __getitem__(self, name: str) -> np.random.Generator:
        if name not in self._cache:
            self._cache[name] = make_rng(self.seed, *self.prefix, name)
        return self._cache[name]
