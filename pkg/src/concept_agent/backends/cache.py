"""Binary embedding cache.

Layout: 8-byte magic, little-endian uint32 header length, a JSON header
``{"d", "count", "dtype": "float32", "keys"}`` and then ``count * d`` float32
values in row-major order. Row ``i`` belongs to ``keys[i]``.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

MAGIC = b"CCBMEMB1"


class CacheError(RuntimeError):
    pass


class EmbeddingCache:
    def __init__(self, dim: int, keys: Iterable[str] = (), vectors: np.ndarray | None = None):
        self.dim = dim
        self.keys: list[str] = list(keys)
        self.vectors = (
            np.zeros((0, dim), dtype=np.float32) if vectors is None else np.asarray(vectors, dtype=np.float32)
        )
        self._index = {k: i for i, k in enumerate(self.keys)}
        if self.vectors.shape != (len(self.keys), dim):
            raise CacheError("vector block does not match key table")

    def __len__(self) -> int:
        return len(self.keys)

    def __contains__(self, key: str) -> bool:
        return key in self._index

    def get(self, key: str) -> np.ndarray:
        return self.vectors[self._index[key]]

    def add(self, key: str, vector) -> None:
        vector = np.asarray(vector, dtype=np.float32).reshape(1, self.dim)
        if key in self._index:
            self.vectors[self._index[key]] = vector[0]
            return
        self._index[key] = len(self.keys)
        self.keys.append(key)
        self.vectors = np.concatenate([self.vectors, vector])

    def update(self, keys: Iterable[str], encode: Callable[[str], np.ndarray]) -> int:
        """Encode only the keys not cached yet. Returns the number of new rows."""
        new = 0
        for key in keys:
            if key not in self._index:
                self.add(key, encode(key))
                new += 1
        return new

    def save(self, path: str | Path) -> None:
        header = json.dumps({"d": self.dim, "count": len(self.keys), "dtype": "float32", "keys": self.keys}).encode()
        path = Path(path)
        tmp = path.with_suffix(path.suffix + ".tmp")
        with tmp.open("wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<I", len(header)))
            fh.write(header)
            fh.write(np.ascontiguousarray(self.vectors, dtype="<f4").tobytes())
        os.replace(tmp, path)

    @classmethod
    def load(cls, path: str | Path) -> "EmbeddingCache":
        data = Path(path).read_bytes()
        hint = f"corrupt embedding cache {path}; delete it and rerun `concept-agent embed` to rebuild"
        if data[:8] != MAGIC or len(data) < 12:
            raise CacheError(hint)
        (size,) = struct.unpack("<I", data[8:12])
        try:
            header = json.loads(data[12 : 12 + size])
            dim, count, keys = int(header["d"]), int(header["count"]), header["keys"]
        except (ValueError, KeyError, TypeError) as exc:
            raise CacheError(hint) from exc
        if header.get("dtype") != "float32" or len(keys) != count:
            raise CacheError(hint)
        body = data[12 + size :]
        if len(body) != count * dim * 4:
            raise CacheError(hint)
        vectors = np.frombuffer(body, dtype="<f4").reshape(count, dim).copy()
        return cls(dim, keys, vectors)

    @classmethod
    def open(cls, path: str | Path, dim: int) -> "EmbeddingCache":
        path = Path(path)
        if not path.exists():
            return cls(dim)
        cache = cls.load(path)
        if cache.dim != dim:
            raise CacheError(f"cache {path} has d={cache.dim}, backend produces d={dim}; rebuild it")
        return cache
