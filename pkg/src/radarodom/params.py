"""Named parameter storage, Adam, and the binary checkpoint format."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from . import engine
from .engine import Value

MAGIC = b"CAOR"
VERSION = 1

# Entries under these prefixes are saved but never updated by the optimizer.
FROZEN_PREFIXES = ("meta/", "stats/")


class CheckpointError(ValueError):
    pass


class ParamStore:
    """Ordered map from parameter path to :class:`~radarodom.engine.Value`."""

    def __init__(self):
        self._params = {}

    def __contains__(self, path):
        return path in self._params

    def __getitem__(self, path):
        return self._params[path]

    def __iter__(self):
        return iter(self._params)

    def __len__(self):
        return len(self._params)

    def items(self):
        return self._params.items()

    def add(self, path, data):
        if path in self._params:
            raise KeyError(f"duplicate parameter path {path!r}")
        v = engine.param(np.array(data, dtype=np.float64))
        if path.startswith(FROZEN_PREFIXES):
            v.requires_grad = False
            v.op = "buffer"
        self._params[path] = v
        return v

    def trainable(self):
        return {p: v for p, v in self._params.items() if not p.startswith(FROZEN_PREFIXES)}

    def num_parameters(self):
        return int(sum(v.data.size for v in self.trainable().values()))

    def state(self):
        return {p: v.data.copy() for p, v in self._params.items()}

    def load_state(self, state):
        for p, arr in state.items():
            if p not in self._params:
                self.add(p, arr)
            else:
                self._params[p].data = np.array(arr, dtype=np.float64)

    # ------------------------------------------------------------ checkpoint io

    def save(self, path):
        buf = bytearray()
        buf += MAGIC
        buf += struct.pack("<II", VERSION, len(self._params))
        for name, v in self._params.items():
            raw = name.encode("utf-8")
            arr = np.asarray(v.data, dtype="<f8")
            buf += struct.pack("<I", len(raw))
            buf += raw
            buf += struct.pack("<I", arr.ndim)
            buf += struct.pack(f"<{arr.ndim}I", *arr.shape)
            buf += arr.tobytes()
        Path(path).write_bytes(bytes(buf))

    @classmethod
    def load(cls, path):
        blob = Path(path).read_bytes()
        if blob[:4] != MAGIC:
            raise CheckpointError(f"{path}: bad magic {blob[:4]!r}")
        version, count = struct.unpack_from("<II", blob, 4)
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")
        off = 12
        store = cls()
        try:
            for _ in range(count):
                (n,) = struct.unpack_from("<I", blob, off)
                off += 4
                name = blob[off:off + n].decode("utf-8")
                off += n
                (rank,) = struct.unpack_from("<I", blob, off)
                off += 4
                dims = struct.unpack_from(f"<{rank}I", blob, off)
                off += 4 * rank
                size = int(np.prod(dims)) if rank else 1
                arr = np.frombuffer(blob, dtype="<f8", count=size, offset=off).reshape(dims)
                off += 8 * size
                store.add(name, arr.astype(np.float64))
        except (struct.error, ValueError, UnicodeDecodeError) as exc:
            raise CheckpointError(f"{path}: truncated or corrupt checkpoint") from exc
        if off != len(blob):
            raise CheckpointError(f"{path}: {len(blob) - off} trailing bytes")
        return store


class Adam:
    """Adam with bias correction; ``lr`` is set by the caller each epoch."""

    def __init__(self, store, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.store = store
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {}
        self.v = {}

    def step(self):
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.step_count
        c2 = 1.0 - b2 ** self.step_count
        for name, p in self.store.trainable().items():
            g = p.grad
            if name not in self.m:
                self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            m = self.m[name] = b1 * self.m[name] + (1.0 - b1) * g
            v = self.v[name] = b2 * self.v[name] + (1.0 - b2) * g * g
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def lr_at_epoch(lr0, decay, epoch):
    """Learning rate for a zero-based epoch index under per-epoch decay."""
    return lr0 * decay ** epoch
