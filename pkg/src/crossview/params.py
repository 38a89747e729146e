"""Named parameter collection with trainability flags.

Keys are slash-namespaced ("backbone/...", "adapter/...") and insertion order
is the canonical ordering used by checkpoints and the optimizer.
"""

from __future__ import annotations

import hashlib

import numpy as np

from .autodiff import Tensor
from .errors import ConfigError


class ParameterStore:
    def __init__(self):
        self._tensors: dict[str, Tensor] = {}
        self._trainable: dict[str, bool] = {}
        self.version = 0  # bumped once per optimizer step

    def add(self, name: str, data, trainable: bool) -> Tensor:
        if name in self._tensors:
            raise ConfigError(f"duplicate parameter name {name!r}")
        t = Tensor(np.asarray(data, dtype=np.float64), grad_tracked=trainable)
        self._tensors[name] = t
        self._trainable[name] = bool(trainable)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __len__(self) -> int:
        return len(self._tensors)

    def names(self) -> list[str]:
        return list(self._tensors)

    def items(self):
        return self._tensors.items()

    def is_trainable(self, name: str) -> bool:
        return self._trainable[name]

    def trainable_items(self) -> list[tuple[str, Tensor]]:
        return [(n, t) for n, t in self._tensors.items() if self._trainable[n]]

    def namespace_items(self, prefix: str) -> list[tuple[str, Tensor]]:
        want = prefix.rstrip("/") + "/"
        return [(n, t) for n, t in self._tensors.items() if n.startswith(want)]

    def zero_grads(self) -> None:
        for t in self._tensors.values():
            t.zero_grad()

    def count(self, prefix: str | None = None) -> int:
        if prefix is None:
            return sum(t.size for t in self._tensors.values())
        return sum(t.size for _, t in self.namespace_items(prefix))

    def count_trainable(self, prefix: str | None = None) -> int:
        pairs = self.items() if prefix is None else self.namespace_items(prefix)
        return sum(t.size for n, t in pairs if self._trainable[n])

    def namespace_hash(self, prefix: str) -> str:
        """SHA-256 over the namespace's names, shapes, and raw float64 bytes."""
        h = hashlib.sha256()
        for name, t in self.namespace_items(prefix):
            h.update(name.encode("utf-8"))
            h.update(repr(t.shape).encode("utf-8"))
            h.update(np.ascontiguousarray(t.data).tobytes())
        return h.hexdigest()
