"""Named parameter registry shared by the model, optimizer and checkpoints."""

from __future__ import annotations

import numpy as np

from .errors import UsageError
from .tensor import Tensor


class ParamStore:
    """Insertion-ordered name -> Tensor map.

    Trainable parameters are created with requires_grad=True; buffers
    (e.g. normalization statistics) with requires_grad=False. Creation
    order is deterministic and defines checkpoint layout.
    """

    def __init__(self):
        self._entries: dict[str, Tensor] = {}

    def create(self, name: str, data: np.ndarray, trainable: bool = True) -> Tensor:
        if name in self._entries:
            raise UsageError(f"parameter {name!r} already registered")
        t = Tensor(np.ascontiguousarray(data), requires_grad=trainable)
        self._entries[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def names(self) -> list[str]:
        return list(self._entries)

    def items(self):
        return self._entries.items()

    def trainable(self):
        return [(n, t) for n, t in self._entries.items() if t.requires_grad]

    def zero_grads(self):
        for t in self._entries.values():
            t.grad = None

    def param_count(self) -> int:
        return sum(t.size for _, t in self.trainable())

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {n: t.data for n, t in self._entries.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray], source: str = "checkpoint"):
        """Strict load: names and shapes must match exactly."""
        from .errors import CheckpointError
        for name, t in self._entries.items():
            if name not in arrays:
                raise CheckpointError(f"{source} is missing parameter {name!r}")
            arr = arrays[name]
            if tuple(arr.shape) != t.shape:
                raise CheckpointError(
                    f"{source} parameter {name!r} has shape {tuple(arr.shape)}, "
                    f"model expects {t.shape}")
            t.data = arr.astype(t.data.dtype, copy=True)
        extra = [n for n in arrays if n not in self._entries]
        if extra:
            raise CheckpointError(f"{source} contains unknown parameter {extra[0]!r}")
