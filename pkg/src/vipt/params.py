"""Named parameter registry with trainable flags, gradients and AdamW state."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .tensor import Tensor


@dataclass(frozen=True)
class ParamSpec:
    shape: tuple[int, ...]
    group: str  # "foundation" or "prompt"
    init: str = "zeros"  # zeros | ones | normal002 | xavier | kaiming | const:<v>

    @property
    def size(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64))

    @property
    def decays(self) -> bool:
        # matrices and kernels only; biases, norms and scalars are exempt
        return len(self.shape) >= 2


@dataclass
class ParamEntry:
    spec: ParamSpec
    value: Tensor | None = None
    trainable: bool = False
    grad: np.ndarray | None = None
    adam_m: np.ndarray | None = None
    adam_v: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.spec.shape


class ParamStore:
    """Ordered ``name -> ParamEntry`` map.

    Indexing with a name returns the value tensor, which is what the model
    code consumes.  A store built with ``allocate=False`` only carries shapes
    and is enough for parameter accounting.
    """

    def __init__(self):
        self.entries: dict[str, ParamEntry] = {}

    @classmethod
    def from_specs(cls, specs: dict[str, ParamSpec], allocate: bool = False, seeds=None) -> "ParamStore":
        store = cls()
        rngs = {}
        for name, spec in specs.items():
            value = None
            if allocate:
                seed = (seeds or {}).get(spec.group, 0)
                rng = rngs.setdefault(spec.group, np.random.default_rng(seed))
                value = Tensor(_initial_value(spec, rng), name=name)
            store.entries[name] = ParamEntry(spec=spec, value=value)
        return store

    def __getitem__(self, name: str) -> Tensor:
        value = self.entries[name].value
        if value is None:
            raise KeyError(f"parameter {name!r} has no allocated value")
        return value

    def __contains__(self, name: str) -> bool:
        return name in self.entries

    def __iter__(self) -> Iterator[str]:
        return iter(self.entries)

    def __len__(self) -> int:
        return len(self.entries)

    def items(self):
        return self.entries.items()

    def entry(self, name: str) -> ParamEntry:
        return self.entries[name]

    def set_trainable(self, name: str, flag: bool) -> None:
        entry = self.entries[name]
        entry.trainable = flag
        if entry.value is not None:
            entry.value.requires_grad = flag
        if not flag:
            entry.grad = entry.adam_m = entry.adam_v = None

    def trainable_names(self) -> list[str]:
        return [n for n, e in self.entries.items() if e.trainable]

    def zero_grad(self) -> None:
        for entry in self.entries.values():
            entry.grad = None

    def snapshot(self) -> dict[str, np.ndarray]:
        return {n: e.value.data.copy() for n, e in self.entries.items() if e.value is not None}

    def assign(self, name: str, data: np.ndarray) -> None:
        entry = self.entries[name]
        data = np.asarray(data, dtype=np.float64)
        if data.shape != entry.shape:
            raise ValueError(f"{name}: shape {data.shape} != {entry.shape}")
        if entry.value is None:
            entry.value = Tensor(data.copy(), requires_grad=entry.trainable, name=name)
        else:
            entry.value.data = data.copy()


def _initial_value(spec: ParamSpec, rng: np.random.Generator) -> np.ndarray:
    shape = spec.shape
    kind = spec.init
    if kind == "zeros":
        return np.zeros(shape)
    if kind == "ones":
        return np.ones(shape)
    if kind.startswith("const:"):
        return np.full(shape, float(kind.split(":", 1)[1]))
    if kind == "normal002":
        return np.clip(rng.standard_normal(shape), -2.0, 2.0) * 0.02
    fan_in, fan_out = _fans(shape)
    if kind == "xavier":
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-bound, bound, size=shape)
    if kind == "kaiming":
        return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
    raise ValueError(f"unknown init {kind!r}")


def _fans(shape: tuple[int, ...]) -> tuple[int, int]:
    if len(shape) == 2:
        return shape[0], shape[1]
    if len(shape) == 4:  # conv [out, in, k, k]
        rf = shape[2] * shape[3]
        return shape[1] * rf, shape[0] * rf
    n = int(np.prod(shape))
    return n, n


