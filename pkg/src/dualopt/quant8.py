"""Blockwise dynamic 8-bit quantization of optimizer state buffers.

Each block of ``block_size`` consecutive elements is scaled by its absolute
maximum and every scaled element is stored as the index of the nearest entry
of a 256-entry signed dynamic codebook (dynamic exponent + linear fraction).
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from functools import lru_cache

import numpy as np

from .core import Optimizer, moment_items, replace_moments
from .numkit import as_buffer, check_finite

DEFAULT_BLOCK_SIZE = 256
SUBSETS = ("none", "base", "delta", "both")


@lru_cache(maxsize=None)
def _dynamic_map(n: int = 7) -> tuple:
    data = []
    for i in range(n):
        fraction_items = 2 ** i + 1
        boundaries = np.linspace(0.1, 1.0, fraction_items)
        means = (boundaries[:-1] + boundaries[1:]) / 2.0
        scale = 10.0 ** (-(n - 1) + i)
        data.extend((scale * means).tolist())
        data.extend((-scale * means).tolist())
    data.append(0.0)
    data.append(1.0)
    data.sort()
    return tuple(data)


def dynamic_codebook() -> np.ndarray:
    """The 256 signed dynamic-map values, sorted ascending, spanning (-1, 1]."""
    return np.array(_dynamic_map(), dtype=np.float64)


@lru_cache(maxsize=None)
def _midpoints() -> np.ndarray:
    code = dynamic_codebook()
    return (code[:-1] + code[1:]) / 2.0


@dataclass(frozen=True, eq=False)
class QuantizedBuffer:
    codes: np.ndarray  # uint8, one per element, flat
    absmax: np.ndarray  # float64, one per block
    shape: tuple
    block_size: int

    @property
    def nbytes(self) -> int:
        return int(self.codes.nbytes + self.absmax.nbytes)

    @property
    def size(self) -> int:
        return int(self.codes.size)


def quantize(x, block_size: int = DEFAULT_BLOCK_SIZE) -> QuantizedBuffer:
    """Quantize ``x`` blockwise to nearest-codebook 8-bit codes.

    An all-zero block gets ``absmax = 1`` so the scaling never divides by zero.
    """
    if block_size < 1:
        raise ValueError(f"block_size must be >= 1, got {block_size}")
    x = as_buffer(x)
    check_finite(x, "quantize input")
    flat = x.reshape(-1)
    nblocks = -(-flat.size // block_size)
    padded = np.zeros(nblocks * block_size)
    padded[: flat.size] = flat
    blocks = padded.reshape(nblocks, block_size)
    absmax = np.abs(blocks).max(axis=1) if nblocks else np.zeros(0)
    absmax = np.where(absmax > 0, absmax, 1.0)
    scaled = (blocks / absmax[:, None]).reshape(-1)[: flat.size]
    # nearest entry: count midpoints strictly below; ties go to the lower entry
    codes = np.searchsorted(_midpoints(), scaled, side="left").astype(np.uint8)
    return QuantizedBuffer(codes, absmax, tuple(x.shape), int(block_size))


def dequantize(q: QuantizedBuffer) -> np.ndarray:
    code = dynamic_codebook()
    if q.size == 0:
        return np.zeros(q.shape)
    scale = np.repeat(q.absmax, q.block_size)[: q.size]
    return (code[q.codes] * scale).reshape(q.shape)


def max_roundtrip_error(absmax: float = 1.0) -> float:
    """Worst-case ``|dequantize(quantize(x)) - x|`` for a block with this absmax."""
    return absmax * float(np.max(np.diff(dynamic_codebook()))) / 2.0


def state_group(name: str) -> str:
    if name.startswith("base"):
        return "base"
    if name.startswith("delta"):
        return "delta"
    return "other"


def selected_names(state, subset: str) -> list:
    """State names kept in 8-bit form for ``subset``.

    ``both`` selects every moment buffer; ``base``/``delta`` select by name
    prefix, so for optimizers without base/delta states they select nothing.
    """
    if subset not in SUBSETS:
        raise ValueError(f"quantize subset must be one of {SUBSETS}, got {subset!r}")
    if subset == "none":
        return []
    names = list(moment_items(state))
    if subset == "both":
        return names
    return [n for n in names if state_group(n) == subset]


class QuantizedOptimizer:
    """Keeps the selected moment buffers of ``inner`` in 8-bit form between steps.

    Each step dequantizes them, runs the inner 64-bit transition, and
    re-quantizes the result. ``subset='none'`` is a pass-through.
    """

    def __init__(self, inner: Optimizer, subset: str = "both", block_size: int = DEFAULT_BLOCK_SIZE):
        self.inner = inner
        self.subset = subset
        self.block_size = block_size
        self.names = selected_names(inner.state, subset)
        self._packed = {}
        self._skeleton = self._pack(inner.state)

    @property
    def n_objectives(self):
        return self.inner.n_objectives

    @property
    def last_direction(self):
        return self.inner.last_direction

    @property
    def last_update(self):
        return self.inner.last_update

    def _pack(self, state):
        items = moment_items(state)
        packed = {n: quantize(items[n].value, self.block_size) for n in self.names}
        self._packed = packed
        # drop the float buffers so only the 8-bit form is retained
        hollow = {n: replace(items[n], value=np.empty(0)) for n in self.names}
        return replace_moments(state, hollow)

    def unpacked_state(self):
        items = moment_items(self._skeleton)
        full = {n: replace(items[n], value=dequantize(self._packed[n])) for n in self.names}
        return replace_moments(self._skeleton, full)

    @property
    def state(self):
        return self.unpacked_state()

    def step(self, theta, g, objective: int = 0, lr=None):
        state = self.unpacked_state()
        new_theta, new_state, direction = self.inner._advance(state, theta, g, objective, lr)
        old = (self._packed, self._skeleton)
        try:
            self._skeleton = self._pack(new_state)
        except Exception:
            self._packed, self._skeleton = old
            raise
        self.inner.state = self._skeleton
        self.inner.last_direction = direction
        self.inner.last_update = as_buffer(theta) - new_theta
        return new_theta

    def state_nbytes(self) -> int:
        """Bytes held by all moment buffers (8-bit ones counted at their packed size)."""
        total = sum(q.nbytes for q in self._packed.values())
        for name, ms in moment_items(self._skeleton).items():
            if name not in self._packed:
                total += ms.value.nbytes
        return total


def full_precision_nbytes(state) -> int:
    return sum(ms.value.nbytes for ms in moment_items(state).values())


def quantized_state_step(inner: Optimizer, quantized_subset: str, block_size: int = DEFAULT_BLOCK_SIZE):
    """Wrap ``inner`` so that ``quantized_subset`` of its states live in 8 bits."""
    return QuantizedOptimizer(inner, quantized_subset, block_size)
