"""Base/searching window partitions of a feature grid and the inverse merge.

Feature grids are channel-last tensors of shape (D, H, W, C). Windows are
enumerated lexicographically (depth-major, then height, then width) and so
are the tokens inside each window. A grid whose extents are not multiples of
the base window is zero-padded; padded or out-of-volume tokens are flagged
invalid so attention can mask them.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .tensorcore import ShapeError, Tensor, gather

Triple = tuple[int, int, int]


@dataclass(frozen=True)
class WindowConfig:
    base: Triple = (2, 2, 2)
    magnification: Triple = (3, 3, 3)

    def __post_init__(self):
        if len(self.base) != 3 or any(int(b) < 1 for b in self.base):
            raise ValueError(f"window base extents must be three integers >= 1, got {self.base}")
        if len(self.magnification) != 3 or any(int(m) < 1 or int(m) % 2 == 0 for m in self.magnification):
            raise ValueError(f"magnifications must be three odd integers >= 1, got {self.magnification}")
        object.__setattr__(self, "base", tuple(int(b) for b in self.base))
        object.__setattr__(self, "magnification", tuple(int(m) for m in self.magnification))

    @property
    def search(self) -> Triple:
        return tuple(b * m for b, m in zip(self.base, self.magnification))

    @property
    def volume(self) -> int:
        """Tokens per base window (s)."""
        return int(np.prod(self.base))

    @property
    def mu(self) -> int:
        return int(np.prod(self.magnification))


@dataclass(frozen=True)
class WindowSet:
    kind: str  # "base" or "searching"
    tokens: Tensor  # (n, t, C)
    window_shape: Triple
    origins: np.ndarray  # (n, 3) lattice offset of each window's first token
    valid: np.ndarray  # (n, t) False for padded / out-of-volume tokens
    grid_shape: Triple

    @property
    def count(self) -> int:
        return self.tokens.shape[0]


def _window_counts(grid: Triple, base: Triple) -> Triple:
    return tuple(-(-g // b) for g, b in zip(grid, base))


def _offsets(shape: Triple) -> np.ndarray:
    return np.stack(np.meshgrid(*[np.arange(s) for s in shape], indexing="ij"), -1).reshape(-1, 3)


@lru_cache(maxsize=256)
def _indices(grid: Triple, base: Triple, magnification: Triple):
    """Flat grid index of every window token (-1 where invalid) plus window origins."""
    counts = _window_counts(grid, base)
    base_origins = _offsets(counts) * np.array(base)
    shape = tuple(b * m for b, m in zip(base, magnification))
    shift = np.array([(m - 1) * b // 2 for b, m in zip(base, magnification)])
    origins = base_origins - shift
    pos = origins[:, None, :] + _offsets(shape)[None]
    inside = np.all((pos >= 0) & (pos < np.array(grid)), axis=-1)
    flat = (pos[..., 0] * grid[1] + pos[..., 1]) * grid[2] + pos[..., 2]
    index = np.where(inside, flat, -1)
    index.flags.writeable = False
    origins.flags.writeable = False
    return index, origins, shape


@lru_cache(maxsize=256)
def _merge_index(grid: Triple, base: Triple) -> np.ndarray:
    index, _, _ = _indices(grid, base, (1, 1, 1))
    flat = index.ravel()
    inv = np.empty(int(np.prod(grid)), np.int64)
    keep = flat >= 0
    inv[flat[keep]] = np.nonzero(keep)[0]
    inv.flags.writeable = False
    return inv


def _grid_extent(grid: Tensor) -> Triple:
    if grid.ndim != 4:
        raise ShapeError(f"expected a (D, H, W, C) feature grid, got shape {grid.shape}")
    if min(grid.shape) == 0:
        raise ShapeError(f"zero-sized feature grid {grid.shape}")
    return tuple(grid.shape[:3])


def _partition(grid: Tensor, cfg: WindowConfig, magnification: Triple, kind: str) -> WindowSet:
    extent = _grid_extent(grid)
    index, origins, shape = _indices(extent, cfg.base, magnification)
    tokens = gather(grid.reshape(-1, grid.shape[3]), index)
    return WindowSet(kind, tokens, shape, origins, index >= 0, extent)


def window_partition(grid: Tensor, cfg: WindowConfig) -> WindowSet:
    """Non-overlapping base windows of extent ``cfg.base``."""
    return _partition(grid, cfg, (1, 1, 1), "base")


def window_area_partition(grid: Tensor, cfg: WindowConfig) -> WindowSet:
    """One magnified searching window per base window, centred on it (stride = base extent)."""
    return _partition(grid, cfg, cfg.magnification, "searching")


def window_merge(ws: WindowSet, grid_shape: Triple | None = None) -> Tensor:
    """Inverse of :func:`window_partition`; padding is dropped."""
    if ws.kind != "base":
        raise ShapeError("window_merge needs a base window set")
    extent = tuple(grid_shape) if grid_shape is not None else ws.grid_shape
    n, t, c = ws.tokens.shape
    base = ws.window_shape
    if n != int(np.prod(_window_counts(extent, base))) or t != int(np.prod(base)):
        raise ShapeError(f"window set ({n} x {t}) inconsistent with grid {extent} and window {base}")
    inv = _merge_index(extent, base)
    return gather(ws.tokens.reshape(n * t, c), inv).reshape(extent + (c,))
