"""Fixed directional trend maps used to condition the DirConv branches."""
from enum import Enum
from functools import lru_cache

import numpy as np


class Direction(Enum):
    RIGHT = 0
    LEFT = 1
    DOWN = 2
    UP = 3
    DOWN_RIGHT = 4
    UP_LEFT = 5
    DOWN_LEFT = 6
    UP_RIGHT = 7

    @property
    def complement(self) -> "Direction":
        # pairs are adjacent in the enumeration
        return Direction(self.value ^ 1)


def _ramp(n: int) -> np.ndarray:
    """1 - k/(n-1) for k in [0, n); a length-1 axis is the constant 1."""
    if n == 1:
        return np.ones(1)
    return 1.0 - np.arange(n, dtype=np.float64) / (n - 1)


def make_directional_map(direction: Direction, height: int, width: int) -> np.ndarray:
    """Return an (height, width) map decreasing linearly from 1 to 0 along `direction`.

    Axial maps ramp along one axis. Diagonal maps ramp with normalized
    Manhattan progress (i + j) / (H + W - 2). Complements are computed as
    ``1 - ramp`` so that a map and its complement sum to exactly one.
    """
    if height < 1 or width < 1:
        raise ValueError(f"directional map needs positive dimensions, got {height}x{width}")
    direction = Direction(direction)
    base = direction if direction.value % 2 == 0 else direction.complement
    if base is Direction.RIGHT:
        ramp = np.broadcast_to(_ramp(width)[None, :], (height, width))
    elif base is Direction.DOWN:
        ramp = np.broadcast_to(_ramp(height)[:, None], (height, width))
    else:
        i = np.arange(height, dtype=np.float64)[:, None]
        j = np.arange(width, dtype=np.float64)[None, :]
        span = height + width - 2
        if base is Direction.DOWN_LEFT:
            j = (width - 1) - j
        ramp = 1.0 - (i + j) / span if span > 0 else np.ones((height, width))
    ramp = np.array(ramp, dtype=np.float64)
    if base is not direction:
        ramp = 1.0 - ramp
    return ramp


@lru_cache(maxsize=32)
def _cached_maps(height: int, width: int) -> np.ndarray:
    maps = np.stack([make_directional_map(d, height, width) for d in Direction])
    maps.setflags(write=False)
    return maps


def all_directional_maps(height: int, width: int) -> np.ndarray:
    """All eight maps stacked as an (8, height, width) read-only array, in `Direction` order."""
    if height < 1 or width < 1:
        raise ValueError(f"directional map needs positive dimensions, got {height}x{width}")
    return _cached_maps(int(height), int(width))
