"""Score bonus map over the token grid.

Tokens inside the edit mask and their L1 neighbourhood get a multiplicative
bonus ``1 + b * r**k`` where ``k`` is the token's L1 distance to the nearest
mask token; tokens further than ``K`` away get 1.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import InvalidArgument
from .grid import EditMask

# distance assigned to every token when the mask is empty
FAR = int(np.iinfo(np.int32).max)


@dataclass(frozen=True)
class BonusParams:
    b: float = 2.0
    r: float = 0.5
    K: int = 2

    def __post_init__(self):
        if not self.b > 1.0:
            raise InvalidArgument(f"bonus factor b must be > 1, got {self.b}")
        if not 0.0 < self.r < 1.0:
            raise InvalidArgument(f"decay ratio r must be in (0, 1), got {self.r}")
        if isinstance(self.K, bool) or int(self.K) != self.K or self.K < 0:
            raise InvalidArgument(f"K must be a non-negative integer, got {self.K}")

    def level_values(self) -> list[float]:
        """Bonus for distances 0..K, evaluated in double precision."""
        return [1.0 + self.b * self.r ** k for k in range(int(self.K) + 1)]


@dataclass(frozen=True, eq=False)
class BonusMap:
    height: int
    width: int
    values: np.ndarray  # (H*W,) float32

    @property
    def grid(self) -> np.ndarray:
        return self.values.reshape(self.height, self.width)


def l1_distance_field(mask: EditMask) -> np.ndarray:
    """Per-token L1 distance to the nearest mask token, flattened row-major.

    Returns :data:`FAR` everywhere for an empty mask.
    """
    if mask.count == 0:
        return np.full(mask.height * mask.width, FAR, dtype=np.int64)
    # taxicab chamfer on an unobstructed rectangle is the exact L1 distance
    dist = ndimage.distance_transform_cdt(~mask.bits, metric="taxicab")
    return dist.astype(np.int64).reshape(-1)


def build_bonus(mask: EditMask, params: BonusParams) -> BonusMap:
    dist = l1_distance_field(mask)
    table = np.array(params.level_values() + [1.0], dtype=np.float64).astype(np.float32)
    level = np.where(dist <= params.K, dist, params.K + 1)
    return BonusMap(mask.height, mask.width, table[level])
