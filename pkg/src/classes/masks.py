import logging
import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Tuple

import numpy as np

from src.classes.errors import ShapeError, ValidationError

logger = logging.getLogger('MultiID')


@dataclass(frozen=True)
class BBox:
    """
    A bounding box in normalized image coordinates.

    Attributes:
        x0, y0: Top-left corner in [0, 1]
        x1, y1: Bottom-right corner in [0, 1]
    """
    x0: float
    y0: float
    x1: float
    y1: float

    def __post_init__(self):
        coords = (self.x0, self.y0, self.x1, self.y1)
        if not all(isinstance(c, (int, float)) and math.isfinite(c) for c in coords):
            raise ValidationError(f"box coordinates must be finite numbers, got {coords}", "E_INVALID_BOX")
        if not all(0.0 <= c <= 1.0 for c in coords):
            raise ValidationError(f"box coordinates must lie in [0, 1], got {coords}", "E_INVALID_BOX")
        if self.x0 > self.x1 or self.y0 > self.y1:
            raise ValidationError(f"box corners are inverted: {coords}", "E_INVALID_BOX")

    @property
    def center(self) -> Tuple[float, float]:
        return (self.x0 + self.x1) / 2.0, (self.y0 + self.y1) / 2.0

    @property
    def area(self) -> float:
        return (self.x1 - self.x0) * (self.y1 - self.y0)

    def iou(self, other: 'BBox') -> float:
        ix = max(0.0, min(self.x1, other.x1) - max(self.x0, other.x0))
        iy = max(0.0, min(self.y1, other.y1) - max(self.y0, other.y0))
        inter = ix * iy
        union = self.area + other.area - inter
        return inter / union if union > 0 else 0.0

    def to_dict(self) -> Dict[str, float]:
        return {'x0': self.x0, 'y0': self.y0, 'x1': self.x1, 'y1': self.y1}

    @classmethod
    def from_dict(cls, data: Dict[str, float]) -> 'BBox':
        return cls(data['x0'], data['y0'], data['x1'], data['y1'])


@dataclass(frozen=True, eq=False)
class SpatialMask:
    """
    A binary attention gate over a latent grid.

    Attributes:
        values: Array shaped (H_lat, W_lat) with entries in {0, 1}
        source_box: Box the mask was rasterized from, if any
    """
    values: np.ndarray
    source_box: Optional[BBox] = None

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise ShapeError(f"spatial mask must be 2-D, got shape {values.shape}")
        if not np.all((values == 0.0) | (values == 1.0)):
            raise ValidationError("spatial mask entries must be 0 or 1", "E_MASK_NOT_BINARY")
        if not values.any():
            raise ValidationError("spatial mask must contain at least one 1", "E_MASK_EMPTY")
        values.setflags(write=False)
        object.__setattr__(self, 'values', values)

    @property
    def grid(self) -> Tuple[int, int]:
        return self.values.shape

    def flat(self) -> np.ndarray:
        """Row-major gate vector, one entry per latent token."""
        return self.values.reshape(-1)

    @classmethod
    def full(cls, h: int, w: int) -> 'SpatialMask':
        return cls(np.ones((h, w)))


def _axis_cells(lo: float, hi: float, n: int) -> np.ndarray:
    centers = (np.arange(n) + 0.5) / n
    inside = (centers >= lo) & (centers < hi)
    if not inside.any():
        # Nothing centred inside: keep the cell holding the box centre on this axis.
        inside[min(int((lo + hi) / 2.0 * n), n - 1)] = True
    return inside


def rasterize_mask(box: BBox, h: int, w: int) -> SpatialMask:
    """
    Rasterize a box onto an (h, w) grid.

    A cell is 1 when its centre lies in [x0, x1) x [y0, y1). An axis with no
    centre inside the box falls back to the cell containing the box centre on
    that axis, so a degenerate box yields exactly one cell and the result
    never comes out empty.

    Args:
        box: Normalized bounding box
        h: Grid rows (>= 1)
        w: Grid columns (>= 1)

    Returns:
        SpatialMask: Binary mask carrying ``box`` as its source

    Raises:
        ValidationError: If the grid extent is not positive
    """
    if h < 1 or w < 1:
        raise ValidationError(f"mask grid must be at least 1x1, got {h}x{w}", "E_INVALID_GRID")
    rows = _axis_cells(box.y0, box.y1, h)
    cols = _axis_cells(box.x0, box.x1, w)
    values = np.outer(rows, cols).astype(np.float64)
    return SpatialMask(values, source_box=box)


def region_signatures(masks: Iterable[SpatialMask]) -> np.ndarray:
    """
    Label every token with the set of masks covering it.

    Returns:
        np.ndarray: Integer array (T,) where equal labels mean equal coverage
    """
    masks = list(masks)
    if not masks:
        raise ValidationError("region signatures need at least one mask", "E_MASK_EMPTY")
    stacked = np.stack([m.flat() > 0 for m in masks], axis=1)
    _, labels = np.unique(stacked, axis=0, return_inverse=True)
    return labels.reshape(-1)


@dataclass
class MaskBank:
    """
    Per-identity boxes with masks rasterized once per grid resolution.

    Attributes:
        boxes: Identity index to box
    """
    boxes: Dict[int, BBox]
    _cache: Dict[Tuple[int, int, int], SpatialMask] = field(default_factory=dict, repr=False)

    @property
    def identities(self) -> List[int]:
        return sorted(self.boxes)

    def mask(self, identity: int, h: int, w: int) -> SpatialMask:
        key = (identity, h, w)
        if key not in self._cache:
            self._cache[key] = rasterize_mask(self.boxes[identity], h, w)
            logger.debug("Rasterized mask for identity %d at %dx%d", identity, h, w)
        return self._cache[key]

    def masks(self, h: int, w: int) -> List[SpatialMask]:
        """Masks for every identity at (h, w), in identity order."""
        return [self.mask(i, h, w) for i in self.identities]

    def resolutions(self) -> List[Tuple[int, int]]:
        return sorted({(h, w) for (_, h, w) in self._cache})
