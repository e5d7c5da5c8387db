"""Heightmap worlds built from axis-aligned boxes, plus exteroceptive sampling.

Worlds are flat ground with boxes on top, rasterized onto a regular grid of
cell-center heights (nearest-cell queries at 0.05 m resolution by default;
nearest matches the blocky geometry and keeps obstacle edges sharp). A
heightmap is immutable after construction, so concurrent read-only sampling
is safe.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels as K

DEFAULT_RESOLUTION = 0.05

# obstacle dimension ranges for generated terrain
BOX_SIZE_RANGE = (0.4, 2.0)
BOX_HEIGHT_RANGE = (0.1, 1.0)

# exteroceptive grid: body-frame samples, x-major ordering
GRID_NX = 17
GRID_NY = 11
GRID_SPACING = 0.1
GRID_SIZE = GRID_NX * GRID_NY
DEFAULT_FORWARD_OFFSET = 0.3


@dataclass(frozen=True)
class Box:
    """Axis-aligned box sitting on the ground."""

    cx: float
    cy: float
    size_x: float
    size_y: float
    height: float


@dataclass
class BoxField:
    """A set of boxes with the generation-time dimension ranges recorded."""

    boxes: list[Box] = field(default_factory=list)

    def check_obstacle_ranges(self) -> bool:
        """True when every box obeys the generated-obstacle dimension ranges."""
        lo_s, hi_s = BOX_SIZE_RANGE
        lo_h, hi_h = BOX_HEIGHT_RANGE
        return all(
            lo_s <= b.size_x <= hi_s and lo_s <= b.size_y <= hi_s
            and lo_h <= b.height <= hi_h
            for b in self.boxes
        )


class Heightmap:
    """Regular grid of terrain heights with nearest-cell lookup."""

    def __init__(self, heights: np.ndarray, x0: float, y0: float,
                 resolution: float, boxes: list[Box] | None = None):
        heights = np.ascontiguousarray(heights, dtype=np.float64)
        if not np.isfinite(heights).all():
            raise ValueError("heightmap contains non-finite values")
        self.heights = heights
        self.x0 = float(x0)
        self.y0 = float(y0)
        self.resolution = float(resolution)
        self.boxes = list(boxes) if boxes is not None else []
        self.heights.setflags(write=False)

    @property
    def shape(self) -> tuple[int, int]:
        return self.heights.shape

    @classmethod
    def from_boxes(cls, boxes, bounds, resolution: float = DEFAULT_RESOLUTION,
                   ground: float = 0.0) -> "Heightmap":
        """Rasterize boxes over flat ground.

        bounds is (x_min, x_max, y_min, y_max); a cell belongs to a box when
        its center lies inside the footprint, taller boxes win on overlap.
        """
        x_min, x_max, y_min, y_max = (float(v) for v in bounds)
        nx = int(round((x_max - x_min) / resolution)) + 1
        ny = int(round((y_max - y_min) / resolution)) + 1
        heights = np.full((nx, ny), float(ground))
        boxes = [b if isinstance(b, Box) else Box(*b) for b in boxes]
        for b in boxes:
            i_lo = max(0, int(math.ceil((b.cx - b.size_x / 2 - x_min) / resolution - 1e-9)))
            i_hi = min(nx - 1, int(math.floor((b.cx + b.size_x / 2 - x_min) / resolution + 1e-9)))
            j_lo = max(0, int(math.ceil((b.cy - b.size_y / 2 - y_min) / resolution - 1e-9)))
            j_hi = min(ny - 1, int(math.floor((b.cy + b.size_y / 2 - y_min) / resolution + 1e-9)))
            if i_lo <= i_hi and j_lo <= j_hi:
                patch = heights[i_lo:i_hi + 1, j_lo:j_hi + 1]
                np.maximum(patch, ground + b.height, out=patch)
        return cls(heights, x_min, y_min, resolution, boxes)

    def height_at(self, x: float, y: float) -> float:
        """Nearest-cell height; out-of-bounds queries return the edge value."""
        return float(K.height_at(self.heights, self.x0, self.y0,
                                 self.resolution, float(x), float(y)))

    def height_at_many(self, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
        """Vectorized nearest-cell lookup matching height_at exactly."""
        ix = np.floor((np.asarray(xs) - self.x0) / self.resolution + 0.5).astype(np.int64)
        iy = np.floor((np.asarray(ys) - self.y0) / self.resolution + 0.5).astype(np.int64)
        np.clip(ix, 0, self.heights.shape[0] - 1, out=ix)
        np.clip(iy, 0, self.heights.shape[1] - 1, out=iy)
        return self.heights[ix, iy]

    def bounds(self) -> tuple[float, float, float, float]:
        nx, ny = self.heights.shape
        return (self.x0, self.x0 + (nx - 1) * self.resolution,
                self.y0, self.y0 + (ny - 1) * self.resolution)

    def to_dict(self) -> dict:
        x_min, x_max, y_min, y_max = self.bounds()
        return {
            "resolution": self.resolution,
            "x_min": x_min, "x_max": x_max,
            "y_min": y_min, "y_max": y_max,
            "boxes": [
                {"cx": b.cx, "cy": b.cy, "size_x": b.size_x,
                 "size_y": b.size_y, "height": b.height}
                for b in self.boxes
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Heightmap":
        boxes = [Box(b["cx"], b["cy"], b["size_x"], b["size_y"], b["height"])
                 for b in d["boxes"]]
        return cls.from_boxes(boxes, (d["x_min"], d["x_max"], d["y_min"], d["y_max"]),
                              resolution=d["resolution"])

    def save(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2)
            f.write("\n")

    @classmethod
    def load(cls, path) -> "Heightmap":
        with open(path) as f:
            return cls.from_dict(json.load(f))


def flat_world(arena_size: float = 40.0,
               resolution: float = DEFAULT_RESOLUTION) -> Heightmap:
    """Obstacle-free square arena centered on the origin."""
    half = arena_size / 2.0
    return Heightmap.from_boxes([], (-half, half, -half, half), resolution)


def generate_terrain(seed: int, difficulty: float, arena_size: float = 16.0,
                     max_boxes: int | None = None, spawn_clearance: float = 1.0,
                     resolution: float = DEFAULT_RESOLUTION) -> Heightmap:
    """Random box field whose density and height range grow with difficulty.

    difficulty 0 gives flat ground; difficulty d in (0, 1] places
    round(d * max_boxes) boxes with heights drawn from [0.1, 0.1 + 0.9*d] and
    footprints from the full obstacle size range. A disc of spawn_clearance
    around the origin stays free. Deterministic per seed.
    """
    if not 0.0 <= difficulty <= 1.0:
        raise ValueError(f"difficulty must be in [0, 1], got {difficulty}")
    if arena_size <= 0.0:
        raise ValueError("arena_size must be positive")
    rng = np.random.default_rng(seed)
    half = arena_size / 2.0
    if max_boxes is None:
        max_boxes = max(4, int(0.06 * arena_size * arena_size))
    n = int(round(difficulty * max_boxes))
    lo_s, hi_s = BOX_SIZE_RANGE
    h_lo = BOX_HEIGHT_RANGE[0]
    h_hi = h_lo + difficulty * (BOX_HEIGHT_RANGE[1] - h_lo)
    boxes: list[Box] = []
    attempts = 0
    while len(boxes) < n and attempts < 50 * n:
        attempts += 1
        sx = rng.uniform(lo_s, hi_s)
        sy = rng.uniform(lo_s, hi_s)
        h = rng.uniform(h_lo, h_hi)
        cx = rng.uniform(-half + sx / 2, half - sx / 2)
        cy = rng.uniform(-half + sy / 2, half - sy / 2)
        # keep the spawn disc free (conservative: use the footprint circumradius)
        if math.hypot(cx, cy) < spawn_clearance + math.hypot(sx, sy) / 2:
            continue
        boxes.append(Box(cx, cy, sx, sy, h))
    return Heightmap.from_boxes(boxes, (-half, half, -half, half), resolution)


def corridor_world(width: float = 1.7, length: float = 14.0,
                   wall_height: float = 1.0, wall_thickness: float = 0.3,
                   resolution: float = DEFAULT_RESOLUTION) -> Heightmap:
    """Straight corridor along +x with the inner wall faces `width` apart.

    The spawn sits at the origin, 1 m in from the corridor entrance.
    """
    if width <= 0.4:
        raise ValueError("corridor must be wider than the robot")
    half_w = width / 2.0
    walls = [
        Box(length / 2 - 1.0, half_w + wall_thickness / 2, length, wall_thickness, wall_height),
        Box(length / 2 - 1.0, -half_w - wall_thickness / 2, length, wall_thickness, wall_height),
    ]
    bounds = (-1.5, length - 0.5, -half_w - wall_thickness - 0.5, half_w + wall_thickness + 0.5)
    return Heightmap.from_boxes(walls, bounds, resolution)


def navigation_world(seed: int = 0, resolution: float = DEFAULT_RESOLUTION) -> Heightmap:
    """Obstacle course forcing one left turn, one right turn, and a choice.

    A 4 m wide corridor contains a baffle from the right wall (passable only
    on the left), a later baffle from the left wall (passable only on the
    right) and a free-standing central block that can be rounded on either
    side. The seed jitters the baffle positions slightly; the topology is
    fixed. Spawn at the origin, goal past the central block.
    """
    rng = np.random.default_rng(seed)
    half_w = 2.0
    length = 16.0
    wall_t = 0.3
    x_a = 4.0 + rng.uniform(-0.4, 0.4)
    x_b = 7.5 + rng.uniform(-0.4, 0.4)
    x_c = 11.0 + rng.uniform(-0.4, 0.4)
    boxes = [
        # bounding walls
        Box(length / 2 - 2.0, half_w + wall_t / 2, length + 1.0, wall_t, 1.0),
        Box(length / 2 - 2.0, -half_w - wall_t / 2, length + 1.0, wall_t, 1.0),
        Box(length - 2.0 + wall_t / 2, 0.0, wall_t, 2 * half_w + 2 * wall_t, 1.0),
        # baffle from the right wall: free gap on the left side only
        Box(x_a, -half_w + 1.3, 0.4, 2.6, 1.0),
        # baffle from the left wall: free gap on the right side only
        Box(x_b, half_w - 1.3, 0.4, 2.6, 1.0),
        # central obstacle, both sides free
        Box(x_c, 0.0, 1.2, 1.2, 1.0),
    ]
    bounds = (-2.0, length - 1.0, -half_w - wall_t - 0.5, half_w + wall_t + 0.5)
    return Heightmap.from_boxes(boxes, bounds, resolution)


def grid_offsets(forward_offset: float = DEFAULT_FORWARD_OFFSET) -> tuple[np.ndarray, np.ndarray]:
    """Body-frame (x, y) offsets of the 187 exteroceptive samples, x-major."""
    gx = (np.arange(GRID_NX) - (GRID_NX - 1) / 2) * GRID_SPACING + forward_offset
    gy = (np.arange(GRID_NY) - (GRID_NY - 1) / 2) * GRID_SPACING
    xs = np.repeat(gx, GRID_NY)
    ys = np.tile(gy, GRID_NX)
    return xs, ys


def sample_height_grid(hmap: Heightmap, base_pose, noise_std: float,
                       rng: np.random.Generator | None = None,
                       forward_offset: float = DEFAULT_FORWARD_OFFSET) -> np.ndarray:
    """187 terrain heights on a 17 x 11 grid (0.1 m pitch) around the base.

    base_pose is (x, y, yaw); the grid rides with the base, rotated by yaw
    and shifted forward_offset ahead of it (more look-ahead than look-behind).
    Heights are reported relative to the terrain directly beneath the base,
    which makes them pose invariant; for a robot standing at its nominal
    height this equals height relative to the base minus that height.
    i.i.d. Gaussian noise of the given std is added per sample.
    """
    bx, by, yaw = (float(v) for v in base_pose)
    gx, gy = grid_offsets(forward_offset)
    c, s = math.cos(yaw), math.sin(yaw)
    xs = bx + c * gx - s * gy
    ys = by + s * gx + c * gy
    out = hmap.height_at_many(xs, ys) - hmap.height_at(bx, by)
    if noise_std > 0.0:
        if rng is None:
            raise ValueError("an rng is required when noise_std > 0")
        out = out + rng.normal(0.0, noise_std, GRID_SIZE)
    return out
