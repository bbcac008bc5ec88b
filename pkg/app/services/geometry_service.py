"""
Scene geometry: the bounded 3-D world, building boxes, line-of-sight blockage
tests, and the height raster fed to the CKM environment encoder.
"""
import json
import logging
from dataclasses import dataclass
from functools import cached_property
from typing import Tuple

import numpy as np

from app.utils.errors import ConfigError, SchemaError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Position:
    x: float
    y: float
    z: float

    def __array__(self, dtype=None, copy=None):
        return np.array([self.x, self.y, self.z], dtype=dtype or float)

    def __iter__(self):
        return iter((self.x, self.y, self.z))

    @classmethod
    def from_array(cls, values):
        x, y, z = (float(v) for v in values)
        return cls(x, y, z)


@dataclass(frozen=True)
class Building:
    min_corner: Tuple[float, float]
    footprint: Tuple[float, float]
    height: float

    def __post_init__(self):
        if min(self.footprint) <= 0:
            raise ConfigError(f"building footprint must be positive, got {self.footprint}")
        if self.height <= 0:
            raise ConfigError(f"building height must be positive, got {self.height}")

    def aabb(self):
        """Return the (min, max) corners of the building box."""
        x0, y0 = self.min_corner
        fx, fy = self.footprint
        return (x0, y0, 0.0), (x0 + fx, y0 + fy, self.height)


@dataclass(frozen=True)
class Environment:
    side_x: float
    h_min: float
    h_max: float
    buildings: Tuple[Building, ...]
    gu_positions: Tuple[Position, ...]

    def __post_init__(self):
        if len(self.gu_positions) < 1:
            raise ConfigError("environment needs at least one ground user")
        for i, gu in enumerate(self.gu_positions):
            if not (0 <= gu.x <= self.side_x and 0 <= gu.y <= self.side_x):
                raise ConfigError(f"ground user {i} at ({gu.x}, {gu.y}) lies outside the footprint")
        for i, building in enumerate(self.buildings):
            (x0, y0, _), (x1, y1, _) = building.aabb()
            if x0 < 0 or y0 < 0 or x1 > self.side_x or y1 > self.side_x:
                raise ConfigError(f"building {i} extends outside the footprint")
            if building.height >= self.h_min:
                raise ConfigError(f"building {i} height {building.height} reaches h_min={self.h_min}")

    @property
    def n_gus(self):
        return len(self.gu_positions)

    @cached_property
    def box_bounds(self):
        """Building boxes as (B, 3) min and max corner arrays."""
        if not self.buildings:
            empty = np.zeros((0, 3))
            return empty, empty
        corners = [b.aabb() for b in self.buildings]
        mins = np.array([c[0] for c in corners], dtype=float)
        maxs = np.array([c[1] for c in corners], dtype=float)
        return mins, maxs

    @cached_property
    def gu_array(self):
        return np.array([np.asarray(gu) for gu in self.gu_positions], dtype=float)

    @property
    def lower_bounds(self):
        return np.array([0.0, 0.0, self.h_min])

    @property
    def upper_bounds(self):
        return np.array([self.side_x, self.side_x, self.h_max])

    def to_dict(self):
        return {
            'side_x': self.side_x,
            'h_min': self.h_min,
            'h_max': self.h_max,
            'buildings': [
                {'min_corner': list(b.min_corner), 'footprint': list(b.footprint), 'height': b.height}
                for b in self.buildings
            ],
            'gu_positions': [[gu.x, gu.y, gu.z] for gu in self.gu_positions],
        }

    @classmethod
    def from_dict(cls, data):
        try:
            return cls(
                side_x=float(data['side_x']),
                h_min=float(data['h_min']),
                h_max=float(data['h_max']),
                buildings=tuple(
                    Building(tuple(b['min_corner']), tuple(b['footprint']), float(b['height']))
                    for b in data['buildings']
                ),
                gu_positions=tuple(Position.from_array(p) for p in data['gu_positions']),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise SchemaError(f"malformed environment document: {str(e)}")


@dataclass(frozen=True)
class HeightGrid:
    width_cells: int
    depth_cells: int
    cell_heights: np.ndarray

    def to_dict(self):
        # row-major, rows along x
        return {
            'width_cells': self.width_cells,
            'depth_cells': self.depth_cells,
            'cell_heights': self.cell_heights.reshape(-1).tolist(),
        }

    @classmethod
    def from_dict(cls, data):
        w, d = int(data['width_cells']), int(data['depth_cells'])
        heights = np.asarray(data['cell_heights'], dtype=float)
        if heights.size != w * d:
            raise SchemaError(f"height grid holds {heights.size} cells, expected {w * d}")
        return cls(w, d, heights.reshape(w, d))


def blocking_intervals(p1, p2, env):
    """
    Parametric overlap of segment(s) p1->p2 with every building box (slab method).
    Args:
        p1, p2: arrays of shape (..., 3)
        env (Environment): scene whose buildings are tested
    Returns:
        tuple: (enter, exit) arrays of shape (..., B); the segment is inside
        box b for t in (enter, exit) whenever enter < exit
    """
    p1 = np.asarray(p1, dtype=float)[..., None, :]
    p2 = np.asarray(p2, dtype=float)[..., None, :]
    mins, maxs = env.box_bounds
    direction = p2 - p1

    parallel = direction == 0.0
    with np.errstate(divide='ignore', invalid='ignore'):
        inv = 1.0 / direction
        t_a = (mins - p1) * inv
        t_b = (maxs - p1) * inv
    t_lo = np.where(parallel, -np.inf, np.minimum(t_a, t_b))
    t_hi = np.where(parallel, np.inf, np.maximum(t_a, t_b))
    # a segment parallel to a slab misses unless it runs strictly inside it
    outside = parallel & ((p1 <= mins) | (p1 >= maxs))

    enter = np.maximum(t_lo.max(axis=-1), 0.0)
    exit_ = np.minimum(t_hi.min(axis=-1), 1.0)
    exit_ = np.where(outside.any(axis=-1), -np.inf, exit_)
    return enter, exit_


def segments_blocked(p1, p2, env):
    """Vectorized segment_blocked over leading dimensions."""
    p1 = np.asarray(p1, dtype=float)
    p2 = np.asarray(p2, dtype=float)
    shape = np.broadcast_shapes(p1.shape, p2.shape)[:-1]
    if not env.buildings:
        return np.zeros(shape, dtype=bool)
    enter, exit_ = blocking_intervals(p1, p2, env)
    hit = (enter < exit_).any(axis=-1)
    degenerate = np.all(p1 == p2, axis=-1)
    return np.broadcast_to(hit & ~degenerate, shape)


def segment_blocked(p1, p2, env):
    """
    True iff the open segment p1->p2 passes through any building box.
    A zero-length segment is never blocked.
    """
    return bool(segments_blocked(np.asarray(p1, dtype=float), np.asarray(p2, dtype=float), env))


def rasterize_heights(env, width_cells, depth_cells):
    """
    Rasterize building heights onto a regular grid over the footprint
    Args:
        env (Environment): scene to rasterize
        width_cells (int): cells along x
        depth_cells (int): cells along y
    Returns:
        HeightGrid: per-cell maximum height of the buildings overlapping it
    """
    if width_cells < 1 or depth_cells < 1:
        raise ConfigError(f"grid needs at least one cell per axis, got {width_cells}x{depth_cells}")
    heights = np.zeros((width_cells, depth_cells))
    cell_x = env.side_x / width_cells
    cell_y = env.side_x / depth_cells

    for building in env.buildings:
        (x0, y0, _), (x1, y1, h) = building.aabb()
        i0 = int(np.floor(x0 / cell_x + 1e-9))
        i1 = int(np.ceil(x1 / cell_x - 1e-9)) - 1
        j0 = int(np.floor(y0 / cell_y + 1e-9))
        j1 = int(np.ceil(y1 / cell_y - 1e-9)) - 1
        i0, j0 = max(i0, 0), max(j0, 0)
        i1, j1 = min(i1, width_cells - 1), min(j1, depth_cells - 1)
        if i1 < i0 or j1 < j0:
            continue
        block = heights[i0:i1 + 1, j0:j1 + 1]
        np.maximum(block, h, out=block)

    return HeightGrid(width_cells, depth_cells, heights)


def _inside_any_footprint(x, y, z, buildings):
    for building in buildings:
        (x0, y0, _), (x1, y1, h) = building.aabb()
        if x0 <= x <= x1 and y0 <= y <= y1 and z < h:
            return True
    return False


def sample_environment(seed, params):
    """
    Draw a reproducible random scene
    Args:
        seed (int): seed of the scene
        params (EnvironmentConfig): generation config
    Returns:
        Environment: scene satisfying every Environment invariant
    """
    params.validate()
    rng = np.random.default_rng(seed)
    side = params.side_x

    buildings = []
    for _ in range(params.n_buildings):
        fx, fy = rng.uniform(*params.footprint_range, size=2)
        x0 = rng.uniform(0.0, side - fx)
        y0 = rng.uniform(0.0, side - fy)
        height = rng.uniform(*params.height_range)
        buildings.append(Building((float(x0), float(y0)), (float(fx), float(fy)), float(height)))

    gus = []
    for i in range(params.n_gus):
        for _ in range(params.max_placement_tries):
            x, y = rng.uniform(0.0, side, size=2)
            # ground users never sit inside a building
            if not _inside_any_footprint(x, y, params.gu_height, buildings):
                gus.append(Position(float(x), float(y), float(params.gu_height)))
                break
        else:
            raise ConfigError(f"could not place ground user {i} outside buildings")

    env = Environment(side, params.h_min, params.h_max, tuple(buildings), tuple(gus))
    logger.info(f"Sampled environment: {len(buildings)} buildings, {len(gus)} GUs, side {side} m")
    return env


def elevation_angle_deg(p_uav, p_gu):
    """
    Elevation angle of the UAV seen from the GU, in degrees.
    Directly overhead (including the coincident case) is 90 by convention.
    """
    p_uav = np.asarray(p_uav, dtype=float)
    p_gu = np.asarray(p_gu, dtype=float)
    delta = p_uav - p_gu
    r = np.hypot(delta[..., 0], delta[..., 1])
    h = np.abs(delta[..., 2])
    angle = np.where(r == 0.0, 90.0, np.degrees(np.arctan2(h, r)))
    return float(angle) if angle.ndim == 0 else angle


def save_environment(env, path, grid=None):
    document = env.to_dict()
    if grid is not None:
        document['height_grid'] = grid.to_dict()
    with open(path, 'w') as handle:
        json.dump(document, handle, indent=2)
    return path


def load_environment(path):
    """Load an environment JSON; returns (Environment, HeightGrid or None)."""
    try:
        with open(path, 'r') as handle:
            document = json.load(handle)
    except json.JSONDecodeError as e:
        raise SchemaError(f"{path} is not valid JSON: {str(e)}", line=e.lineno)
    env = Environment.from_dict(document)
    grid = HeightGrid.from_dict(document['height_grid']) if 'height_grid' in document else None
    return env, grid
