"""Voxel occupancy grid, surface labelling, visibility and distance queries.

Voxel ``(i, j, k)`` spans ``origin + [i, i+1) * resolution`` along x (and
likewise for y, z); its center sits at ``origin + (i + 0.5) * resolution``.
Anything outside the grid is treated as occupied.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numba import njit
from scipy import ndimage
from scipy.spatial import cKDTree

MAP_MAGIC = "# egoplan voxel map v1"

# Face neighbours; the first four are horizontal.
_HORIZONTAL = ((1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0))
_UP = (0, 0, 1)
_DOWN = (0, 0, -1)


class MapFormatError(ValueError):
    """Raised when a map or field file does not follow the documented format."""


class OutOfBoundsError(ValueError):
    pass


@dataclass
class VoxelMap:
    resolution: float
    origin: np.ndarray
    occupancy: np.ndarray  # bool, shape == dims, indexed [ix, iy, iz]
    _esdf: np.ndarray | None = field(default=None, init=False, repr=False)
    _tree: cKDTree | None = field(default=None, init=False, repr=False)

    def __post_init__(self):
        self.resolution = float(self.resolution)
        self.origin = np.asarray(self.origin, dtype=float).reshape(3)
        self.occupancy = np.asarray(self.occupancy, dtype=bool)
        if self.resolution <= 0:
            raise ValueError("resolution must be positive")
        if self.occupancy.ndim != 3 or min(self.occupancy.shape) < 1:
            raise ValueError(f"occupancy must be a non-empty 3-D array, got shape {self.occupancy.shape}")

    @classmethod
    def empty(cls, dims, resolution=0.1, origin=(0.0, 0.0, 0.0)) -> "VoxelMap":
        return cls(resolution, np.asarray(origin, float), np.zeros(tuple(int(d) for d in dims), bool))

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(d) for d in self.occupancy.shape)

    @property
    def upper(self) -> np.ndarray:
        return self.origin + self.resolution * np.asarray(self.dims)

    @property
    def diagonal(self) -> float:
        return float(self.resolution * np.linalg.norm(self.dims))

    @property
    def free_sentinel(self) -> float:
        """Distance reported when the map holds no obstacle at all."""
        return 2.0 * self.diagonal

    def index_of(self, p) -> np.ndarray:
        """Integer voxel index (possibly out of range) of point(s) ``p``."""
        p = np.asarray(p, dtype=float)
        return np.floor((p - self.origin) / self.resolution).astype(np.int64)

    def center_of(self, idx) -> np.ndarray:
        return self.origin + (np.asarray(idx, dtype=float) + 0.5) * self.resolution

    def in_bounds_index(self, idx) -> np.ndarray | bool:
        idx = np.asarray(idx)
        return np.all((idx >= 0) & (idx < np.asarray(self.dims)), axis=-1)

    def contains(self, p) -> np.ndarray | bool:
        p = np.asarray(p, dtype=float)
        return np.all((p >= self.origin) & (p < self.upper), axis=-1)

    def is_occupied(self, p) -> np.ndarray | bool:
        """Occupancy lookup for point(s); out-of-grid points count as occupied."""
        idx = self.index_of(p)
        inside = self.in_bounds_index(idx)
        clipped = np.clip(idx, 0, np.asarray(self.dims) - 1)
        occ = self.occupancy[clipped[..., 0], clipped[..., 1], clipped[..., 2]]
        return np.where(inside, occ, True)

    def occupied_centers(self) -> np.ndarray:
        return self.center_of(np.argwhere(self.occupancy))

    def translated(self, offset) -> "VoxelMap":
        return VoxelMap(self.resolution, self.origin + np.asarray(offset, float), self.occupancy.copy())

    # -- distance queries ---------------------------------------------------

    def _kdtree(self) -> cKDTree | None:
        if self._tree is None and self.occupancy.any():
            self._tree = cKDTree(self.occupied_centers())
        return self._tree

    def esdf(self) -> np.ndarray:
        """Distance (m) from each voxel center to the nearest occupied voxel center."""
        if self._esdf is None:
            if not self.occupancy.any():
                self._esdf = np.full(self.dims, self.free_sentinel)
            else:
                self._esdf = ndimage.distance_transform_edt(
                    ~self.occupancy, sampling=self.resolution)
        return self._esdf

    def distance(self, p) -> np.ndarray | float:
        """Trilinearly interpolated distance field; 0 outside the grid."""
        d, _ = self.distance_and_gradient(p)
        return d

    def distance_and_gradient(self, p):
        """Interpolated distance and its spatial gradient for point(s) ``p``.

        Interpolation runs between voxel centers; points outside the grid get
        distance 0 and zero gradient (conservative).
        """
        p = np.asarray(p, dtype=float)
        single = p.ndim == 1
        pts = np.atleast_2d(p)
        field_ = self.esdf()
        dims = np.asarray(self.dims)
        u = (pts - self.origin) / self.resolution - 0.5
        base = np.floor(u).astype(np.int64)
        frac = u - base
        # Clamp to the outermost centers so the half-voxel rim stays defined.
        edge_lo = base < 0
        edge_hi = base >= dims - 1
        base = np.clip(base, 0, np.maximum(dims - 2, 0))
        frac = np.where(edge_lo, 0.0, np.where(edge_hi, 1.0, frac))
        flat_dim = dims <= 1
        frac = np.where(flat_dim, 0.0, frac)
        hi = np.minimum(base + 1, dims - 1)

        vals = np.empty((len(pts), 2, 2, 2))
        for a_ in (0, 1):
            ix = hi[:, 0] if a_ else base[:, 0]
            for b_ in (0, 1):
                iy = hi[:, 1] if b_ else base[:, 1]
                for c_ in (0, 1):
                    iz = hi[:, 2] if c_ else base[:, 2]
                    vals[:, a_, b_, c_] = field_[ix, iy, iz]
        fx, fy, fz = frac[:, 0], frac[:, 1], frac[:, 2]
        c00 = vals[:, 0, 0, 0] * (1 - fx) + vals[:, 1, 0, 0] * fx
        c01 = vals[:, 0, 0, 1] * (1 - fx) + vals[:, 1, 0, 1] * fx
        c10 = vals[:, 0, 1, 0] * (1 - fx) + vals[:, 1, 1, 0] * fx
        c11 = vals[:, 0, 1, 1] * (1 - fx) + vals[:, 1, 1, 1] * fx
        c0 = c00 * (1 - fy) + c10 * fy
        c1 = c01 * (1 - fy) + c11 * fy
        d = c0 * (1 - fz) + c1 * fz

        dx_ = ((vals[:, 1, :, :] - vals[:, 0, :, :]))
        gx = ((dx_[:, 0, 0] * (1 - fy) + dx_[:, 1, 0] * fy) * (1 - fz)
              + (dx_[:, 0, 1] * (1 - fy) + dx_[:, 1, 1] * fy) * fz)
        gy = (c10 - c00) * (1 - fz) + (c11 - c01) * fz
        gz = c1 - c0
        grad = np.stack([gx, gy, gz], axis=1) / self.resolution
        clamped = edge_lo | edge_hi | flat_dim
        grad = np.where(clamped, 0.0, grad)

        outside = ~self.contains(pts)
        d = np.where(outside, 0.0, d)
        grad[outside] = 0.0
        if single:
            return float(d[0]), grad[0]
        return d, grad

    def nearest_obstacle_distance(self, p) -> float:
        """Exact Euclidean distance from ``p`` to the closest occupied voxel center.

        Returns 0 when ``p`` lies inside an occupied voxel and
        :attr:`free_sentinel` when the map has no obstacle.
        """
        p = np.asarray(p, dtype=float)
        if not self.contains(p):
            raise OutOfBoundsError(f"point {p.tolist()} outside map bounds")
        if self.is_occupied(p):
            return 0.0
        tree = self._kdtree()
        if tree is None:
            return self.free_sentinel
        d, _ = tree.query(p)
        return float(d)

    def nearest_obstacle_distances(self, pts) -> np.ndarray:
        """Vectorised exact distance; out-of-grid points return 0."""
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        tree = self._kdtree()
        if tree is None:
            out = np.full(len(pts), self.free_sentinel)
        else:
            out, _ = tree.query(pts)
        return np.where(self.is_occupied(pts), 0.0, out)

    # -- visibility ---------------------------------------------------------

    def line_of_sight(self, start, end) -> bool:
        """True iff no occupied voxel lies strictly between the two endpoint voxels."""
        start = np.asarray(start, dtype=float)
        end = np.asarray(end, dtype=float)
        for name, q in (("start", start), ("end", end)):
            if not self.contains(q):
                raise OutOfBoundsError(f"{name} point {q.tolist()} outside map bounds")
        return bool(visible_from(self, start, end[None, :])[0])


def visible_from(vmap: VoxelMap, start, targets) -> np.ndarray:
    """3-D DDA visibility of many target points from one start.

    A ray is blocked when it enters an occupied voxel other than the start
    voxel and the voxel holding its own target.
    """
    targets = np.atleast_2d(np.asarray(targets, dtype=float))
    s = (np.asarray(start, dtype=float).reshape(3) - vmap.origin) / vmap.resolution
    e = np.ascontiguousarray((targets - vmap.origin) / vmap.resolution)
    return _dda(vmap.occupancy, s, e)


@njit(cache=True)
def _dda(occ, s, e):
    n = e.shape[0]
    nx, ny, nz = occ.shape
    out = np.ones(n, dtype=np.bool_)
    cur0 = np.floor(s)
    for r in range(n):
        cur = np.empty(3, dtype=np.int64)
        end = np.empty(3, dtype=np.int64)
        step = np.empty(3, dtype=np.int64)
        t_max = np.empty(3)
        t_delta = np.empty(3)
        for ax in range(3):
            cur[ax] = np.int64(cur0[ax])
            end[ax] = np.int64(np.floor(e[r, ax]))
            d = e[r, ax] - s[ax]
            if d > 0:
                step[ax] = 1
                t_delta[ax] = 1.0 / d
                t_max[ax] = (cur[ax] + 1 - s[ax]) / d
            elif d < 0:
                step[ax] = -1
                t_delta[ax] = -1.0 / d
                t_max[ax] = (cur[ax] - s[ax]) / d
            else:
                step[ax] = 0
                t_delta[ax] = np.inf
                t_max[ax] = np.inf
        while cur[0] != end[0] or cur[1] != end[1] or cur[2] != end[2]:
            ax = 0
            if t_max[1] < t_max[ax]:
                ax = 1
            if t_max[2] < t_max[ax]:
                ax = 2
            if t_max[ax] > 1.0:
                break
            cur[ax] += step[ax]
            t_max[ax] += t_delta[ax]
            if cur[0] == end[0] and cur[1] == end[1] and cur[2] == end[2]:
                break
            i, j, k = cur[0], cur[1], cur[2]
            if i < 0 or j < 0 or k < 0 or i >= nx or j >= ny or k >= nz or occ[i, j, k]:
                out[r] = False
                break
    return out


@dataclass
class SurfaceLabels:
    """Index sets of surface voxels; each array has shape ``(n, 3)``.

    ``corner_positions[i]`` is the junction point associated with
    ``corner_voxels[i]``.  Ceiling-facing voxels are recorded for completeness
    but carry no disturbance model.
    """

    ground_voxels: np.ndarray
    wall_voxels: np.ndarray
    corner_voxels: np.ndarray
    corner_positions: np.ndarray
    ceiling_voxels: np.ndarray

    def as_sets(self) -> dict[str, set[tuple[int, int, int]]]:
        return {
            name: {tuple(int(v) for v in row) for row in getattr(self, name)}
            for name in ("ground_voxels", "wall_voxels", "corner_voxels", "ceiling_voxels")
        }


def _free_neighbour(occ: np.ndarray, offset) -> np.ndarray:
    """Mask of voxels whose neighbour at ``offset`` is inside the grid and free."""
    free = ~occ
    out = np.zeros_like(occ)
    src = [slice(None)] * 3
    dst = [slice(None)] * 3
    for ax, o in enumerate(offset):
        if o > 0:
            dst[ax] = slice(0, -o)
            src[ax] = slice(o, None)
        elif o < 0:
            dst[ax] = slice(-o, None)
            src[ax] = slice(0, o)
    out[tuple(dst)] = free[tuple(src)]
    return out


def _shift(mask: np.ndarray, offset) -> np.ndarray:
    """``out[v] = mask[v + offset]`` with False beyond the grid."""
    out = np.zeros_like(mask)
    src = [slice(None)] * 3
    dst = [slice(None)] * 3
    for ax, o in enumerate(offset):
        if o > 0:
            dst[ax] = slice(0, -o)
            src[ax] = slice(o, None)
        elif o < 0:
            dst[ax] = slice(-o, None)
            src[ax] = slice(0, o)
    out[tuple(dst)] = mask[tuple(src)]
    return out


def classify_surfaces(vmap: VoxelMap) -> SurfaceLabels:
    """Label occupied voxels that expose a free face.

    ground: free neighbour above; wall: free horizontal neighbour; a voxel
    may be both.  A corner voxel is a wall voxel with a ground voxel in the
    3x3 patch directly beneath it; its corner position is the mean center of
    those ground voxels.
    """
    occ = vmap.occupancy
    ground = occ & _free_neighbour(occ, _UP)
    wall = np.zeros_like(occ)
    for off in _HORIZONTAL:
        wall |= occ & _free_neighbour(occ, off)
    ceiling = occ & _free_neighbour(occ, _DOWN)

    wall_idx = np.argwhere(wall)
    corner_rows, corner_pos = [], []
    offsets = [(dx, dy, -1) for dx in (-1, 0, 1) for dy in (-1, 0, 1)]
    if len(wall_idx):
        hits = np.stack([_shift(ground, off)[wall] for off in offsets], axis=1)
        has = hits.any(axis=1)
        off_arr = np.asarray(offsets)
        for idx, row in zip(wall_idx[has], hits[has]):
            corner_rows.append(idx)
            corner_pos.append(vmap.center_of((idx + off_arr[row]).mean(axis=0)))
    return SurfaceLabels(
        ground_voxels=np.argwhere(ground),
        wall_voxels=wall_idx,
        corner_voxels=np.asarray(corner_rows, dtype=np.int64).reshape(-1, 3),
        corner_positions=np.asarray(corner_pos, dtype=float).reshape(-1, 3),
        ceiling_voxels=np.argwhere(ceiling),
    )


# -- file format ----------------------------------------------------------

def _rle_encode(flat: np.ndarray) -> list[int]:
    """Run lengths of alternating values, starting with a run of free (0) cells."""
    flat = flat.astype(np.int8)
    change = np.flatnonzero(np.diff(flat)) + 1
    bounds = np.concatenate([[0], change, [len(flat)]])
    runs = np.diff(bounds).tolist()
    if len(flat) and flat[0] == 1:
        runs = [0] + runs
    return runs


def save_map(vmap: VoxelMap, path) -> None:
    runs = _rle_encode(vmap.occupancy.ravel(order="C"))
    lines = [
        MAP_MAGIC,
        f"resolution {vmap.resolution!r}",
        "origin " + " ".join(repr(float(v)) for v in vmap.origin),
        "dims " + " ".join(str(d) for d in vmap.dims),
        "encoding rle",
        "data",
    ]
    body = []
    for i in range(0, len(runs), 16):
        body.append(" ".join(str(r) for r in runs[i:i + 16]))
    Path(path).write_text("\n".join(lines + body) + "\n")


def _parse_header(lines: list[str], required: tuple[str, ...]) -> tuple[dict[str, list[str]], int]:
    if not lines or lines[0].strip() != MAP_MAGIC:
        raise MapFormatError("magic: first line must be " + repr(MAP_MAGIC))
    header: dict[str, list[str]] = {}
    for n, line in enumerate(lines[1:], start=1):
        tok = line.split()
        if not tok:
            continue
        if tok[0] == "data":
            break
        header[tok[0]] = tok[1:]
    else:
        raise MapFormatError("data: missing 'data' line")
    for key in required:
        if key not in header:
            raise MapFormatError(f"{key}: missing header field")
    return header, n


def _header_geometry(header) -> tuple[float, np.ndarray, tuple[int, int, int]]:
    try:
        res = float(header["resolution"][0])
        if not res > 0:
            raise ValueError
    except (ValueError, IndexError):
        raise MapFormatError(f"resolution: invalid value {header['resolution']!r}") from None
    try:
        origin = np.array([float(v) for v in header["origin"]])
        assert origin.shape == (3,)
    except (ValueError, AssertionError):
        raise MapFormatError(f"origin: expected 3 floats, got {header['origin']!r}") from None
    try:
        dims = tuple(int(v) for v in header["dims"])
        assert len(dims) == 3 and min(dims) >= 1
    except (ValueError, AssertionError):
        raise MapFormatError(f"dims: expected 3 positive integers, got {header['dims']!r}") from None
    return res, origin, dims


def load_map(path) -> VoxelMap:
    lines = Path(path).read_text().splitlines()
    header, data_line = _parse_header(lines, ("resolution", "origin", "dims", "encoding"))
    res, origin, dims = _header_geometry(header)
    if header["encoding"] != ["rle"]:
        raise MapFormatError(f"encoding: unsupported {header['encoding']!r}")
    try:
        runs = [int(t) for line in lines[data_line + 1:] for t in line.split()]
    except ValueError:
        raise MapFormatError("data: run lengths must be integers") from None
    if any(r < 0 for r in runs):
        raise MapFormatError("data: negative run length")
    total = int(np.prod(dims))
    if sum(runs) != total:
        raise MapFormatError(f"dims: payload holds {sum(runs)} cells, dims imply {total}")
    values = np.arange(len(runs)) % 2
    flat = np.repeat(values.astype(bool), runs)
    return VoxelMap(res, origin, flat.reshape(dims, order="C"))
