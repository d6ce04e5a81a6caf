"""Volume containers, grid geometry, label transfer, and overlap metrics.

Arrays are indexed ``(x, y, z)``: voxel ``(i, j, k)`` sits at the physical
point ``origin + (i*sx, j*sy, k*sz)`` in millimeters.  Every operation in
this module is a pure function; inputs are never mutated.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

# Fill values for samples that land outside the source grid.
INTENSITY_FILL = 0.0
# Large negative so thresholding a resampled signed-distance map at zero
# always classifies out-of-bounds samples as background.
DISTANCE_FILL = -1.0e9

# Fractional index coordinates this close to an integer are snapped onto
# the grid point, so that analytically grid-aligned transforms stay exact
# through floating-point round trips.
_SNAP_TOL = 1e-6


@dataclass(frozen=True)
class Geometry:
    """Grid shape plus physical placement."""

    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    origin: tuple[float, float, float]

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        spacing = tuple(float(s) for s in self.spacing)
        origin = tuple(float(o) for o in self.origin)
        if len(dims) != 3 or any(d < 1 for d in dims):
            raise ValueError("dims must be three counts >= 1")
        if len(spacing) != 3 or any(s <= 0 for s in spacing):
            raise ValueError("spacing must be three positive lengths")
        if len(origin) != 3:
            raise ValueError("origin must have three components")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)

    @property
    def voxel_count(self) -> int:
        return self.dims[0] * self.dims[1] * self.dims[2]

    def voxel_volume(self) -> float:
        return self.spacing[0] * self.spacing[1] * self.spacing[2]

    def physical_grid(self) -> np.ndarray:
        """Physical coordinates of every voxel center, shape (3, nvox)."""
        idx = np.indices(self.dims, dtype=np.float64).reshape(3, -1)
        sp = np.asarray(self.spacing)[:, None]
        og = np.asarray(self.origin)[:, None]
        return og + idx * sp


class Volume:
    """A 3-d scalar grid with physical spacing and origin."""

    __slots__ = ("data", "spacing", "origin")

    def __init__(self, data, spacing, origin=(0.0, 0.0, 0.0)):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim != 3:
            raise ValueError("volume data must be a 3-d array")
        if not np.all(np.isfinite(arr)):
            raise ValueError("volume data must be finite")
        geom = Geometry(arr.shape, spacing, origin)
        self.data = arr
        self.spacing = geom.spacing
        self.origin = geom.origin

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape

    @property
    def geometry(self) -> Geometry:
        return Geometry(self.data.shape, self.spacing, self.origin)

    def same_grid(self, other) -> bool:
        return (
            self.dims == other.dims
            and np.allclose(self.spacing, other.spacing, rtol=0, atol=1e-9)
            and np.allclose(self.origin, other.origin, rtol=0, atol=1e-9)
        )

    def __repr__(self):
        return f"Volume(dims={self.dims}, spacing={self.spacing}, origin={self.origin})"


class LabelMap:
    """Binary labeling on the same kind of grid as Volume (0 or 1 per voxel)."""

    __slots__ = ("data", "spacing", "origin")

    def __init__(self, data, spacing, origin=(0.0, 0.0, 0.0)):
        arr = np.asarray(data)
        if arr.dtype == bool:
            arr = arr.astype(np.uint8)
        else:
            arr = arr.astype(np.uint8, copy=True)
        if arr.ndim != 3:
            raise ValueError("label data must be a 3-d array")
        if arr.max(initial=0) > 1:
            raise ValueError("labels must be 0 or 1")
        geom = Geometry(arr.shape, spacing, origin)
        self.data = arr
        self.spacing = geom.spacing
        self.origin = geom.origin

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape

    @property
    def geometry(self) -> Geometry:
        return Geometry(self.data.shape, self.spacing, self.origin)

    def same_grid(self, other) -> bool:
        return Volume.same_grid(self, other)

    def fg_count(self) -> int:
        return int(self.data.sum())

    def __repr__(self):
        return f"LabelMap(dims={self.dims}, fg={self.fg_count()})"


# A signed-distance map is an ordinary Volume whose values are signed
# Euclidean distances in millimeters, non-negative exactly on foreground.
SignedDistanceMap = Volume


@dataclass(frozen=True)
class AffineTransform:
    """4x4 matrix mapping target physical coordinates to atlas physical
    coordinates, both in millimeters."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.shape != (4, 4):
            raise ValueError("affine matrix must be 4x4")
        if not np.allclose(m[3], (0.0, 0.0, 0.0, 1.0), rtol=0, atol=1e-12):
            raise ValueError("affine last row must be (0, 0, 0, 1)")
        if abs(np.linalg.det(m[:3, :3])) < 1e-12:
            raise ValueError("affine upper-left 3x3 block is not invertible")
        object.__setattr__(self, "matrix", m)

    @classmethod
    def identity(cls) -> "AffineTransform":
        return cls(np.eye(4))

    def is_identity(self, tol: float = 1e-12) -> bool:
        return bool(np.allclose(self.matrix, np.eye(4), rtol=0, atol=tol))

    def inverse(self) -> "AffineTransform":
        return AffineTransform(np.linalg.inv(self.matrix))

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Map points of shape (3, n) through the transform."""
        pts = np.asarray(points, dtype=np.float64)
        return self.matrix[:3, :3] @ pts + self.matrix[:3, 3:4]


class DisplacementField:
    """Per-voxel displacement in millimeters, added to the voxel's physical
    position to land in atlas space.  Geometry matches the target region."""

    __slots__ = ("disp", "spacing", "origin")

    def __init__(self, disp, spacing, origin=(0.0, 0.0, 0.0)):
        arr = np.asarray(disp, dtype=np.float64)
        if arr.ndim != 4 or arr.shape[3] != 3:
            raise ValueError("displacement data must have shape (nx, ny, nz, 3)")
        if not np.all(np.isfinite(arr)):
            raise ValueError("displacements must be finite")
        geom = Geometry(arr.shape[:3], spacing, origin)
        self.disp = arr
        self.spacing = geom.spacing
        self.origin = geom.origin

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.disp.shape[:3]

    @property
    def geometry(self) -> Geometry:
        return Geometry(self.dims, self.spacing, self.origin)


@dataclass(frozen=True)
class RegionOfInterest:
    """Inclusive voxel index bounds per axis within a reference grid."""

    lo: tuple[int, int, int]
    hi: tuple[int, int, int]

    def __post_init__(self):
        lo = tuple(int(v) for v in self.lo)
        hi = tuple(int(v) for v in self.hi)
        if any(l < 0 for l in lo) or any(h < l for l, h in zip(lo, hi)):
            raise ValueError("roi bounds must satisfy 0 <= lo <= hi")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def slices(self) -> tuple[slice, slice, slice]:
        return tuple(slice(l, h + 1) for l, h in zip(self.lo, self.hi))

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(h - l + 1 for l, h in zip(self.lo, self.hi))

    @classmethod
    def full(cls, dims) -> "RegionOfInterest":
        return cls((0, 0, 0), tuple(int(d) - 1 for d in dims))

    @classmethod
    def bounding(cls, labels, margin: int = 3) -> "RegionOfInterest":
        """Bounding box of the union of foregrounds, expanded by ``margin``
        voxels per side and clamped at the grid border."""
        if not labels:
            raise ValueError("need at least one label map")
        dims = labels[0].dims
        union = np.zeros(dims, dtype=bool)
        for lab in labels:
            if lab.dims != dims:
                raise ValueError("label maps must share one grid")
            union |= lab.data.astype(bool)
        if not union.any():
            raise ValueError("no foreground voxels in any label map")
        lo, hi = [], []
        for axis in range(3):
            proj = np.any(union, axis=tuple(a for a in range(3) if a != axis))
            nz = np.nonzero(proj)[0]
            lo.append(max(int(nz[0]) - margin, 0))
            hi.append(min(int(nz[-1]) + margin, dims[axis] - 1))
        return cls(tuple(lo), tuple(hi))


def _require_same_grid(maps) -> None:
    first = maps[0]
    for m in maps[1:]:
        if not first.same_grid(m):
            raise ValueError("inputs must share one grid")


def _map_to_index_coords(src, xform, target: Geometry) -> np.ndarray:
    """Physical positions of the target grid, pushed through ``xform`` and
    expressed as fractional indices into ``src``.  Returns (3, nvox)."""
    pts = target.physical_grid()
    if xform is None:
        mapped = pts
    elif isinstance(xform, AffineTransform):
        mapped = xform.apply(pts)
    elif isinstance(xform, DisplacementField):
        if xform.dims != target.dims:
            raise ValueError("displacement field geometry must match the target grid")
        mapped = pts + xform.disp.reshape(-1, 3).T
    else:
        raise TypeError(f"unsupported transform {type(xform).__name__}")
    sp = np.asarray(src.spacing)[:, None]
    og = np.asarray(src.origin)[:, None]
    idx = (mapped - og) / sp
    snapped = np.rint(idx)
    near = np.abs(idx - snapped) < _SNAP_TOL
    return np.where(near, snapped, idx)


def _sample_trilinear(data: np.ndarray, idx: np.ndarray, fill: float) -> np.ndarray:
    nx, ny, nz = data.shape
    ix, iy, iz = idx
    inside = (
        (ix >= 0.0) & (ix <= nx - 1)
        & (iy >= 0.0) & (iy <= ny - 1)
        & (iz >= 0.0) & (iz <= nz - 1)
    )
    x0 = np.clip(np.floor(ix).astype(np.int64), 0, max(nx - 2, 0))
    y0 = np.clip(np.floor(iy).astype(np.int64), 0, max(ny - 2, 0))
    z0 = np.clip(np.floor(iz).astype(np.int64), 0, max(nz - 2, 0))
    x1 = np.minimum(x0 + 1, nx - 1)
    y1 = np.minimum(y0 + 1, ny - 1)
    z1 = np.minimum(z0 + 1, nz - 1)
    fx = np.clip(ix - x0, 0.0, 1.0)
    fy = np.clip(iy - y0, 0.0, 1.0)
    fz = np.clip(iz - z0, 0.0, 1.0)
    gx = 1.0 - fx
    gy = 1.0 - fy
    gz = 1.0 - fz
    out = (
        data[x0, y0, z0] * gx * gy * gz
        + data[x1, y0, z0] * fx * gy * gz
        + data[x0, y1, z0] * gx * fy * gz
        + data[x0, y0, z1] * gx * gy * fz
        + data[x1, y1, z0] * fx * fy * gz
        + data[x1, y0, z1] * fx * gy * fz
        + data[x0, y1, z1] * gx * fy * fz
        + data[x1, y1, z1] * fx * fy * fz
    )
    return np.where(inside, out, fill)


def _sample_nearest(data: np.ndarray, idx: np.ndarray, fill: float) -> np.ndarray:
    nx, ny, nz = data.shape
    ix, iy, iz = idx
    inside = (
        (ix >= 0.0) & (ix <= nx - 1)
        & (iy >= 0.0) & (iy <= ny - 1)
        & (iz >= 0.0) & (iz <= nz - 1)
    )
    rx = np.clip(np.rint(ix).astype(np.int64), 0, nx - 1)
    ry = np.clip(np.rint(iy).astype(np.int64), 0, ny - 1)
    rz = np.clip(np.rint(iz).astype(np.int64), 0, nz - 1)
    return np.where(inside, data[rx, ry, rz], fill)


def resample(src, xform, target: Geometry, mode: str = "trilinear", fill: float | None = None):
    """Resample ``src`` onto ``target``.

    ``xform`` maps target physical coordinates into source physical
    coordinates; pass None for the identity.  Samples outside the closed
    source index box take the fill value (default 0.0 for intensities).
    Returns a Volume, or a LabelMap when ``src`` is one and mode is nearest.
    """
    if mode not in ("trilinear", "nearest"):
        raise ValueError(f"unknown resampling mode {mode!r}")
    is_labels = isinstance(src, LabelMap)
    if is_labels and mode == "trilinear":
        raise ValueError("trilinear resampling of a binary label map is not meaningful; "
                         "use transfer_labels_logodds")
    if fill is None:
        fill = INTENSITY_FILL
    data = src.data.astype(np.float64) if is_labels else src.data
    idx = _map_to_index_coords(src, xform, target)
    if mode == "trilinear":
        out = _sample_trilinear(data, idx, fill)
    else:
        out = _sample_nearest(data, idx, fill)
    out = out.reshape(target.dims)
    if is_labels:
        return LabelMap(out != 0, target.spacing, target.origin)
    return Volume(out, target.spacing, target.origin)


def signed_distance(lab: LabelMap) -> SignedDistanceMap:
    """Signed Euclidean distance in millimeters, positive inside.

    Inside values are the distance to the nearest background voxel center
    minus half the smallest spacing, so the implied zero level sits between
    voxel centers and thresholding at zero reproduces the input exactly.
    Outside values are minus the distance to the nearest foreground center.
    """
    fg = lab.data.astype(bool)
    if not fg.any():
        raise ValueError("signed distance undefined for an all-background map")
    if fg.all():
        raise ValueError("signed distance undefined for an all-foreground map")
    sp = lab.spacing
    d_to_bg = ndimage.distance_transform_edt(fg, sampling=sp)
    d_to_fg = ndimage.distance_transform_edt(~fg, sampling=sp)
    half = 0.5 * min(sp)
    values = np.where(fg, d_to_bg - half, -d_to_fg)
    return Volume(values, sp, lab.origin)


def transfer_labels_logodds(sdm: SignedDistanceMap, xform, target: Geometry) -> LabelMap:
    """Warp a signed-distance map and threshold at zero (>= 0 is foreground)."""
    warped = resample(sdm, xform, target, mode="trilinear", fill=DISTANCE_FILL)
    return LabelMap(warped.data >= 0.0, target.spacing, target.origin)


def histogram_match(src: Volume, ref: Volume, n_levels: int = 256) -> Volume:
    """Monotone remap of ``src`` intensities so its quantile function matches
    ``ref`` at ``n_levels`` evenly spaced quantiles."""
    if n_levels < 2:
        raise ValueError("n_levels must be at least 2")
    s = src.data.ravel()
    r = ref.data.ravel()
    if s.min() == s.max():
        raise ValueError("histogram matching undefined for a constant source")
    if r.min() == r.max():
        raise ValueError("histogram matching undefined for a constant reference")
    q = np.linspace(0.0, 1.0, n_levels)
    src_q = np.quantile(s, q)
    ref_q = np.quantile(r, q)
    out = np.interp(src.data, src_q, ref_q)
    return Volume(out, src.spacing, src.origin)


def union_support(labels) -> LabelMap:
    """Voxelwise OR over a list of label maps."""
    labels = list(labels)
    if not labels:
        raise ValueError("need at least one label map")
    _require_same_grid(labels)
    acc = np.zeros(labels[0].dims, dtype=bool)
    for lab in labels:
        acc |= lab.data.astype(bool)
    return LabelMap(acc, labels[0].spacing, labels[0].origin)


def uncertainty_mask(labels) -> LabelMap:
    """Foreground where the maps disagree (votes are not unanimous)."""
    labels = list(labels)
    if not labels:
        raise ValueError("need at least one label map")
    _require_same_grid(labels)
    votes = np.zeros(labels[0].dims, dtype=np.int64)
    for lab in labels:
        votes += lab.data
    n = len(labels)
    mask = (votes > 0) & (votes < n)
    return LabelMap(mask, labels[0].spacing, labels[0].origin)


def dice(a: LabelMap, b: LabelMap) -> float:
    """2|X n Y| / (|X| + |Y|)."""
    _require_same_grid([a, b])
    na = int(a.data.sum())
    nb = int(b.data.sum())
    if na + nb == 0:
        raise ValueError("dice undefined for two empty maps")
    inter = int((a.data & b.data).sum())
    return 2.0 * inter / (na + nb)


def crop(vol, roi: RegionOfInterest):
    """Sub-volume over an inclusive index box; the origin shifts so physical
    coordinates are preserved."""
    dims = vol.dims
    if any(h >= d for h, d in zip(roi.hi, dims)):
        raise ValueError("roi exceeds volume extent")
    new_origin = tuple(vol.origin[a] + roi.lo[a] * vol.spacing[a] for a in range(3))
    data = vol.data[roi.slices]
    if isinstance(vol, LabelMap):
        return LabelMap(data, vol.spacing, new_origin)
    return Volume(data, vol.spacing, new_origin)


def embed(lab: LabelMap, roi: RegionOfInterest, target: Geometry) -> LabelMap:
    """Paste a cropped label map back into a full grid (zeros elsewhere)."""
    if lab.dims != roi.dims:
        raise ValueError("label map does not match the roi extent")
    full = np.zeros(target.dims, dtype=np.uint8)
    full[roi.slices] = lab.data
    return LabelMap(full, target.spacing, target.origin)


def dilate(lab: LabelMap, voxels: int = 1) -> LabelMap:
    """Binary dilation with the full 3x3x3 neighborhood, ``voxels`` times."""
    if voxels < 1:
        return LabelMap(lab.data, lab.spacing, lab.origin)
    grown = ndimage.binary_dilation(
        lab.data.astype(bool), structure=np.ones((3, 3, 3), dtype=bool), iterations=voxels
    )
    return LabelMap(grown, lab.spacing, lab.origin)
