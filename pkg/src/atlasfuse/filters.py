"""Separable filter banks producing per-voxel feature vectors, plus
whitening.

Scales are physical (millimeters): each 1-d kernel is sampled on the axis
grid (sigma in voxels = scale / spacing) and its discrete moments are
calibrated so responses are exact derivatives in mm units on polynomial
inputs: a smoothing kernel preserves constants, a first-derivative kernel
maps the ramp x -> 1, a second-derivative kernel maps x^2 -> 2, and a
third-derivative kernel maps x^3 -> 6, each annihilating the lower-order
monomials to round-off.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy import ndimage

GAUSSIAN_SCALES = (1.0, 2.0, 4.0)
GAUSSIAN_DERIV_SCALES = (2.0, 4.0)
STEERABLE_BASE_SCALE = 2.0
ANISOTROPY_THRESHOLD = 1.3

# order multi-indices (ox, oy, oz) for the ten third-derivative components
_THIRD_ORDERS = (
    (3, 0, 0), (2, 1, 0), (2, 0, 1), (1, 2, 0), (1, 1, 1),
    (1, 0, 2), (0, 3, 0), (0, 2, 1), (0, 1, 2), (0, 0, 3),
)


@dataclass
class WhiteningStats:
    mean: np.ndarray
    std: np.ndarray
    degenerate: np.ndarray


@dataclass
class FeatureVolume:
    """d filter responses per voxel, shape (nx, ny, nz, d)."""

    data: np.ndarray
    spacing: tuple
    origin: tuple
    names: tuple
    stats: WhiteningStats | None = None

    @property
    def dims(self):
        return self.data.shape[:3]

    @property
    def d(self) -> int:
        return self.data.shape[3]


def derivative_kernel(scale_mm: float, spacing: float, order: int) -> np.ndarray:
    """A 1-d Gaussian (order 0) or Gaussian-derivative kernel sampled at the
    axis spacing, truncated at three sigma, with moments calibrated for mm
    units (see module docstring)."""
    if scale_mm <= 0 or spacing <= 0:
        raise ValueError("scale and spacing must be positive")
    if order not in (0, 1, 2, 3):
        raise ValueError("derivative order must be 0..3")
    sigma_vox = scale_mm / spacing
    radius = max(int(math.ceil(3.0 * sigma_vox)), order + 1)
    x = np.arange(-radius, radius + 1, dtype=np.float64) * spacing
    g = np.exp(-(x * x) / (2.0 * scale_mm * scale_mm))
    if order == 0:
        return g / g.sum()
    if order == 1:
        k = x * g
        k = k - k.sum() / k.size
        return k / (k * x).sum()
    if order == 2:
        k = (x * x - scale_mm * scale_mm) * g
        k = k - k.sum() / k.size
        return k * (2.0 / (k * x * x).sum())
    # third order: remove the residual ramp response against an
    # antisymmetric carrier, then calibrate the cubic response
    k = x ** 3 * g
    carrier = x * g
    k = k - ((k * x).sum() / (carrier * x).sum()) * carrier
    k = k - k.sum() / k.size
    return k * (6.0 / (k * x ** 3).sum())


def separable_response(data: np.ndarray, spacing, scale_mm: float, orders) -> np.ndarray:
    """Correlate with the separable kernel of per-axis derivative orders."""
    out = np.asarray(data, dtype=np.float64)
    for axis in range(3):
        k = derivative_kernel(scale_mm, spacing[axis], orders[axis])
        out = ndimage.correlate1d(out, k, axis=axis, mode="mirror")
    return out


def _stack(vol, components, names) -> FeatureVolume:
    data = np.stack(components, axis=-1)
    return FeatureVolume(data, vol.spacing, vol.origin, tuple(names))


def gaussian_bank(vol) -> FeatureVolume:
    """12 components: smoothings at scales 1, 2, 4 mm; first derivatives at
    2 and 4 mm along x, y, z; Laplacians at 1, 2, 4 mm."""
    comps, names = [], []
    for s in GAUSSIAN_SCALES:
        comps.append(separable_response(vol.data, vol.spacing, s, (0, 0, 0)))
        names.append(f"g{s:g}")
    for s in GAUSSIAN_DERIV_SCALES:
        for axis, tag in enumerate("xyz"):
            orders = [0, 0, 0]
            orders[axis] = 1
            comps.append(separable_response(vol.data, vol.spacing, s, orders))
            names.append(f"g{tag}{s:g}")
    for s in GAUSSIAN_SCALES:
        lap = np.zeros_like(vol.data)
        for axis in range(3):
            orders = [0, 0, 0]
            orders[axis] = 2
            lap = lap + separable_response(vol.data, vol.spacing, s, orders)
        comps.append(lap)
        names.append(f"log{s:g}")
    return _stack(vol, comps, names)


def steerable_bank(vol, base_scale: float = STEERABLE_BASE_SCALE) -> FeatureVolume:
    """16 components at one base scale: the 6 second derivatives and the 10
    third derivatives (the separable quadrature counterpart basis)."""
    comps, names = [], []
    second = ((2, 0, 0), (0, 2, 0), (0, 0, 2), (1, 1, 0), (1, 0, 1), (0, 1, 1))
    tags = ("xx", "yy", "zz", "xy", "xz", "yz")
    for orders, tag in zip(second, tags):
        comps.append(separable_response(vol.data, vol.spacing, base_scale, orders))
        names.append(f"d{tag}")
    for orders in _THIRD_ORDERS:
        comps.append(separable_response(vol.data, vol.spacing, base_scale, orders))
        names.append("d" + "".join(t * o for t, o in zip("xyz", orders)))
    return _stack(vol, comps, names)


def select_bank(spacing) -> str:
    """gaussian12 for clearly anisotropic grids, steerable16 otherwise."""
    ratio = max(spacing) / min(spacing)
    return "gaussian12" if ratio > ANISOTROPY_THRESHOLD else "steerable16"


def compute_bank(vol, kind: str) -> FeatureVolume:
    if kind == "gaussian12":
        return gaussian_bank(vol)
    if kind == "steerable16":
        return steerable_bank(vol)
    raise ValueError(f"unknown filter bank {kind!r}")


def _component_stats(values: np.ndarray) -> WhiteningStats:
    mean = values.mean(axis=0)
    std = values.std(axis=0)
    degenerate = std <= 1e-12 * np.maximum(1.0, np.abs(mean))
    return WhiteningStats(mean=mean, std=std, degenerate=degenerate)


def pooled_stats(fvs, domain=None) -> WhiteningStats:
    """Whitening statistics pooled over several feature volumes, restricted
    to the domain mask when given (population normalization)."""
    chunks = []
    for fv in fvs:
        if domain is None:
            chunks.append(fv.data.reshape(-1, fv.d))
        else:
            if domain.dims != fv.dims:
                raise ValueError("domain mask must match the feature grid")
            chunks.append(fv.data[domain.data.astype(bool)])
    values = np.concatenate(chunks, axis=0)
    if values.shape[0] == 0:
        raise ValueError("whitening domain is empty")
    return _component_stats(values)


def whiten(fv: FeatureVolume, stats: WhiteningStats | None = None,
           domain=None) -> FeatureVolume:
    """Zero-mean, unit-std components.  When ``stats`` is supplied it is
    applied as-is (the target-image case); otherwise statistics are computed
    from this volume over ``domain``.  Components with vanishing spread are
    zeroed and flagged degenerate."""
    if stats is None:
        stats = pooled_stats([fv], domain=domain)
    safe = np.where(stats.degenerate, 1.0, stats.std)
    out = (fv.data - stats.mean) / safe
    if stats.degenerate.any():
        out[..., stats.degenerate] = 0.0
    return replace(fv, data=out, stats=stats)
