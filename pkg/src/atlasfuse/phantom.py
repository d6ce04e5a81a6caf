"""Synthetic atlas cohorts with analytically known correspondences.

Every subject is one fixed implicit shape (a bent superellipsoid) seen
through a random smooth warp.  Warps are finite mixtures of separable
sinusoids, so they can be evaluated, differentiated, and inverted (by
fixed-point iteration) at arbitrary points.  Ground-truth displacement
fields between any two subjects follow by composing one forward warp
with another inverse; a band-limited perturbation of configurable RMS
emulates imperfect registration.
"""

import math
import os
from dataclasses import dataclass

import numpy as np

from . import io as vio
from .volume import (
    AffineTransform,
    DisplacementField,
    Geometry,
    LabelMap,
    Volume,
    dice,
    embed,
)

FOLD_GUARD_LIMIT = 0.85
_INVERSE_TOL = 1e-10
_INVERSE_MAX_ITER = 200
_WARP_MODES = 4
_WARP_MAX_TRIES = 20
_WARP_MAX_HARMONIC = 3
_TEXTURE_MODES = 12
_TEXTURE_MAX_HARMONIC = 6


def _mode_products(freq, phase, pts):
    """Products of per-axis sines for each mode; (m, 3) x (n, 3) -> (m, n)."""
    out = np.ones((freq.shape[0], pts.shape[0]))
    for a in range(3):
        out *= np.sin(freq[:, a, None] * pts[None, :, a] + phase[:, a, None])
    return out


@dataclass(frozen=True)
class ScalarModes:
    """A band-limited scalar field: sum of separable sinusoid modes."""

    amp: np.ndarray
    freq: np.ndarray
    phase: np.ndarray

    def values(self, pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64)
        if self.amp.size == 0:
            return np.zeros(pts.shape[0])
        return self.amp @ _mode_products(self.freq, self.phase, pts)

    def scaled(self, factor: float) -> "ScalarModes":
        return ScalarModes(self.amp * factor, self.freq, self.phase)


def _random_modes(rng, n_modes, extent, max_harmonic) -> ScalarModes:
    ks = rng.integers(1, int(max_harmonic) + 1, size=(n_modes, 3))
    phase = rng.uniform(0.0, 2.0 * math.pi, size=(n_modes, 3))
    # damp high harmonics so most energy stays in the smoothest modes
    amp = rng.normal(size=n_modes) / ks.sum(axis=1)
    freq = math.pi * ks / np.asarray(extent, dtype=np.float64)
    return ScalarModes(amp, freq, phase)


@dataclass(frozen=True)
class WarpField:
    """The map x -> x + u(x), u given per component by ScalarModes."""

    components: tuple

    @classmethod
    def zero(cls) -> "WarpField":
        empty = ScalarModes(np.zeros(0), np.zeros((0, 3)), np.zeros((0, 3)))
        return cls((empty, empty, empty))

    def displacement(self, pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64)
        return np.stack([c.values(pts) for c in self.components], axis=1)

    def forward(self, pts: np.ndarray) -> np.ndarray:
        return np.asarray(pts, dtype=np.float64) + self.displacement(pts)

    def inverse(self, pts: np.ndarray) -> np.ndarray:
        """Solve w(v) = p per point.  The iteration v <- p - u(v) contracts
        whenever the fold guard held at construction time.  Points converge
        at different rates, so each sweep only revisits unconverged ones."""
        pts = np.asarray(pts, dtype=np.float64)
        if all(c.amp.size == 0 for c in self.components):
            return pts.copy()
        v = pts.copy()
        active = np.arange(pts.shape[0])
        for _ in range(_INVERSE_MAX_ITER):
            v_new = pts[active] - self.displacement(v[active])
            moved = np.abs(v_new - v[active]).max(axis=1)
            v[active] = v_new
            active = active[moved >= _INVERSE_TOL]
            if active.size == 0:
                return v
        raise RuntimeError("warp inversion did not converge; field too strong")

    def max_gradient(self, pts: np.ndarray) -> float:
        """Largest Frobenius norm of the displacement Jacobian over pts."""
        pts = np.asarray(pts, dtype=np.float64)
        total = np.zeros(pts.shape[0])
        for comp in self.components:
            if comp.amp.size == 0:
                continue
            for a in range(3):
                d = np.ones((comp.amp.size, pts.shape[0]))
                for b in range(3):
                    ang = comp.freq[:, b, None] * pts[None, :, b] + comp.phase[:, b, None]
                    d *= np.cos(ang) if b == a else np.sin(ang)
                d *= comp.freq[:, a, None]
                total += (comp.amp @ d) ** 2
        return float(np.sqrt(total.max())) if total.size else 0.0

    def scaled(self, factor: float) -> "WarpField":
        return WarpField(tuple(c.scaled(factor) for c in self.components))


def _random_warp(rng, spec, rms_mm, guard_pts):
    """Random warp scaled to the requested RMS vector magnitude over the
    grid; returns (warp or None, max gradient)."""
    if rms_mm == 0.0:
        return WarpField.zero(), 0.0
    extent = [d * s for d, s in zip(spec.dims, spec.spacing)]
    max_k = [max(1, min(_WARP_MAX_HARMONIC, int(e / spec.smoothness_mm)))
             for e in extent]
    comps = tuple(_random_modes(rng, _WARP_MODES, extent, max(max_k))
                  for _ in range(3))
    raw = WarpField(comps)
    disp = raw.displacement(guard_pts)
    rms = math.sqrt(float((disp ** 2).sum(axis=1).mean()))
    if rms == 0.0:
        raise RuntimeError("degenerate random warp draw")
    warp = raw.scaled(rms_mm / rms)
    grad = warp.max_gradient(guard_pts)
    if grad > FOLD_GUARD_LIMIT:
        return None, grad
    return warp, grad


@dataclass(frozen=True)
class PhantomSpec:
    """Cohort recipe: grid, base shape, warp statistics, intensity model."""

    dims: tuple = (64, 48, 64)
    spacing: tuple = (1.0, 1.0, 1.0)
    axes_mm: tuple = (11.0, 4.3, 5.5)
    exponent: float = 2.5
    bend_per_mm: float = 0.02
    deform_mm: float = 2.0
    smoothness_mm: float = 24.0
    residual_mm: float = 1.5
    # cohorts model subjects after scale-normalizing registration, so the
    # per-subject foreground volume stays within this band of the template's
    volume_band: tuple = (0.85, 1.15)
    fg_mean: float = 120.0
    bg_mean: float = 60.0
    texture_amp: float = 8.0
    noise_sigma: float = 28.0
    bias_amp: float = 0.10
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        object.__setattr__(self, "axes_mm", tuple(float(a) for a in self.axes_mm))
        object.__setattr__(self, "volume_band",
                           tuple(float(b) for b in self.volume_band))
        if len(self.dims) != 3 or any(d < 8 for d in self.dims):
            raise ValueError("grid dims must be three counts >= 8")
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise ValueError("spacing must be positive")
        if len(self.axes_mm) != 3 or any(a <= 0 for a in self.axes_mm):
            raise ValueError("shape axes must be positive")
        if self.exponent <= 0:
            raise ValueError("shape exponent must be positive")
        if self.fg_mean == self.bg_mean:
            raise ValueError("foreground and background means must differ")
        if self.deform_mm < 0 or self.residual_mm < 0:
            raise ValueError("deformation and residual magnitudes must be >= 0")
        if self.smoothness_mm <= 0:
            raise ValueError("smoothness must be positive")
        if self.noise_sigma < 0 or self.texture_amp < 0:
            raise ValueError("noise and texture amplitudes must be >= 0")
        if not 0.0 <= self.bias_amp < 1.0:
            raise ValueError("bias amplitude must lie in [0, 1)")
        if len(self.volume_band) != 2 or not (
                0.0 < self.volume_band[0] <= 1.0 <= self.volume_band[1]):
            raise ValueError("volume band must be (lo, hi) bracketing 1")

    @property
    def geometry(self) -> Geometry:
        return Geometry(self.dims, self.spacing, (0.0, 0.0, 0.0))

    @property
    def center_mm(self) -> np.ndarray:
        return np.array([(d - 1) * s / 2.0 for d, s in zip(self.dims, self.spacing)])


def shape_inside(points: np.ndarray, spec: PhantomSpec) -> np.ndarray:
    """Membership test of the bent superellipsoid at physical points (n, 3)."""
    q = np.asarray(points, dtype=np.float64) - spec.center_mm
    bent = q.copy()
    bent[:, 1] -= spec.bend_per_mm * q[:, 0] ** 2
    ax = np.asarray(spec.axes_mm)
    return (np.abs(bent / ax) ** spec.exponent).sum(axis=1) <= 1.0


@dataclass(frozen=True)
class PhantomSubject:
    subject_id: str
    intensity: Volume
    labels: LabelMap
    warp: WarpField
    affine: AffineTransform


@dataclass
class Cohort:
    spec: PhantomSpec
    subjects: list

    def __len__(self) -> int:
        return len(self.subjects)

    def _grid_points(self, geometry=None) -> np.ndarray:
        geom = geometry if geometry is not None else self.spec.geometry
        return geom.physical_grid().T.copy()

    def _residual_field(self, target_index: int, atlas_index: int,
                        residual_mm: float) -> WarpField:
        rng = np.random.default_rng(
            np.random.SeedSequence([self.spec.seed, 4, target_index, atlas_index]))
        spec = self.spec
        extent = [d * s for d, s in zip(spec.dims, spec.spacing)]
        comps = tuple(_random_modes(rng, _WARP_MODES, extent, _WARP_MAX_HARMONIC)
                      for _ in range(3))
        raw = WarpField(comps)
        pts = self._grid_points()
        disp = raw.displacement(pts)
        rms = math.sqrt(float((disp ** 2).sum(axis=1).mean()))
        return raw.scaled(residual_mm / rms)

    def pair_field(self, target_index: int, atlas_index: int,
                   residual_mm: float | None = None,
                   geometry: Geometry | None = None) -> DisplacementField:
        """True correspondence from target voxels into the atlas subject,
        optionally degraded by a smooth residual of the given RMS."""
        if target_index == atlas_index:
            raise ValueError("pair field needs two distinct subjects")
        if residual_mm is None:
            residual_mm = self.spec.residual_mm
        geom = geometry if geometry is not None else self.spec.geometry
        pts = self._grid_points(geom)
        warped = self.subjects[target_index].warp.forward(pts)
        matched = self.subjects[atlas_index].warp.inverse(warped)
        disp = matched - pts
        if residual_mm > 0.0:
            res = self._residual_field(target_index, atlas_index, residual_mm)
            disp = disp + res.displacement(pts)
        return DisplacementField(disp.reshape(geom.dims + (3,)), geom.spacing,
                                 geom.origin)


def _bias_field(rng, spec: PhantomSpec, pts: np.ndarray) -> np.ndarray:
    """Multiplicative low-order polynomial field in [1-amp, 1+amp]."""
    if spec.bias_amp == 0.0:
        return np.ones(pts.shape[0])
    half = np.array([max(d - 1, 1) * s / 2.0
                     for d, s in zip(spec.dims, spec.spacing)])
    xi = (pts - spec.center_mm) / half
    terms = [np.ones(pts.shape[0]), xi[:, 0], xi[:, 1], xi[:, 2],
             xi[:, 0] * xi[:, 1], xi[:, 0] * xi[:, 2], xi[:, 1] * xi[:, 2],
             xi[:, 0] ** 2, xi[:, 1] ** 2, xi[:, 2] ** 2]
    coef = rng.normal(size=len(terms))
    poly = sum(c * t for c, t in zip(coef, terms))
    peak = float(np.abs(poly).max())
    return 1.0 + spec.bias_amp * poly / peak


def _texture_modes(spec: PhantomSpec) -> ScalarModes:
    if spec.texture_amp == 0.0:
        return ScalarModes(np.zeros(0), np.zeros((0, 3)), np.zeros((0, 3)))
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 101]))
    extent = [d * s for d, s in zip(spec.dims, spec.spacing)]
    modes = _random_modes(rng, _TEXTURE_MODES, extent, _TEXTURE_MAX_HARMONIC)
    return modes


def generate_cohort(spec: PhantomSpec, n: int = 11) -> Cohort:
    """Deterministic cohort of n warped renderings of the base shape."""
    if n < 3:
        raise ValueError("a cohort needs at least three subjects")
    geom = spec.geometry
    pts = geom.physical_grid().T.copy()
    texture = _texture_modes(spec)
    if spec.texture_amp > 0.0:
        tex_grid = texture.values(pts)
        tex_rms = math.sqrt(float((tex_grid ** 2).mean()))
        texture = texture.scaled(spec.texture_amp / tex_rms)

    # fold-guard sample: the grid box padded so wandering inverse iterates
    # stay inside the region where the gradient bound was checked
    pad = 4.0 * spec.deform_mm + 2.0
    axes_pts = [np.arange(-pad, d * s + pad, 2.0)
                for d, s in zip(spec.dims, spec.spacing)]
    guard_pts = np.stack(np.meshgrid(*axes_pts, indexing="ij"),
                         axis=-1).reshape(-1, 3)

    v_template = int(shape_inside(pts, spec).sum())
    lo, hi = spec.volume_band

    subjects = []
    for s_idx in range(n):
        warp = None
        # rejected draws redraw from a per-attempt stream, so the first
        # (usually only) draw is unaffected by the retry path.  Two causes
        # reject a draw: the fold guard (a draw past twice the guard limit
        # cannot be rescued by redrawing, since deviations between draws
        # stay well below that factor), and the foreground-volume band,
        # which enforces the scale-normalized-cohort assumption
        for attempt in range(_WARP_MAX_TRIES):
            entropy = [spec.seed, 1, s_idx] + ([attempt] if attempt else [])
            warp_rng = np.random.default_rng(np.random.SeedSequence(entropy))
            warp, grad = _random_warp(warp_rng, spec, spec.deform_mm, guard_pts)
            if warp is None:
                if grad > 2.0 * FOLD_GUARD_LIMIT:
                    raise ValueError(
                        f"deformation {spec.deform_mm} mm at smoothness "
                        f"{spec.smoothness_mm} mm risks folding "
                        f"(max gradient {grad:.3f})")
                continue
            warped_pts = warp.forward(pts)
            inside = shape_inside(warped_pts, spec)
            if lo * v_template <= inside.sum() <= hi * v_template:
                break
            warp = None
        if warp is None:
            raise ValueError(
                f"no acceptable warp in {_WARP_MAX_TRIES} draws "
                f"(deformation {spec.deform_mm} mm, smoothness "
                f"{spec.smoothness_mm} mm, volume band {spec.volume_band})")
        if not inside.any() or inside.all():
            raise ValueError("base shape does not intersect the grid properly")
        labels = inside.reshape(spec.dims)

        values = np.where(labels.ravel(), spec.fg_mean, spec.bg_mean)
        if spec.texture_amp > 0.0:
            values = values + texture.values(warped_pts)
        bias_rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 2, s_idx]))
        values = values * _bias_field(bias_rng, spec, pts)
        if spec.noise_sigma > 0.0:
            # measurement noise splits its variance evenly between an
            # uncorrelated part and a smooth spatially correlated part,
            # like scanner noise plus reconstruction/motion artifacts
            part = spec.noise_sigma / math.sqrt(2.0)
            smooth_rng = np.random.default_rng(
                np.random.SeedSequence([spec.seed, 5, s_idx]))
            extent = [d * s for d, s in zip(spec.dims, spec.spacing)]
            smooth = _random_modes(smooth_rng, _TEXTURE_MODES, extent,
                                   _TEXTURE_MAX_HARMONIC)
            smooth_grid = smooth.values(pts)
            smooth_rms = math.sqrt(float((smooth_grid ** 2).mean()))
            values = values + smooth_grid * (part / smooth_rms)
            noise_rng = np.random.default_rng(
                np.random.SeedSequence([spec.seed, 3, s_idx]))
            values = values + noise_rng.normal(scale=part, size=values.shape)
        subjects.append(PhantomSubject(
            subject_id=f"sub{s_idx:02d}",
            intensity=Volume(values.reshape(spec.dims), spec.spacing),
            labels=LabelMap(labels, spec.spacing),
            warp=warp,
            affine=AffineTransform.identity(),
        ))
    return Cohort(spec=spec, subjects=subjects)


_SPEC_TUPLE_FIELDS = {"dims", "spacing", "axes_mm"}
_SPEC_INT_FIELDS = {"seed"}


def parse_phantom_spec(text: str) -> PhantomSpec:
    """Flat key = value lines; keys are PhantomSpec field names."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key = value")
        key, _, val = line.partition("=")
        key = key.strip()
        val = val.strip()
        if key not in PhantomSpec.__dataclass_fields__:
            raise ValueError(f"line {lineno}: unknown key {key!r}")
        if key in _SPEC_TUPLE_FIELDS:
            values[key] = tuple(float(v) for v in val.replace(",", " ").split())
        elif key in _SPEC_INT_FIELDS:
            values[key] = int(val)
        else:
            values[key] = float(val)
    return PhantomSpec(**values)


def write_cohort(cohort: Cohort, out_dir: str, target_index: int = 0,
                 fmt: str = "nii") -> dict:
    """Write volumes, the target's true displacement fields, and a library
    manifest so the files drive the file-level pipeline directly."""
    if fmt not in ("nii", "mvol"):
        raise ValueError(f"unknown volume format {fmt!r}")
    if not 0 <= target_index < len(cohort):
        raise ValueError("target index out of range")
    os.makedirs(out_dir, exist_ok=True)
    ext = ".nii" if fmt == "nii" else ".mvol"
    entries = []
    paths = {}
    for idx, sub in enumerate(cohort.subjects):
        int_path = os.path.join(out_dir, f"{sub.subject_id}_int{ext}")
        lab_path = os.path.join(out_dir, f"{sub.subject_id}_lab{ext}")
        vio.write_volume(int_path, sub.intensity)
        vio.write_labels(lab_path, sub.labels)
        if idx == target_index:
            paths["target_intensity"] = int_path
            paths["target_labels"] = lab_path
            continue
        dfield_path = os.path.join(
            out_dir, f"t{target_index:02d}_to_{sub.subject_id}_dfield{ext}")
        field = cohort.pair_field(target_index, idx)
        vio.write_dfield(dfield_path, field)
        entries.append({
            "id": sub.subject_id,
            "intensity_path": os.path.basename(int_path),
            "label_path": os.path.basename(lab_path),
            "affine_path": "",
            "dfield_path": os.path.basename(dfield_path),
        })
    manifest = os.path.join(out_dir, "manifest.csv")
    vio.write_manifest(manifest, entries)
    paths["manifest"] = manifest
    paths["out_dir"] = out_dir
    return paths


@dataclass(frozen=True)
class LooResult:
    """Per-fold Dice table from a leave-one-out sweep over the cohort."""

    methods: tuple
    rows: tuple  # (target_id, method, dice)
    summary: dict  # method -> (mean, std)

    def format_csv(self) -> str:
        lines = ["method,mean_dice,std_dice"]
        for method in self.methods:
            mean, std = self.summary[method]
            lines.append(f"{method},{mean:.6f},{std:.6f}")
        return "\n".join(lines) + "\n"


def leave_one_out(cohort: Cohort, config=None,
                  methods=("mv", "staple", "wv", "crf", "patch", "combined"),
                  residual_mm: float | None = None) -> LooResult:
    """Segment every subject from the others and score against its truth.

    The shared per-fold stages (crop, rank, transfer, support) run once and
    all requested methods reuse them.  Pair correspondences come from the
    cohort's composed generation warps, perturbed by ``residual_mm``
    (defaulting to the cohort spec's value).
    """
    from . import pipeline

    if config is None:
        config = pipeline.PipelineConfig()
    methods = tuple(methods)
    for m in methods:
        if m not in pipeline.METHODS:
            raise ValueError(f"unknown fusion method {m!r}")
    rows = []
    per_method = {m: [] for m in methods}
    for t, target in enumerate(cohort.subjects):
        atlases = []
        for a, sub in enumerate(cohort.subjects):
            if a == t:
                continue

            def factory(geom, t=t, a=a):
                return cohort.pair_field(t, a, residual_mm=residual_mm,
                                         geometry=geom)

            atlases.append(pipeline.AtlasInput(
                atlas_id=sub.subject_id, intensity=sub.intensity,
                labels=sub.labels, affine=None, dfield=factory))
        art = pipeline.prepare_fold(target.intensity, atlases, config)
        for method in methods:
            labels_roi = pipeline.fuse_prepared(art, method)
            full = embed(labels_roi, art.roi, art.full_geometry)
            score = dice(full, target.labels)
            rows.append((target.subject_id, method, score))
            per_method[method].append(score)
    summary = {}
    for method in methods:
        vals = np.asarray(per_method[method])
        summary[method] = (float(vals.mean()), float(vals.std()))
    return LooResult(methods=methods, rows=tuple(rows), summary=summary)
