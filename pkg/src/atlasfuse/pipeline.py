"""End-to-end label fusion for one region of interest.

The flow, shared by every fusion method: crop a working box around the
transferred atlas labels, rank atlases by mutual information and keep the
best, warp the winners' labels (and intensities) through their displacement
fields, derive the union support and the disagreement mask, then decide the
disagreeing voxels with the requested fusion method.  Patch-based stages
additionally select a smaller atlas subset by squared-intensity distance
after histogram matching.  Everything is deterministic for fixed inputs.
"""

import time
import warnings
from dataclasses import dataclass, fields as dataclass_fields

import numpy as np

from . import io as vio
from .crf import (
    CONTRAST_MIX_ANISOTROPIC,
    CONTRAST_MIX_ISOTROPIC,
    CrfParams,
    fuse_crf,
)
from .filters import ANISOTROPY_THRESHOLD, compute_bank, pooled_stats, select_bank, whiten
from .fusion import label_prior, majority_vote, staple_em, weighted_vote
from .knn import build as build_knn_model, image_likelihood_batch
from .patch import PatchConfig, fuse_patches
from .similarity import rank_atlases, semi_global_weight
from .volume import (
    AffineTransform,
    DisplacementField,
    Geometry,
    LabelMap,
    RegionOfInterest,
    Volume,
    crop,
    dice,
    dilate,
    embed,
    histogram_match,
    resample,
    signed_distance,
    transfer_labels_logodds,
    uncertainty_mask,
    union_support,
)

METHODS = ("mv", "staple", "wv", "crf", "patch", "combined")
BANK_KINDS = ("auto", "gaussian", "steerable")
_BANK_NAMES = {"gaussian": "gaussian12", "steerable": "steerable16"}


@dataclass(frozen=True)
class PipelineConfig:
    """Every knob of the fusion chain plus the file-level paths.

    Config files are flat ``key = value`` lines with these exact field
    names; command-line flags override file values.
    """

    method: str = "combined"
    n_rank: int = 15
    n_patch: int = 10
    roi_margin: int = 3
    mi_bins: int = 32
    hist_levels: int = 256
    bank: str = "auto"
    knn_k: int = 20
    prior_q: float = 4.0
    crf_lambda: float = 0.2
    # negative means: pick by grid anisotropy
    contrast_mix: float = -1.0
    patch_radius_mm: float = 1.5
    search_radius_mm: float = 4.0
    patch_threshold: float = 0.85
    beta_intensity: float = 0.5
    beta_label: float = 1.0
    seed: int = 0
    roi_name: str = "roi"
    target_path: str = ""
    truth_path: str = ""
    manifest_path: str = ""
    output_path: str = ""
    metrics_path: str = ""
    native_reference_path: str = ""
    target_affine_path: str = ""

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}")
        if self.bank not in BANK_KINDS:
            raise ValueError(f"bank must be one of {BANK_KINDS}")
        if self.n_rank < 1 or self.n_patch < 1:
            raise ValueError("atlas selection counts must be >= 1")
        if self.roi_margin < 0:
            raise ValueError("roi margin must be >= 0")
        if self.mi_bins < 2 or self.hist_levels < 2:
            raise ValueError("histogram sizes must be >= 2")
        if self.knn_k < 1:
            raise ValueError("knn_k must be >= 1")
        if self.prior_q <= 0:
            raise ValueError("prior exponent must be positive")
        if self.crf_lambda < 0:
            raise ValueError("pairwise strength must be >= 0")
        if self.contrast_mix > 1.0:
            raise ValueError("contrast mix must be <= 1")
        if not 0.0 < self.patch_threshold < 1.0:
            raise ValueError("patch threshold must lie in (0, 1)")
        if self.patch_radius_mm < 0 or self.search_radius_mm <= 0:
            raise ValueError("patch radii must be positive")
        if self.beta_intensity <= 0 or self.beta_label <= 0:
            raise ValueError("bandwidth factors must be positive")

    def resolved_contrast_mix(self, spacing) -> float:
        if self.contrast_mix >= 0.0:
            return self.contrast_mix
        ratio = max(spacing) / min(spacing)
        if ratio > ANISOTROPY_THRESHOLD:
            return CONTRAST_MIX_ANISOTROPIC
        return CONTRAST_MIX_ISOTROPIC


_CONFIG_TYPES = {f.name: type(getattr(PipelineConfig, f.name))
                 for f in dataclass_fields(PipelineConfig)}


def parse_config_text(text: str) -> dict:
    """Flat key = value lines; '#' starts a comment; keys are field names."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected key = value")
        key, _, val = line.partition("=")
        values[key.strip()] = val.strip()
    return values


def coerce_config(values: dict) -> PipelineConfig:
    """Build a config from string (or already-typed) values."""
    kwargs = {}
    for key, val in values.items():
        if key not in _CONFIG_TYPES:
            raise ValueError(f"unknown config key {key!r}")
        kind = _CONFIG_TYPES[key]
        if isinstance(val, str) and kind is not str:
            val = kind(val)
        kwargs[key] = val
    return PipelineConfig(**kwargs)


def load_config(path: str | None = None, overrides: dict | None = None) -> PipelineConfig:
    values = {}
    if path:
        with open(path) as fh:
            values.update(parse_config_text(fh.read()))
    if overrides:
        values.update({k: v for k, v in overrides.items() if v is not None})
    return coerce_config(values)


@dataclass(frozen=True)
class AtlasInput:
    """One library atlas in normalized space.

    ``affine`` maps target physical coordinates into this atlas (None is
    identity).  ``dfield`` is the full nonrigid target-to-atlas map: a
    DisplacementField on the target grid (full or pre-cropped), a callable
    geometry -> DisplacementField, or None when no registration exists.
    """

    atlas_id: str
    intensity: Volume
    labels: LabelMap
    affine: AffineTransform | None = None
    dfield: object = None


@dataclass
class FoldArtifacts:
    """Shared per-target stage outputs, reused across fusion methods."""

    config: PipelineConfig
    full_geometry: Geometry
    roi: RegionOfInterest
    target_roi: Volume
    atlas_ids: list
    selected: list
    affine_labels: dict
    affine_ints: dict
    warped_labels: dict
    warped_ints: dict
    omega: LabelMap
    uncertain: LabelMap
    base_mv: LabelMap
    seconds: dict
    _weights: list | None = None
    _crf_labels: LabelMap | None = None
    _matched: dict | None = None
    _ssd_order: list | None = None

    @property
    def warped_label_list(self):
        return [self.warped_labels[i] for i in self.selected]


def _resolve_dfield(entry, roi_geom: Geometry, full_geom: Geometry):
    if entry is None:
        return None
    if callable(entry):
        return entry(roi_geom)
    if not isinstance(entry, DisplacementField):
        raise TypeError(f"unsupported displacement field source {type(entry).__name__}")
    if entry.geometry == roi_geom:
        return entry
    if entry.dims == full_geom.dims:
        lo = [int(round((roi_geom.origin[a] - entry.origin[a]) / entry.spacing[a]))
              for a in range(3)]
        sl = tuple(slice(l, l + d) for l, d in zip(lo, roi_geom.dims))
        return DisplacementField(entry.disp[sl], entry.spacing, roi_geom.origin)
    raise ValueError("displacement field grid matches neither the target nor the roi")


def prepare_fold(target: Volume, atlases, config: PipelineConfig) -> FoldArtifacts:
    """Stages shared by all methods: crop, rank, transfer, support masks."""
    atlases = list(atlases)
    if not atlases:
        raise ValueError("atlas library is empty")
    for a in atlases:
        if a.labels is None:
            raise ValueError(f"atlas {a.atlas_id}: labels are required")
    seconds = {}
    full_geom = target.geometry

    t0 = time.perf_counter()
    atlas_sdms = [signed_distance(a.labels) for a in atlases]
    affine_full = [transfer_labels_logodds(sdm, a.affine, full_geom)
                   for sdm, a in zip(atlas_sdms, atlases)]
    roi = RegionOfInterest.bounding(affine_full, margin=config.roi_margin)
    target_roi = crop(target, roi)
    roi_geom = target_roi.geometry
    affine_labels = {i: crop(lab, roi) for i, lab in enumerate(affine_full)}
    affine_ints = {i: resample(a.intensity, a.affine, roi_geom)
                   for i, a in enumerate(atlases)}
    seconds["crop"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    ranked = rank_atlases(target_roi, [affine_ints[i] for i in range(len(atlases))],
                          metric="mi", ids=list(range(len(atlases))),
                          bins=config.mi_bins)
    n_rank = min(config.n_rank, len(atlases))
    selected = list(ranked.top(n_rank))
    seconds["rank"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    warped_labels, warped_ints = {}, {}
    for i in selected:
        field = _resolve_dfield(atlases[i].dfield, roi_geom, full_geom)
        if field is None:
            warnings.warn(
                f"atlas {atlases[i].atlas_id}: no displacement field; "
                "falling back to affine transfer", RuntimeWarning)
            warped_labels[i] = affine_labels[i]
            warped_ints[i] = affine_ints[i]
        else:
            warped_labels[i] = transfer_labels_logodds(atlas_sdms[i], field, roi_geom)
            warped_ints[i] = resample(atlases[i].intensity, field, roi_geom)
    seconds["transfer"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    label_list = [warped_labels[i] for i in selected]
    omega = union_support(label_list)
    uncertain = uncertainty_mask(label_list)
    base_mv = majority_vote(label_list)
    seconds["domain"] = time.perf_counter() - t0

    return FoldArtifacts(
        config=config, full_geometry=full_geom, roi=roi, target_roi=target_roi,
        atlas_ids=[a.atlas_id for a in atlases], selected=selected,
        affine_labels=affine_labels, affine_ints=affine_ints,
        warped_labels=warped_labels, warped_ints=warped_ints,
        omega=omega, uncertain=uncertain, base_mv=base_mv, seconds=seconds)


def _atlas_weights(art: FoldArtifacts) -> list:
    if art._weights is None:
        t0 = time.perf_counter()
        art._weights = [
            semi_global_weight(art.target_roi, art.warped_ints[i], art.omega,
                               bins=art.config.mi_bins)
            for i in art.selected
        ]
        art.seconds["weights"] = time.perf_counter() - t0
    return art._weights


def _crf_stage(art: FoldArtifacts) -> LabelMap:
    if art._crf_labels is not None:
        return art._crf_labels
    config = art.config
    labels = art.warped_label_list
    prior = label_prior(labels, _atlas_weights(art), q=config.prior_q)

    t0 = time.perf_counter()
    n_uncertain = int(art.uncertain.data.sum())
    if n_uncertain == 0:
        likelihood = np.zeros((0, 2))
    else:
        if config.bank == "auto":
            kind = select_bank(art.target_roi.spacing)
        else:
            kind = _BANK_NAMES[config.bank]
        atlas_banks = [compute_bank(art.warped_ints[i], kind) for i in art.selected]
        domain = dilate(art.omega, 1)
        stats = pooled_stats(atlas_banks, domain=domain)
        atlas_banks = [whiten(fv, stats) for fv in atlas_banks]
        target_bank = whiten(compute_bank(art.target_roi, kind), stats)
        n_train = int(domain.data.sum()) * len(atlas_banks)
        model = build_knn_model(atlas_banks, labels, domain,
                                k=min(config.knn_k, n_train))
        feats = target_bank.data[art.uncertain.data.astype(bool)]
        likelihood = image_likelihood_batch(model, feats)
    art.seconds["likelihood"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    params = CrfParams(
        lam=config.crf_lambda,
        contrast_mix=config.resolved_contrast_mix(art.target_roi.spacing))
    result = fuse_crf(art.target_roi, labels, prior, likelihood, params)
    art.seconds["crf"] = time.perf_counter() - t0
    art._crf_labels = result.labels
    return art._crf_labels


def _matched_and_ranked(art: FoldArtifacts):
    if art._matched is None:
        config = art.config
        t0 = time.perf_counter()
        art._matched = {i: histogram_match(art.affine_ints[i], art.target_roi,
                                           n_levels=config.hist_levels)
                        for i in art.selected}
        ranked = rank_atlases(art.target_roi,
                              [art._matched[i] for i in art.selected],
                              metric="ssd", mask=art.omega, ids=art.selected)
        art._ssd_order = list(ranked.top(min(config.n_patch, len(art.selected))))
        art.seconds["match"] = time.perf_counter() - t0
    return art._matched, art._ssd_order


def _patch_stage(art: FoldArtifacts, mode: str, base: LabelMap) -> LabelMap:
    config = art.config
    matched, order = _matched_and_ranked(art)
    t0 = time.perf_counter()
    patch_config = PatchConfig(
        patch_radius_mm=config.patch_radius_mm,
        search_radius_mm=config.search_radius_mm,
        threshold=config.patch_threshold,
        beta_intensity=config.beta_intensity,
        beta_label=config.beta_label,
        mode=mode)
    result = fuse_patches(
        art.target_roi, base, art.uncertain,
        [matched[i] for i in order],
        [art.affine_labels[i] for i in order],
        patch_config)
    art.seconds["patch"] = time.perf_counter() - t0
    return result.labels


def fuse_prepared(art: FoldArtifacts, method: str) -> LabelMap:
    """Run one fusion method on prepared artifacts; roi-space labels."""
    if method not in METHODS:
        raise ValueError(f"method must be one of {METHODS}")
    if method == "mv":
        return art.base_mv
    if method == "staple":
        t0 = time.perf_counter()
        out = staple_em(art.warped_label_list).labels
        art.seconds["staple"] = time.perf_counter() - t0
        return out
    if method == "wv":
        return weighted_vote(art.warped_label_list, _atlas_weights(art),
                             q=art.config.prior_q)
    if method == "crf":
        return _crf_stage(art)
    if method == "patch":
        return _patch_stage(art, "conventional", art.base_mv)
    return _patch_stage(art, "combined", _crf_stage(art))


@dataclass
class PipelineResult:
    labels: LabelMap
    labels_roi: LabelMap
    roi: RegionOfInterest
    method: str
    dice: float | None
    metrics_rows: list
    seconds: dict


def _metrics_rows(config: PipelineConfig, method: str, seconds: dict,
                  dice_value: float | None) -> list:
    rows = []
    for stage, secs in seconds.items():
        rows.append({"roi": config.roi_name, "method": method, "dice": "",
                     "stage": stage, "seconds": f"{secs:.6f}"})
    rows.append({"roi": config.roi_name, "method": method,
                 "dice": "" if dice_value is None else f"{dice_value:.6f}",
                 "stage": "total", "seconds": f"{sum(seconds.values()):.6f}"})
    for field in dataclass_fields(PipelineConfig):
        value = getattr(config, field.name)
        rows.append({"roi": config.roi_name, "method": method, "dice": "",
                     "stage": f"config:{field.name}={value}", "seconds": ""})
    return rows


def run_fusion(target: Volume, atlases, config: PipelineConfig,
               truth: LabelMap | None = None,
               native_reference: Geometry | None = None,
               native_affine: AffineTransform | None = None) -> PipelineResult:
    """Full chain for one target: prepare, fuse, embed, optional native-space
    resample, metrics."""
    if (native_reference is None) != (native_affine is None):
        raise ValueError("native resampling needs both a reference geometry "
                         "and the native-to-normalized affine")
    art = prepare_fold(target, atlases, config)
    labels_roi = fuse_prepared(art, config.method)

    t0 = time.perf_counter()
    labels_full = embed(labels_roi, art.roi, art.full_geometry)
    if native_reference is not None:
        labels_full = resample(labels_full, native_affine, native_reference,
                               mode="nearest")
    art.seconds["embed"] = time.perf_counter() - t0

    dice_value = None
    if truth is not None:
        dice_value = dice(labels_full, truth)
    rows = _metrics_rows(config, config.method, art.seconds, dice_value)
    return PipelineResult(labels=labels_full, labels_roi=labels_roi,
                          roi=art.roi, method=config.method, dice=dice_value,
                          metrics_rows=rows, seconds=art.seconds)


def rank_and_select(target: Volume, atlases, metric: str, n: int,
                    mask=None, bins: int = 32) -> list:
    """Rank the library against the target and keep the ``n`` best atlases.

    Atlas intensities are brought onto the target grid through their affines
    before scoring; the count is clamped to the library size.
    """
    atlases = list(atlases)
    if not atlases:
        raise ValueError("atlas library is empty")
    resampled = [resample(a.intensity, a.affine, target.geometry) for a in atlases]
    ranked = rank_atlases(target, resampled, metric=metric, mask=mask,
                          ids=list(range(len(atlases))), bins=bins)
    return [atlases[i] for i in ranked.top(max(1, min(n, len(atlases))))]


def load_atlases(manifest_path: str) -> list:
    entries = vio.read_manifest(manifest_path)
    atlases = []
    for e in entries:
        if not e["label_path"]:
            raise ValueError(f"atlas {e['id']}: manifest row lacks a label path")
        affine = vio.read_affine(e["affine_path"]) if e["affine_path"] else None
        dfield = vio.read_dfield(e["dfield_path"]) if e["dfield_path"] else None
        atlases.append(AtlasInput(
            atlas_id=e["id"],
            intensity=vio.read_volume(e["intensity_path"]),
            labels=vio.read_labels(e["label_path"]),
            affine=affine,
            dfield=dfield))
    return atlases


def run_pipeline(config: PipelineConfig) -> PipelineResult:
    """File-level driver: read everything, fuse, write results."""
    if not config.target_path:
        raise ValueError("target_path is required")
    if not config.manifest_path:
        raise ValueError("manifest_path is required")
    target = vio.read_volume(config.target_path)
    atlases = load_atlases(config.manifest_path)
    truth = vio.read_labels(config.truth_path) if config.truth_path else None
    native_reference = native_affine = None
    if config.native_reference_path or config.target_affine_path:
        if not (config.native_reference_path and config.target_affine_path):
            raise ValueError("native resampling needs both native_reference_path "
                             "and target_affine_path")
        native_reference = vio.read_volume(config.native_reference_path).geometry
        native_affine = vio.read_affine(config.target_affine_path)
    result = run_fusion(target, atlases, config, truth=truth,
                        native_reference=native_reference,
                        native_affine=native_affine)
    if config.output_path:
        vio.write_labels(config.output_path, result.labels)
    if config.metrics_path:
        vio.write_metrics(config.metrics_path, result.metrics_rows)
    return result
