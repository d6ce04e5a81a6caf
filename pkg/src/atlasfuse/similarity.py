"""Global and semi-global image similarity: mutual information, sum of
squared differences, and atlas ranking."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_BINS = 32


@dataclass(frozen=True)
class RankedAtlasList:
    """Atlas ids with scores, best first.  Larger is more similar for MI,
    smaller is more similar for SSD."""

    metric: str
    entries: tuple

    @property
    def ids(self) -> tuple:
        return tuple(e[0] for e in self.entries)

    def top(self, n: int) -> tuple:
        return self.ids[:n]


def _masked_values(vol, mask):
    if mask is None:
        return vol.data.ravel()
    if mask.dims != vol.dims:
        raise ValueError("mask geometry must match the volumes")
    return vol.data[mask.data.astype(bool)]


def mutual_information(a, b, mask=None, bins: int = DEFAULT_BINS) -> float:
    """MI in nats from a bins x bins joint histogram over the masked voxels.

    Bin edges are per-volume min-max over the mask; values at the max edge
    fall in the last bin.  A volume that is constant under the mask carries
    zero entropy, so 0 is returned.
    """
    if a.dims != b.dims:
        raise ValueError("volumes must share one grid")
    av = _masked_values(a, mask)
    bv = _masked_values(b, mask)
    if av.size < bins:
        raise ValueError(f"need at least {bins} masked voxels, found {av.size}")
    if av.min() == av.max() or bv.min() == bv.max():
        return 0.0
    counts, _, _ = np.histogram2d(av, bv, bins=bins)
    pxy = counts / counts.sum()
    px = pxy.sum(axis=1)
    py = pxy.sum(axis=0)
    nz = pxy > 0
    outer = px[:, None] * py[None, :]
    mi = float(np.sum(pxy[nz] * np.log(pxy[nz] / outer[nz])))
    # clamp tiny negative round-off; MI is non-negative
    return max(mi, 0.0)


def ssd(a, b, mask=None) -> float:
    """Sum of squared intensity differences over the masked voxels."""
    if a.dims != b.dims:
        raise ValueError("volumes must share one grid")
    av = _masked_values(a, mask)
    bv = _masked_values(b, mask)
    diff = av - bv
    return float(np.dot(diff, diff))


def rank_atlases(target, atlases, metric: str = "mi", mask=None,
                 ids=None, bins: int = DEFAULT_BINS) -> RankedAtlasList:
    """Rank atlases against the target, best first; deterministic ties by
    ascending atlas id."""
    metric = metric.lower()
    if metric not in ("mi", "ssd"):
        raise ValueError(f"unknown ranking metric {metric!r}")
    atlases = list(atlases)
    if ids is None:
        ids = list(range(len(atlases)))
    ids = list(ids)
    if len(ids) != len(atlases):
        raise ValueError("one id per atlas required")
    if len(set(ids)) != len(ids):
        raise ValueError("atlas ids must be unique")
    scored = []
    for atlas_id, atlas in zip(ids, atlases):
        if metric == "mi":
            score = mutual_information(target, atlas, mask=mask, bins=bins)
        else:
            score = ssd(target, atlas, mask=mask)
        scored.append((atlas_id, score))
    if metric == "mi":
        scored.sort(key=lambda e: (-e[1], e[0]))
    else:
        scored.sort(key=lambda e: (e[1], e[0]))
    return RankedAtlasList(metric=metric, entries=tuple(scored))


def semi_global_weight(target, warped_atlas, mask, bins: int = DEFAULT_BINS) -> float:
    """One similarity scalar per atlas: MI between the target and the warped
    atlas over the support mask (the union of transferred labels)."""
    if mask is None:
        raise ValueError("semi-global weighting requires a support mask")
    return mutual_information(target, warped_atlas, mask=mask, bins=bins)
