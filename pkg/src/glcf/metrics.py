"""Threshold-free detection metrics: AUROC, pixel AUROC, and sPRO.

AUROC uses the exact rank statistic (ties contribute one half), so tests can
compare it against pair counting with zero tolerance. sPRO sweeps every
achievable threshold, computes the mean saturated per-region overlap against
pixel false-positive rate, and integrates the curve up to an FPR limit,
normalized by that limit; regions are 8-connected components of the masks.
"""

from __future__ import annotations

import numpy as np
from scipy import ndimage
from scipy.stats import rankdata

from .errors import ConfigError, ContractError


def auroc(scores, labels) -> float:
    """Mann-Whitney AUROC with midrank tie handling."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise ContractError(f"scores ({scores.shape}) and labels ({labels.shape}) differ")
    if not np.isin(labels, (0, 1)).all():
        raise ContractError("labels must be 0 or 1")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ContractError("AUROC needs at least one positive and one negative")
    ranks = rankdata(scores, method="average")
    pos_rank_sum = float(ranks[labels == 1].sum())
    return (pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def pixel_auroc(maps, masks) -> float:
    """AUROC over the pooled pixel population of all maps against masks."""
    maps = [np.asarray(m, dtype=np.float64) for m in maps]
    masks = [np.asarray(m) for m in masks]
    if len(maps) != len(masks):
        raise ContractError(f"{len(maps)} maps vs {len(masks)} masks")
    for m, g in zip(maps, masks):
        if m.shape != g.shape:
            raise ContractError(f"map shape {m.shape} != mask shape {g.shape}")
    scores = np.concatenate([m.ravel() for m in maps])
    labels = np.concatenate([(g > 0).astype(np.int64).ravel() for g in masks])
    return auroc(scores, labels)


_CONN8 = np.ones((3, 3), dtype=int)


def spro_curve(maps, masks, saturation_fraction: float = 1.0):
    """(fpr, spro) points over all achievable thresholds, plus (0,0) and (1,1).

    Thresholds detect with ``score >= t``. Per region the overlap is
    min(1, hits / (saturation_fraction * area)); the curve value is the mean
    over every connected region of every mask.
    """
    if not 0 < saturation_fraction <= 1:
        raise ConfigError(f"saturation_fraction must be in (0,1], got {saturation_fraction}")
    maps = [np.asarray(m, dtype=np.float64) for m in maps]
    masks = [np.asarray(g) > 0 for g in masks]
    if len(maps) != len(masks):
        raise ContractError(f"{len(maps)} maps vs {len(masks)} masks")

    region_scores: list[np.ndarray] = []  # sorted descending per region
    region_caps: list[float] = []
    normal_scores = []
    for m, g in zip(maps, masks):
        if m.shape != g.shape:
            raise ContractError(f"map shape {m.shape} != mask shape {g.shape}")
        labeled, count = ndimage.label(g, structure=_CONN8)
        for rid in range(1, count + 1):
            px = m[labeled == rid]
            region_scores.append(np.sort(px)[::-1])
            region_caps.append(saturation_fraction * px.size)
        normal_scores.append(m[~g].ravel())
    if not region_scores:
        raise ContractError("no ground-truth regions: sPRO is undefined")
    normal = np.sort(np.concatenate(normal_scores))
    n_normal = normal.size
    if n_normal == 0:
        raise ContractError("no normal pixels: FPR is undefined")

    thresholds = np.unique(np.concatenate([np.concatenate(region_scores), normal]))[::-1]
    # hits for score >= t via position in the ascending-sorted normal array
    fpr = 1.0 - np.searchsorted(normal, thresholds, side="left") / n_normal
    spro_vals = np.zeros(thresholds.size)
    for px, cap in zip(region_scores, region_caps):
        ascending = px[::-1]
        hits = px.size - np.searchsorted(ascending, thresholds, side="left")
        spro_vals += np.minimum(1.0, hits / cap)
    spro_vals /= len(region_scores)

    fpr = np.concatenate([[0.0], fpr, [1.0]])
    spro_vals = np.concatenate([[0.0], spro_vals, [1.0]])
    order = np.lexsort((spro_vals, fpr))
    return fpr[order], spro_vals[order]


def spro(maps, masks, saturation_fraction: float = 1.0,
         fpr_limit: float = 0.05) -> float:
    """Area under the sPRO-vs-FPR curve up to ``fpr_limit``, normalized."""
    if not 0 < fpr_limit <= 1:
        raise ConfigError(f"fpr_limit must be in (0,1], got {fpr_limit}")
    fpr, vals = spro_curve(maps, masks, saturation_fraction)
    if fpr_limit < 1.0:
        keep = fpr <= fpr_limit
        cut = float(np.interp(fpr_limit, fpr, vals))
        fpr = np.concatenate([fpr[keep], [fpr_limit]])
        vals = np.concatenate([vals[keep], [cut]])
    area = float(np.trapezoid(vals, fpr))
    return area / fpr_limit
