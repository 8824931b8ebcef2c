"""Pre-processing chain: clustering, coincidence pairing, noise filter,
saturation inversion, energy calibration and interaction positioning."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numba
import numpy as np

from .core import (
    N_SIPMS, PIXELS_PER_SIPM, SPADS_PER_PIXEL, ClusterArrays, CoincidenceSet, Cluster,
    DetectorKind, geometry_for, pixel_of_sipm, sipm_of_pixel,
)
from .errors import PositionUndefined, SaturatedChannel, SortOrderError

log = logging.getLogger(__name__)

CLUSTER_WINDOW_PS = 40_000.0
COINCIDENCE_WINDOW_PS = 10_000.0
MIN_PHOTONS = 400.0
MAX_PHOTONS = 4000.0
PHOTOPEAK_ENERGY_KEV = 511.0


# --------------------------------------------------------------------------
# clustering and coincidence search


@numba.njit(cache=True)
def _cluster_starts(ts, window):
    n = ts.shape[0]
    starts = np.empty(n, np.int64)
    k = 0
    anchor = 0.0
    for i in range(n):
        if k == 0 or ts[i] - anchor > window:
            starts[k] = i
            k += 1
            anchor = ts[i]
    return starts[:k]


def cluster_hits(ts, window: float = CLUSTER_WINDOW_PS) -> np.ndarray:
    """Start indices of clusters in a time-sorted hit stream.

    A hit joins the open cluster while it lies within ``window`` of the
    cluster's first timestamp; otherwise it opens a new cluster.
    """
    ts = np.ascontiguousarray(ts, dtype=np.float64)
    if ts.size and np.any(np.diff(ts) < 0):
        raise SortOrderError("hit stream is not sorted by timestamp")
    return _cluster_starts(ts, float(window))


def split_clusters(ts, window: float = CLUSTER_WINDOW_PS) -> list:
    """Convenience: list of index arrays, one per cluster."""
    starts = cluster_hits(ts, window)
    bounds = np.append(starts, len(ts))
    return [np.arange(a, b) for a, b in zip(bounds[:-1], bounds[1:])]


@numba.njit(cache=True)
def _pair_merged(t, side, window):
    n = t.shape[0]
    partner = np.full(n, -1, np.int64)
    for p in range(n):
        if partner[p] >= 0:
            continue
        q = p + 1
        while q < n and t[q] - t[p] <= window:
            if side[q] != side[p] and partner[q] < 0:
                partner[p] = q
                partner[q] = p
                break
            q += 1
    return partner


def find_coincidences(first_a, first_b, window: float = COINCIDENCE_WINDOW_PS) -> np.ndarray:
    """Pair clusters of two detectors by their first timestamps.

    Sliding scan over the merged, time-ordered cluster sequence: each unpaired
    cluster takes the earliest later unpaired cluster of the other detector
    within ``window``. Returns an ``(k, 2)`` array of ``(index_a, index_b)``.
    """
    a = np.asarray(first_a, dtype=np.float64)
    b = np.asarray(first_b, dtype=np.float64)
    if (a.size and np.any(np.diff(a) < 0)) or (b.size and np.any(np.diff(b) < 0)):
        raise SortOrderError("cluster first timestamps must be sorted")
    t = np.concatenate([a, b])
    side = np.concatenate([np.zeros(len(a), np.int8), np.ones(len(b), np.int8)])
    local = np.concatenate([np.arange(len(a)), np.arange(len(b))])
    order = np.lexsort((side, t))
    partner = _pair_merged(t[order], side[order], float(window))
    pos = np.nonzero((partner >= 0) & (side[order] == 0))[0]
    ia = local[order[pos]]
    ib = local[order[partner[pos]]]
    return np.column_stack([ia, ib]).astype(np.int64).reshape(-1, 2)


# --------------------------------------------------------------------------
# photon counting


def invert_saturation(count, n_spad: int = SPADS_PER_PIXEL):
    """Incident photon estimate ``-n_spad * ln(1 - count / n_spad)``."""
    c = np.asarray(count, dtype=np.float64)
    if np.any(c >= n_spad):
        raise SaturatedChannel(f"pixel count reached the SPAD total ({n_spad})")
    if np.any(c < 0):
        raise ValueError("negative pixel count")
    out = -n_spad * np.log1p(-c / n_spad)
    return float(out) if out.ndim == 0 else out


def total_photons(side: ClusterArrays, n_spad: int = SPADS_PER_PIXEL) -> np.ndarray:
    """Saturation-corrected photon sum over all hits of each cluster."""
    counts = side.counts.astype(np.float64)
    counts[side.sipm < 0] = 0.0
    return invert_saturation(counts, n_spad).sum(axis=(1, 2))


def cluster_total_photons(cluster: Cluster, n_spad: int = SPADS_PER_PIXEL) -> float:
    return float(sum(invert_saturation(np.asarray(h.pixel_counts), n_spad).sum() for h in cluster.hits))


def apply_noise_filter(total, lo: float = MIN_PHOTONS, hi: float = MAX_PHOTONS):
    """Keep mask: totals inside ``[lo, hi]``. NaN (empty cluster) is rejected."""
    t = np.asarray(total, dtype=np.float64)
    keep = (t >= lo) & (t <= hi)
    return bool(keep) if keep.ndim == 0 else keep


def cluster_passes_filter(cluster: Cluster, lo=MIN_PHOTONS, hi=MAX_PHOTONS) -> bool:
    if not cluster.hits:
        return False
    return apply_noise_filter(cluster_total_photons(cluster), lo, hi)


# --------------------------------------------------------------------------
# positioning


def pixel_image_64(side: ClusterArrays) -> np.ndarray:
    """(n, 64) raw counts in row-major pixel order (row * 8 + col), NaN where no hit."""
    img = side.pixel_image()  # (n, 16, 4)
    out = np.full((len(side), 64), np.nan)
    sipm = np.repeat(np.arange(N_SIPMS), PIXELS_PER_SIPM)
    sub = np.tile(np.arange(PIXELS_PER_SIPM), N_SIPMS)
    col, row = pixel_of_sipm(sipm, sub)
    out[:, row * 8 + col] = img.reshape(len(side), -1)
    return out


def max_pixel_position(img64: np.ndarray, kind=DetectorKind.ONE_TO_ONE) -> np.ndarray:
    """Centre of the highest-count pixel; ties go to the lowest pixel index."""
    geom = geometry_for(kind)
    filled = np.nan_to_num(img64, nan=-1.0)
    if np.any(filled.max(axis=1) <= 0):
        raise PositionUndefined("cluster has no photon counts")
    best = np.argmax(filled, axis=1)
    x, y = geom.pixel_center(best % 8, best // 8)
    return np.column_stack([x, y])


@dataclass
class SlabPositioner:
    """Per-axis boosted regressors mapping the 64-pixel light pattern to (x, y, DOI)."""

    models: tuple  # three TreeEnsemble objects

    @staticmethod
    def features(img64: np.ndarray) -> np.ndarray:
        tot = np.nansum(img64, axis=1, keepdims=True)
        with np.errstate(invalid="ignore", divide="ignore"):
            frac = img64 / tot
        return np.column_stack([frac, tot])

    @classmethod
    def fit(cls, side: ClusterArrays, true_pos: np.ndarray, hp=None, val_fraction=0.2):
        from . import boost

        hp = hp or boost.HyperParams(max_depth=8, learning_rate=0.3, n_max=150,
                                     min_samples_leaf=20)
        X = cls.features(pixel_image_64(side))
        n = len(X)
        n_val = int(n * val_fraction)
        models = []
        for axis in range(3):
            y = true_pos[:, axis]
            ens, _ = boost.train(X[n_val:], y[n_val:], X[:n_val], y[:n_val], hp)
            models.append(ens)
        return cls(tuple(models))

    def predict(self, side: ClusterArrays) -> np.ndarray:
        X = self.features(pixel_image_64(side))
        if np.any(np.nansum(pixel_image_64(side), axis=1) <= 0):
            raise PositionUndefined("cluster has no photon counts")
        return np.column_stack([m.predict(X) for m in self.models])


def estimate_position(side: ClusterArrays, positioner: Optional[SlabPositioner] = None) -> np.ndarray:
    img = pixel_image_64(side)
    if side.kind == DetectorKind.ONE_TO_ONE:
        return max_pixel_position(img)
    if positioner is None:
        raise ValueError("slab positioning needs a trained SlabPositioner")
    return positioner.predict(side)


def estimate_cluster_position(cluster: Cluster, positioner=None):
    side = ClusterArrays.empty(cluster.detector_id, 1)
    for j, h in enumerate(cluster.hits):
        side.sipm[0, j] = h.sipm_id
        side.ts[0, j] = h.timestamp_ps
        side.counts[0, j] = h.pixel_counts
    side.n_hits[0] = len(cluster.hits)
    return tuple(estimate_position(side, positioner)[0])


# --------------------------------------------------------------------------
# energy calibration


def find_photopeak(values, n_bins: int = 60, iterations: int = 2):
    """Photopeak location: histogram-mode seed refined by Gaussian fits over +-1.5 sigma."""
    from .fitstat import fit_histogram

    v = np.asarray(values, dtype=np.float64)
    v = v[np.isfinite(v)]
    hi = np.quantile(v, 0.995)
    counts, edges = np.histogram(v, bins=n_bins, range=(0.0, hi))
    centres = 0.5 * (edges[1:] + edges[:-1])
    # ignore the lowest quarter of the range where the Compton continuum piles up
    start = n_bins // 4
    mu = centres[start + int(np.argmax(counts[start:]))]
    sigma = 0.06 * mu
    for _ in range(iterations):
        sel = v[(v > mu - 1.5 * sigma) & (v < mu + 1.5 * sigma)]
        if len(sel) < 20:
            break
        c, e = np.histogram(sel, bins=max(8, min(40, len(sel) // 10)))
        ctr = 0.5 * (e[1:] + e[:-1])
        try:
            fit = fit_histogram(ctr, c, (c.max(), mu, sigma))
        except Exception:
            mu, sigma = float(np.median(sel)), float(np.std(sel))
            continue
        if not (ctr[0] <= fit.mu <= ctr[-1]) or fit.sigma <= 0:
            mu, sigma = float(np.median(sel)), float(np.std(sel))
            continue
        mu, sigma = fit.mu, fit.sigma
    return float(mu), float(sigma)


@dataclass
class EnergyCalibration:
    """Per-voxel photopeak positions over the crystal volume."""

    kind: DetectorKind
    shape: tuple  # (nx, ny) or (nx, ny, n_doi)
    peaks: np.ndarray  # photopeak photon count per voxel (flattened)
    n_events: np.ndarray
    fallback: np.ndarray  # bool: voxel used the global photopeak
    global_peak: float
    min_events: int = 50
    version: int = 1

    def voxel_index(self, pos: np.ndarray) -> np.ndarray:
        return _voxel_index(self.kind, self.shape, pos)

    def peak_for(self, pos):
        return self.peaks[self.voxel_index(np.atleast_2d(pos))]

    def to_dict(self):
        return dict(version=self.version, kind=self.kind.name, shape=list(self.shape),
                    peaks=self.peaks.tolist(), n_events=self.n_events.tolist(),
                    fallback=self.fallback.astype(int).tolist(), global_peak=self.global_peak,
                    min_events=self.min_events)

    @classmethod
    def from_dict(cls, d):
        return cls(DetectorKind[d["kind"]], tuple(d["shape"]), np.asarray(d["peaks"], float),
                   np.asarray(d["n_events"], np.int64), np.asarray(d["fallback"], bool),
                   float(d["global_peak"]), int(d["min_events"]), int(d["version"]))


def default_voxel_shape(kind) -> tuple:
    return (8, 8, 5) if kind == DetectorKind.SLAB else (8, 8)


def _voxel_index(kind, shape, pos):
    geom = geometry_for(kind)
    w = geom.half_width_mm
    ix = np.clip(((pos[:, 0] + w) / (2 * w) * shape[0]).astype(np.int64), 0, shape[0] - 1)
    iy = np.clip(((pos[:, 1] + w) / (2 * w) * shape[1]).astype(np.int64), 0, shape[1] - 1)
    idx = ix * shape[1] + iy
    if len(shape) == 3:
        iz = np.clip((pos[:, 2] / geom.crystal_height_mm * shape[2]).astype(np.int64), 0, shape[2] - 1)
        idx = idx * shape[2] + iz
    return idx


def calibrate_energy(photons, pos, kind, shape=None, min_events: int = 50) -> EnergyCalibration:
    """Build the voxel photopeak table from totals and estimated positions."""
    shape = tuple(shape or default_voxel_shape(kind))
    photons = np.asarray(photons, dtype=np.float64)
    idx = _voxel_index(kind, shape, np.asarray(pos))
    n_vox = int(np.prod(shape))
    global_peak, _ = find_photopeak(photons)
    peaks = np.full(n_vox, global_peak)
    n_events = np.bincount(idx, minlength=n_vox)
    fallback = n_events < min_events
    order = np.argsort(idx, kind="stable")
    bounds = np.searchsorted(idx[order], np.arange(n_vox + 1))
    for v in range(n_vox):
        if fallback[v]:
            continue
        peaks[v], _ = find_photopeak(photons[order[bounds[v]:bounds[v + 1]]])
    if fallback.any():
        warnings.warn(f"{int(fallback.sum())} of {n_vox} {kind.name} energy voxels under-populated; "
                      "using the global photopeak there")
    return EnergyCalibration(kind, shape, peaks, n_events, fallback, float(global_peak), min_events)


def estimate_energy(photons, pos, cal: EnergyCalibration):
    """Energy in keV: ``511 * total / photopeak(voxel)``."""
    peak = cal.peak_for(np.atleast_2d(pos))
    e = PHOTOPEAK_ENERGY_KEV * np.asarray(photons, dtype=np.float64) / peak
    return float(e[0]) if np.ndim(photons) == 0 else e


# --------------------------------------------------------------------------
# whole-set preprocessing


@dataclass
class PrepModels:
    """Everything preprocessing learns from calibration data."""

    positioner: SlabPositioner
    energy_cal: dict  # DetectorKind -> EnergyCalibration


def fit_prep_models(cset: CoincidenceSet, min_events: int = 50, positioner_hp=None) -> PrepModels:
    """Train slab positioning on simulator truth, then the voxel energy tables.

    Only clusters passing the photon filter are used.
    """
    if cset.truth is None:
        raise ValueError("slab positioning is trained on simulator ground truth")
    keep = np.ones(len(cset), bool)
    for kind in DetectorKind:
        keep &= apply_noise_filter(total_photons(cset.side(kind)))
    cs = cset.take(np.nonzero(keep)[0])
    positioner = SlabPositioner.fit(cs.slab, cs.truth.pos[0], positioner_hp)
    cals = {}
    for kind in DetectorKind:
        side = cs.side(kind)
        pos = estimate_position(side, positioner)
        cals[kind] = calibrate_energy(total_photons(side), pos, kind, min_events=min_events)
    return PrepModels(positioner, cals)


def preprocess(cset: CoincidenceSet, models: PrepModels, lo=MIN_PHOTONS, hi=MAX_PHOTONS) -> CoincidenceSet:
    """Noise-filter coincidences and attach photons, positions and energies."""
    keep = np.ones(len(cset), bool)
    photons = {}
    for kind in DetectorKind:
        photons[kind] = total_photons(cset.side(kind))
        keep &= apply_noise_filter(photons[kind], lo, hi)
    idx = np.nonzero(keep)[0]
    out = cset.take(idx)
    for kind in DetectorKind:
        side = out.side(kind)
        side.photons = photons[kind][idx]
        side.pos = estimate_position(side, models.positioner)
        side.energy = estimate_energy(side.photons, side.pos, models.energy_cal[kind])
    log.info("preprocess: kept %d of %d coincidences", len(idx), len(cset))
    return out
