"""Shared domain types, timestamp processing, labels and feature assembly.

Single-event types (:class:`Hit`, :class:`Cluster`, :class:`Coincidence`) are
immutable dataclasses used by the per-event API. Bulk data lives in the
columnar :class:`ClusterArrays` / :class:`CoincidenceSet` containers, where each
coincidence side holds up to 16 hit slots (one per SiPM) padded with ``-1`` ids
and NaN timestamps.
"""

from __future__ import annotations

import enum
import hashlib
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .errors import EmptyCluster, IncompleteCluster

C_VACUUM_M_PER_S = 2.99792458e8
N_SIPMS = 16
PIXELS_PER_SIPM = 4
SPADS_PER_PIXEL = 3200
MAX_HITS = N_SIPMS

# missing-value marker understood by the boosting engine
MISSING = np.nan


class DetectorKind(enum.IntEnum):
    SLAB = 0
    ONE_TO_ONE = 1


def timestamp_cap(kind: DetectorKind) -> int:
    """Number of processed timestamps used as features per cluster."""
    return 4 if kind == DetectorKind.SLAB else 3


def position_dim(kind: DetectorKind) -> int:
    return 3 if kind == DetectorKind.SLAB else 2


@dataclass(frozen=True)
class DetectorGeometry:
    """Sensor tile of 4x4 SiPMs with 2x2 pixels each, 4 mm pixel pitch.

    The tile spans ``[-16, 16]`` mm in x and y. Pixel column/row indices run
    0..7 from negative to positive coordinates. For the slab detector every
    pixel row carries one slab, monolithic along x.
    """

    detector_id: DetectorKind
    n_sipms: int = N_SIPMS
    pixels_per_sipm: int = PIXELS_PER_SIPM
    spads_per_pixel: int = SPADS_PER_PIXEL
    crystal_height_mm: float = 19.0
    pitch_mm: float = 4.0
    slab_count: int = 8
    detector_spacing_mm: float = 435.0

    def __post_init__(self):
        if self.n_sipms != 16 or self.pixels_per_sipm != 4:
            raise ValueError("tile layout is fixed at 16 SiPMs x 4 pixels")

    @property
    def half_width_mm(self) -> float:
        return 4 * self.pitch_mm

    @property
    def n_pixels_side(self) -> int:
        return 8

    def pixel_center(self, pixel_col, pixel_row):
        x = -self.half_width_mm + self.pitch_mm * (np.asarray(pixel_col) + 0.5)
        y = -self.half_width_mm + self.pitch_mm * (np.asarray(pixel_row) + 0.5)
        return x, y

    def pixel_of(self, x, y):
        """Pixel column/row containing the planar coordinate (clipped to the tile)."""
        col = np.floor((np.asarray(x) + self.half_width_mm) / self.pitch_mm).astype(np.int64)
        row = np.floor((np.asarray(y) + self.half_width_mm) / self.pitch_mm).astype(np.int64)
        return np.clip(col, 0, 7), np.clip(row, 0, 7)

    def check_source_range(self, z_range_mm: float) -> None:
        if not self.detector_spacing_mm > 2 * z_range_mm:
            raise ValueError(
                f"detector spacing {self.detector_spacing_mm} mm too small for "
                f"source range {z_range_mm} mm"
            )


def sipm_of_pixel(col, row):
    """SiPM id and in-SiPM pixel index (0..3) for pixel column/row."""
    col = np.asarray(col)
    row = np.asarray(row)
    sipm = (row // 2) * 4 + col // 2
    sub = (row % 2) * 2 + col % 2
    return sipm, sub


def pixel_of_sipm(sipm, sub):
    """Inverse of :func:`sipm_of_pixel`: returns (col, row)."""
    sipm = np.asarray(sipm)
    sub = np.asarray(sub)
    col = (sipm % 4) * 2 + sub % 2
    row = (sipm // 4) * 2 + sub // 2
    return col, row


SLAB_GEOMETRY = DetectorGeometry(DetectorKind.SLAB)
ONE_TO_ONE_GEOMETRY = DetectorGeometry(DetectorKind.ONE_TO_ONE)


def geometry_for(kind: DetectorKind) -> DetectorGeometry:
    return SLAB_GEOMETRY if kind == DetectorKind.SLAB else ONE_TO_ONE_GEOMETRY


@dataclass(frozen=True)
class Hit:
    sipm_id: int
    timestamp_ps: float
    pixel_counts: tuple

    def __post_init__(self):
        if not 0 <= self.sipm_id < N_SIPMS:
            raise ValueError(f"sipm_id {self.sipm_id} out of range")
        if not np.isfinite(self.timestamp_ps):
            raise ValueError("timestamp must be finite")
        if len(self.pixel_counts) != PIXELS_PER_SIPM:
            raise ValueError("a hit carries exactly four pixel counts")
        if any(c < 0 or c > SPADS_PER_PIXEL for c in self.pixel_counts):
            raise ValueError(f"pixel counts {self.pixel_counts} outside [0, 3200]")


@dataclass(frozen=True)
class Cluster:
    detector_id: DetectorKind
    hits: tuple
    energy_kev: Optional[float] = None
    position_mm: Optional[tuple] = None
    total_photons: Optional[float] = None

    def __post_init__(self):
        ts = [h.timestamp_ps for h in self.hits]
        if any(b < a for a, b in zip(ts, ts[1:])):
            raise ValueError("cluster hits must be sorted by timestamp")
        if self.position_mm is not None and len(self.position_mm) != position_dim(self.detector_id):
            raise ValueError("position dimensionality does not match detector type")

    @property
    def first_timestamp(self) -> float:
        if not self.hits:
            raise EmptyCluster("cluster has no hits")
        return self.hits[0].timestamp_ps


@dataclass(frozen=True)
class SimTruth:
    """Injected contributions recorded by the simulator, per detector side."""

    skew_ps: tuple  # (slab, oto) per-hit fixed channel skew, hit order
    timewalk_ps: tuple
    interaction_pos_mm: tuple
    energy_kev: tuple


@dataclass(frozen=True)
class Coincidence:
    cluster_slab: Cluster
    cluster_oto: Cluster
    source_pos_mm: tuple
    label_ps: float
    truth: Optional[SimTruth] = None

    @property
    def delta_t_meas_ps(self) -> float:
        return self.cluster_slab.first_timestamp - self.cluster_oto.first_timestamp


def c_air_mm_per_ps(c_air_m_per_s: float = C_VACUUM_M_PER_S) -> float:
    return c_air_m_per_s * 1e-9


def compute_label(z_s_mm, c_air: float = C_VACUUM_M_PER_S):
    """Expected slab-minus-one-to-one time difference in ps for source offset z."""
    y = -2.0 * np.asarray(z_s_mm, dtype=np.float64) / c_air_mm_per_ps(c_air)
    return float(y) if y.ndim == 0 else y


def process_timestamps(cluster: Cluster) -> list:
    """Timestamps relative to the earliest one, truncated to the detector cap.

    Returns ``cap`` entries; slots beyond the hit count are NaN.
    """
    if not cluster.hits:
        raise EmptyCluster("cannot process timestamps of an empty cluster")
    cap = timestamp_cap(cluster.detector_id)
    t0 = cluster.hits[0].timestamp_ps
    out = [h.timestamp_ps - t0 for h in cluster.hits[:cap]]
    return out + [MISSING] * (cap - len(out))


# --------------------------------------------------------------------------
# feature schema


def _side_names(prefix: str, kind: DetectorKind):
    cap = timestamp_cap(kind)
    groups = {}
    groups[f"F_T_{prefix}"] = (
        [f"{prefix}_ts{i}" for i in range(cap)]
        + [f"{prefix}_sipm{i}" for i in range(cap)]
        + [f"{prefix}_spread", f"{prefix}_nts"]
    )
    groups[f"F_E_{prefix}"] = [
        f"{prefix}_cnt{i}_{k}" for i in range(cap) for k in range(PIXELS_PER_SIPM)
    ] + [f"{prefix}_energy"]
    axes = ["x", "y", "doi"][: position_dim(kind)]
    groups[f"F_Pos_{prefix}"] = [f"{prefix}_{a}" for a in axes]
    return groups


@dataclass(frozen=True)
class FeatureSchema:
    names: tuple
    groups: dict = field(hash=False, compare=False)

    @property
    def n_features(self) -> int:
        return len(self.names)

    def index(self, name: str) -> int:
        return self.names.index(name)

    def group_indices(self) -> dict:
        return {g: [self.names.index(n) for n in members] for g, members in self.groups.items()}

    @property
    def hash(self) -> str:
        return hashlib.sha256("\n".join(self.names).encode()).hexdigest()[:16]


def _make_schema() -> FeatureSchema:
    groups = {"F_so": ["dt_meas"]}
    groups.update(_side_names("s", DetectorKind.SLAB))
    groups.update(_side_names("o", DetectorKind.ONE_TO_ONE))
    names = []
    for g in groups.values():
        names.extend(g)
    return FeatureSchema(tuple(names), groups)


FEATURE_SCHEMA = _make_schema()


@dataclass(frozen=True)
class FeatureVector:
    values: np.ndarray
    schema: FeatureSchema = FEATURE_SCHEMA

    def __getitem__(self, name):
        return self.values[self.schema.index(name)]

    def n_missing(self) -> int:
        return int(np.isnan(self.values).sum())


def _side_features(cluster: Cluster):
    if cluster.energy_kev is None or cluster.position_mm is None:
        raise IncompleteCluster(
            f"{cluster.detector_id.name} cluster lacks energy or position estimate"
        )
    cap = timestamp_cap(cluster.detector_id)
    used = cluster.hits[:cap]
    ts = process_timestamps(cluster)
    ids = [float(h.sipm_id) for h in used] + [MISSING] * (cap - len(used))
    spread = cluster.hits[-1].timestamp_ps - cluster.hits[0].timestamp_ps
    counts = []
    for i in range(cap):
        if i < len(used):
            counts.extend(float(c) for c in used[i].pixel_counts)
        else:
            counts.extend([MISSING] * PIXELS_PER_SIPM)
    return (
        ts + ids + [spread, float(len(cluster.hits))]
        + counts + [float(cluster.energy_kev)]
        + [float(p) for p in cluster.position_mm]
    )


def build_features(coincidence: Coincidence) -> FeatureVector:
    vals = [coincidence.delta_t_meas_ps]
    vals += _side_features(coincidence.cluster_slab)
    vals += _side_features(coincidence.cluster_oto)
    return FeatureVector(np.asarray(vals, dtype=np.float64))


# --------------------------------------------------------------------------
# columnar containers


@dataclass
class ClusterArrays:
    """One detector side of ``n`` coincidences in padded columnar form.

    ``ts`` holds absolute hit timestamps (ps), ascending within each row.
    ``photons``, ``energy`` and ``pos`` are filled by preprocessing.
    """

    kind: DetectorKind
    sipm: np.ndarray  # (n, 16) int16, -1 padded
    ts: np.ndarray  # (n, 16) float64, NaN padded
    counts: np.ndarray  # (n, 16, 4) uint16
    n_hits: np.ndarray  # (n,) int16
    photons: Optional[np.ndarray] = None
    energy: Optional[np.ndarray] = None
    pos: Optional[np.ndarray] = None

    def __len__(self):
        return len(self.n_hits)

    @classmethod
    def empty(cls, kind, n=0):
        return cls(
            kind,
            np.full((n, MAX_HITS), -1, np.int16),
            np.full((n, MAX_HITS), np.nan),
            np.zeros((n, MAX_HITS, PIXELS_PER_SIPM), np.uint16),
            np.zeros(n, np.int16),
        )

    def take(self, idx) -> "ClusterArrays":
        pick = lambda a: None if a is None else a[idx]
        return ClusterArrays(
            self.kind, self.sipm[idx], self.ts[idx], self.counts[idx], self.n_hits[idx],
            pick(self.photons), pick(self.energy), pick(self.pos),
        )

    @property
    def first_ts(self) -> np.ndarray:
        return self.ts[:, 0]

    def pixel_image(self) -> np.ndarray:
        """(n, 16, 4) raw counts scattered to SiPM-major order, NaN for silent SiPMs."""
        n = len(self)
        img = np.full((n, N_SIPMS, PIXELS_PER_SIPM), np.nan)
        rows, slots = np.nonzero(self.sipm >= 0)
        img[rows, self.sipm[rows, slots]] = self.counts[rows, slots]
        return img

    def cluster(self, i: int) -> Cluster:
        k = int(self.n_hits[i])
        hits = tuple(
            Hit(int(self.sipm[i, j]), float(self.ts[i, j]), tuple(int(c) for c in self.counts[i, j]))
            for j in range(k)
        )
        return Cluster(
            self.kind,
            hits,
            None if self.energy is None else float(self.energy[i]),
            None if self.pos is None else tuple(float(p) for p in self.pos[i]),
            None if self.photons is None else float(self.photons[i]),
        )

    def sort_hits(self) -> np.ndarray:
        """Re-establish ascending timestamp order per row (NaN padding stays last).

        Returns the applied per-row slot permutation.
        """
        order = np.argsort(self.ts, axis=1, kind="stable")
        self.ts = np.take_along_axis(self.ts, order, axis=1)
        self.sipm = np.take_along_axis(self.sipm, order, axis=1)
        self.counts = np.take_along_axis(self.counts, order[:, :, None], axis=1)
        return order


@dataclass
class TruthArrays:
    """Simulator ground truth aligned with the coincidence records."""

    skew: tuple  # per side (n, 16) ps in hit-slot order
    timewalk: tuple  # per side (n, 16) ps
    pos: tuple  # per side (n, 3) mm (x, y, depth from entry face)
    energy: tuple  # per side (n,) keV deposited
    photopeak: tuple  # per side (n,) bool

    def take(self, idx) -> "TruthArrays":
        return TruthArrays(*(tuple(a[idx] for a in getattr(self, f)) for f in
                             ("skew", "timewalk", "pos", "energy", "photopeak")))


@dataclass
class CoincidenceSet:
    source: np.ndarray  # (n, 3) mm
    label: np.ndarray  # (n,) ps
    slab: ClusterArrays
    oto: ClusterArrays
    truth: Optional[TruthArrays] = None

    def __len__(self):
        return len(self.label)

    @property
    def dt_meas(self) -> np.ndarray:
        return self.slab.first_ts - self.oto.first_ts

    def side(self, kind: DetectorKind) -> ClusterArrays:
        return self.slab if kind == DetectorKind.SLAB else self.oto

    def take(self, idx) -> "CoincidenceSet":
        return CoincidenceSet(
            self.source[idx], self.label[idx], self.slab.take(idx), self.oto.take(idx),
            None if self.truth is None else self.truth.take(idx),
        )

    def coincidence(self, i: int) -> Coincidence:
        truth = None
        if self.truth is not None:
            t = self.truth
            truth = SimTruth(
                tuple(a[i, : self.side(k).n_hits[i]].copy() for a, k in zip(t.skew, DetectorKind)),
                tuple(a[i, : self.side(k).n_hits[i]].copy() for a, k in zip(t.timewalk, DetectorKind)),
                tuple(tuple(a[i]) for a in t.pos),
                tuple(float(a[i]) for a in t.energy),
            )
        return Coincidence(
            self.slab.cluster(i), self.oto.cluster(i), tuple(self.source[i]), float(self.label[i]), truth
        )

    def copy(self) -> "CoincidenceSet":
        return self.take(np.arange(len(self)))


def concat_sets(sets: Sequence[CoincidenceSet]) -> CoincidenceSet:
    def cat_side(sides):
        first = sides[0]
        opt = lambda name: None if getattr(first, name) is None else np.concatenate([getattr(s, name) for s in sides])
        return ClusterArrays(
            first.kind,
            np.concatenate([s.sipm for s in sides]),
            np.concatenate([s.ts for s in sides]),
            np.concatenate([s.counts for s in sides]),
            np.concatenate([s.n_hits for s in sides]),
            opt("photons"), opt("energy"), opt("pos"),
        )

    truth = None
    if all(s.truth is not None for s in sets):
        truth = TruthArrays(*(
            tuple(np.concatenate([getattr(s.truth, f)[k] for s in sets]) for k in range(2))
            for f in ("skew", "timewalk", "pos", "energy", "photopeak")
        ))
    return CoincidenceSet(
        np.concatenate([s.source for s in sets]),
        np.concatenate([s.label for s in sets]),
        cat_side([s.slab for s in sets]),
        cat_side([s.oto for s in sets]),
        truth,
    )


def processed_timestamp_matrix(side: ClusterArrays) -> np.ndarray:
    cap = timestamp_cap(side.kind)
    return side.ts[:, :cap] - side.ts[:, :1]


def _side_matrix(side: ClusterArrays) -> np.ndarray:
    if side.energy is None or side.pos is None:
        raise IncompleteCluster(f"{side.kind.name} side lacks energy or position estimates")
    n = len(side)
    cap = timestamp_cap(side.kind)
    ts = processed_timestamp_matrix(side)
    ids = side.sipm[:, :cap].astype(np.float64)
    ids[ids < 0] = np.nan
    last = side.ts[np.arange(n), np.maximum(side.n_hits.astype(np.int64) - 1, 0)]
    spread = last - side.ts[:, 0]
    counts = side.counts[:, :cap, :].astype(np.float64)
    counts[side.sipm[:, :cap] < 0] = np.nan
    return np.column_stack([
        ts, ids, spread, side.n_hits.astype(np.float64),
        counts.reshape(n, -1), side.energy, side.pos,
    ])


def feature_matrix(cset: CoincidenceSet) -> np.ndarray:
    """Vectorized :func:`build_features` over a whole coincidence set."""
    if len(cset) == 0:
        return np.empty((0, FEATURE_SCHEMA.n_features))
    X = np.column_stack([cset.dt_meas, _side_matrix(cset.slab), _side_matrix(cset.oto)])
    assert X.shape[1] == FEATURE_SCHEMA.n_features
    return X
