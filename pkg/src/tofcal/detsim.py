"""Synthetic coincidence generator for a slab / one-to-one detector pair.

The slab detector faces the source from ``z = +spacing/2`` and the one-to-one
detector from ``z = -spacing/2``, so a source moved towards positive z shortens
the slab-side travel time and the expected slab-minus-one-to-one time
difference is ``-2 z / c``.

Every event is generated in batch with numpy. Each grid point owns its own
Philox stream keyed on ``(seed, dataset, point)`` so campaigns are reproducible
independent of the order in which points are generated.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.special import ndtr

from . import prep
from .core import (
    C_VACUUM_M_PER_S, MAX_HITS, N_SIPMS, PIXELS_PER_SIPM, SPADS_PER_PIXEL,
    ClusterArrays, CoincidenceSet, DetectorGeometry, DetectorKind, TruthArrays,
    SLAB_GEOMETRY, ONE_TO_ONE_GEOMETRY, c_air_mm_per_ps, compute_label, concat_sets,
    pixel_of_sipm, sipm_of_pixel,
)
from .errors import ConfigError

log = logging.getLogger(__name__)

COMPTON_EDGE_KEV = 340.67
PHOTOPEAK_KEV = 511.0
DATASETS = ("train", "validation", "test", "performance")


@dataclass(frozen=True)
class SkewModel:
    """Timing effects injected into hit timestamps.

    timewalk(N) = ``timewalk_scale_ps * (timewalk_ref_count / N) ** timewalk_exponent``
    and the per-hit photon-statistics jitter is Gaussian with
    ``photon_jitter_ps * sqrt(photon_jitter_ref_count / N)``, where ``N`` is the
    number of photons incident on the SiPM.
    """

    channel_skew_sigma_ps: float = 60.0
    fixed_channel_skews_ps: Optional[tuple] = None  # ((16,), (16,)) slab, oto
    timewalk_scale_ps: float = 50.0
    timewalk_ref_count: float = 1000.0
    timewalk_exponent: float = 1.0
    photon_jitter_ps: float = 60.0
    photon_jitter_ref_count: float = 1000.0
    scintillator_rise_jitter_ps: float = 10.0
    optical_delay_ps_per_mm: float = 6.07  # LYSO, n = 1.82
    lateral_delay_ps_per_mm: float = 3.0

    def __post_init__(self):
        for name in ("channel_skew_sigma_ps", "timewalk_scale_ps", "photon_jitter_ps",
                     "scintillator_rise_jitter_ps"):
            if getattr(self, name) < 0:
                raise ConfigError(f"skew.{name} must be >= 0")
        if self.timewalk_exponent <= 0 or self.timewalk_ref_count <= 0:
            raise ConfigError("timewalk exponent and reference count must be positive")

    def timewalk(self, n_photons):
        n = np.maximum(np.asarray(n_photons, dtype=np.float64), 1.0)
        return self.timewalk_scale_ps * (self.timewalk_ref_count / n) ** self.timewalk_exponent

    def photon_jitter_sigma(self, n_photons):
        n = np.maximum(np.asarray(n_photons, dtype=np.float64), 1.0)
        return self.photon_jitter_ps * np.sqrt(self.photon_jitter_ref_count / n)

    def channel_skews(self, seed: int) -> np.ndarray:
        """(2, 16) fixed per-SiPM offsets, slab row first."""
        if self.fixed_channel_skews_ps is not None:
            sk = np.asarray(self.fixed_channel_skews_ps, dtype=np.float64)
            if sk.shape != (2, N_SIPMS):
                raise ConfigError("fixed_channel_skews_ps must have shape (2, 16)")
            return sk
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(7, 0))))
        return rng.normal(0.0, self.channel_skew_sigma_ps, size=(2, N_SIPMS))


@dataclass(frozen=True)
class DetectorResponse:
    """Light yield, light spread and trigger behaviour of one detector."""

    photopeak_photons: float  # mean detected photons at 511 keV
    energy_resolution: float  # FWHM / E at the photopeak
    attenuation_length_mm: float = 12.0
    photopeak_fraction: float = 0.55
    compton_min_kev: float = 30.0
    multi_scatter_fraction: float = 0.3  # of the non-photopeak events
    trigger_threshold_mean: float = 54.0
    trigger_threshold_sigma: float = 19.0
    # one-to-one: fraction of the light staying on the covered pixel
    main_pixel_fraction: float = 0.96
    # slab: Gaussian light profile along the slab, width grows with distance to the sensor
    spread_sigma_min_mm: float = 2.0
    spread_sigma_per_mm: float = 0.45
    pair_share: float = 0.15

    def __post_init__(self):
        if not self.photopeak_photons > 0:
            raise ConfigError("photon yield must be positive")
        if not 0 < self.energy_resolution < 1:
            raise ConfigError("energy resolution must lie in (0, 1)")
        if not 0 <= self.multi_scatter_fraction <= 1:
            raise ConfigError("multi_scatter_fraction must lie in [0, 1]")
        if not self.attenuation_length_mm > 0:
            raise ConfigError("attenuation length must be positive")


DEFAULT_SLAB_RESPONSE = DetectorResponse(photopeak_photons=2300.0, energy_resolution=0.113)
DEFAULT_OTO_RESPONSE = DetectorResponse(photopeak_photons=2800.0, energy_resolution=0.104)


@dataclass(frozen=True)
class SimConfig:
    slab_geometry: DetectorGeometry = SLAB_GEOMETRY
    oto_geometry: DetectorGeometry = ONE_TO_ONE_GEOMETRY
    slab_response: DetectorResponse = DEFAULT_SLAB_RESPONSE
    oto_response: DetectorResponse = DEFAULT_OTO_RESPONSE
    skew: SkewModel = SkewModel()
    c_air: float = C_VACUUM_M_PER_S
    event_spacing_ps: float = 1.0e6
    cluster_window_ps: float = prep.CLUSTER_WINDOW_PS
    coincidence_window_ps: float = prep.COINCIDENCE_WINDOW_PS

    def response(self, kind):
        return self.slab_response if kind == DetectorKind.SLAB else self.oto_response

    def geometry(self, kind):
        return self.slab_geometry if kind == DetectorKind.SLAB else self.oto_geometry


def default_z_positions():
    return tuple(float(z) for z in np.arange(-130.0, 100.0 + 1e-9, 5.0))


def default_xy_grid():
    g = np.arange(-12.0, 12.0 + 1e-9, 6.0)
    return tuple((float(x), float(y)) for x in g for y in g)


@dataclass(frozen=True)
class CampaignPlan:
    z_positions_mm: tuple = field(default_factory=default_z_positions)
    xy_grid_mm: tuple = field(default_factory=default_xy_grid)
    events_per_point: int = 200
    performance_events: int = 20000
    rng_seed: int = 0
    split_fractions: tuple = (0.5, 0.2, 0.3)

    def __post_init__(self):
        if self.events_per_point < 0 or self.performance_events < 0:
            raise ConfigError("event counts must be non-negative")
        if len(self.split_fractions) != 3 or abs(sum(self.split_fractions) - 1) > 1e-9:
            raise ConfigError("split_fractions must be three fractions summing to 1")

    @property
    def grid_points(self):
        return [(x, y, z) for z in self.z_positions_mm for (x, y) in self.xy_grid_mm]


# --------------------------------------------------------------------------
# saturation


def saturate(n_incident, n_spad: int = SPADS_PER_PIXEL):
    """Expected number of fired SPADs for ``n_incident`` photons."""
    return n_spad * (1.0 - np.exp(-np.asarray(n_incident, dtype=np.float64) / n_spad))


# --------------------------------------------------------------------------
# event physics


def _stream(seed: int, *key) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=tuple(key))))


def _sample_lors(source, n, cfg: SimConfig, rng):
    """Entry points on both front faces for ``n`` back-to-back photon pairs."""
    half = cfg.slab_geometry.detector_spacing_mm / 2.0
    w = cfg.slab_geometry.half_width_mm
    wo = cfg.oto_geometry.half_width_mm
    xs, ys, zs = source
    got = []
    need = n
    while need > 0:
        m = int(need * 1.6) + 16
        e1 = np.column_stack([rng.uniform(-w, w, m), rng.uniform(-w, w, m), np.full(m, half)])
        t = (-half - zs) / (half - zs)
        e2 = np.asarray(source) + t * (e1 - np.asarray(source))
        ok = (np.abs(e2[:, 0]) < wo) & (np.abs(e2[:, 1]) < wo)
        got.append((e1[ok], e2[ok]))
        need -= int(ok.sum())
    e1 = np.concatenate([g[0] for g in got])[:n]
    e2 = np.concatenate([g[1] for g in got])[:n]
    return e1, e2


def _sample_depth(n, resp: DetectorResponse, height, rng):
    lam = resp.attenuation_length_mm
    u = rng.uniform(0.0, 1.0, n)
    return -lam * np.log1p(-u * (1.0 - np.exp(-height / lam)))


def _sample_energy(n, resp: DetectorResponse, rng):
    u = rng.uniform(size=n)
    pe = u < resp.photopeak_fraction
    # multiple in-crystal Compton interactions fill the gap between edge and peak
    multi = u >= 1.0 - (1.0 - resp.photopeak_fraction) * resp.multi_scatter_fraction
    single = rng.uniform(resp.compton_min_kev, COMPTON_EDGE_KEV, n)
    e = np.where(pe, PHOTOPEAK_KEV, np.where(multi, rng.uniform(COMPTON_EDGE_KEV, PHOTOPEAK_KEV, n), single))
    return e, pe


def _pixel_probabilities(kind, pos, resp: DetectorResponse, geom: DetectorGeometry):
    """(n, 8, 8) light fractions indexed [event, row, col]."""
    n = len(pos)
    col, row = geom.pixel_of(pos[:, 0], pos[:, 1])
    p = np.zeros((n, 8, 8))
    idx = np.arange(n)
    if kind == DetectorKind.ONE_TO_ONE:
        f = resp.main_pixel_fraction
        p[idx, row, col] = f
        nb = []
        for dr, dc in ((-1, 0), (1, 0), (0, -1), (0, 1)):
            r, c = row + dr, col + dc
            nb.append(((r >= 0) & (r < 8) & (c >= 0) & (c < 8), r, c))
        n_nb = sum(v.astype(np.float64) for v, _, _ in nb)
        for valid, r, c in nb:
            sel = idx[valid]
            p[sel, r[valid], c[valid]] += (1.0 - f) / n_nb[valid]
        return p
    # slab: Gaussian profile along x with mirror images at both crystal ends
    w = geom.half_width_mm
    dist_to_sensor = geom.crystal_height_mm - pos[:, 2]
    sigma = resp.spread_sigma_min_mm + resp.spread_sigma_per_mm * dist_to_sensor
    edges = -w + geom.pitch_mm * np.arange(9)
    x = pos[:, 0]
    cdf = np.zeros((n, 9))
    for centre in (x, -2 * w - x, 2 * w - x):
        cdf += ndtr((edges[None, :] - centre[:, None]) / sigma[:, None])
    prof = np.diff(cdf, axis=1)
    prof /= prof.sum(axis=1, keepdims=True)
    partner = row ^ 1
    p[idx, row, :] = (1.0 - resp.pair_share) * prof
    p[idx, partner, :] = resp.pair_share * prof
    return p


def _sipm_distance(xy):
    """(n, 16) distance from the planar interaction point to each SiPM area."""
    centres = -12.0 + 8.0 * np.arange(4)
    sx = np.tile(centres, 4)
    sy = np.repeat(centres, 4)
    dx = np.maximum(np.abs(xy[:, 0:1] - sx[None, :]) - 4.0, 0.0)
    dy = np.maximum(np.abs(xy[:, 1:2] - sy[None, :]) - 4.0, 0.0)
    return np.hypot(dx, dy)


# pixel (row, col) -> (sipm, sub) lookup in flattened 64 order
_ROWS, _COLS = np.meshgrid(np.arange(8), np.arange(8), indexing="ij")
_PIX_SIPM, _PIX_SUB = sipm_of_pixel(_COLS.ravel(), _ROWS.ravel())


def _detector_side(kind, entry, direction, source, cfg: SimConfig, skews, rng):
    """Simulate one detector for a batch. Returns per-SiPM arrays and truth."""
    n = len(entry)
    geom = cfg.geometry(kind)
    resp = cfg.response(kind)
    sk = cfg.skew
    c = c_air_mm_per_ps(cfg.c_air)

    depth = _sample_depth(n, resp, geom.crystal_height_mm, rng)
    cos_t = np.abs(direction[:, 2])
    inter = entry + direction * (depth / cos_t)[:, None]
    w = geom.half_width_mm - 1e-6
    pos = np.column_stack([np.clip(inter[:, 0], -w, w), np.clip(inter[:, 1], -w, w), depth])
    travel = np.linalg.norm(inter - np.asarray(source)[None, :], axis=1) / c

    energy, photopeak = _sample_energy(n, resp, rng)
    mean_n = resp.photopeak_photons * energy / PHOTOPEAK_KEV
    extra = (resp.energy_resolution / 2.3548200450309493) ** 2 - 1.0 / resp.photopeak_photons
    rel = np.sqrt(max(extra, 0.0))
    total = np.maximum(mean_n * (1.0 + rel * rng.standard_normal(n)), 0.0)

    prob = _pixel_probabilities(kind, pos, resp, geom).reshape(n, 64)
    incident = rng.poisson(total[:, None] * prob).astype(np.float64)  # (n, 64)
    per_sipm = np.zeros((n, N_SIPMS, PIXELS_PER_SIPM))
    per_sipm[:, _PIX_SIPM, _PIX_SUB] = incident
    n_sipm = per_sipm.sum(axis=2)

    thr = np.maximum(rng.normal(resp.trigger_threshold_mean, resp.trigger_threshold_sigma, (n, N_SIPMS)), 1.0)
    trig = n_sipm >= thr
    fired = np.rint(saturate(per_sipm)).astype(np.uint16)

    walk = sk.timewalk(n_sipm) if sk.timewalk_scale_ps > 0 else np.zeros((n, N_SIPMS))
    jitter = sk.photon_jitter_sigma(n_sipm) * rng.standard_normal((n, N_SIPMS))
    rise = sk.scintillator_rise_jitter_ps * rng.standard_normal(n)
    optical = sk.optical_delay_ps_per_mm * (geom.crystal_height_mm - depth)
    lateral = sk.lateral_delay_ps_per_mm * _sipm_distance(pos[:, :2])
    skew = np.broadcast_to(skews[None, :], (n, N_SIPMS))
    t = (travel + optical + rise)[:, None] + lateral + walk + jitter + skew
    t = np.where(trig, t, np.nan)
    return dict(
        t=t, fired=fired, trig=trig, skew=np.where(trig, skew, np.nan),
        walk=np.where(trig, walk, np.nan), pos=pos, energy=energy, photopeak=photopeak,
    )


def _pack(side, kind, event_time):
    """Per-SiPM arrays -> hit-slot ClusterArrays sorted by timestamp."""
    n = len(side["t"])
    t_abs = side["t"] + event_time[:, None]
    order = np.argsort(t_abs, axis=1, kind="stable")
    ts = np.take_along_axis(t_abs, order, axis=1)
    n_hits = side["trig"].sum(axis=1).astype(np.int16)
    valid = np.arange(MAX_HITS)[None, :] < n_hits[:, None]
    sipm = np.where(valid, order, -1).astype(np.int16)
    counts = np.take_along_axis(side["fired"], order[:, :, None], axis=1)
    counts[~valid] = 0
    arrays = ClusterArrays(kind, sipm, np.where(valid, ts, np.nan), counts, n_hits)
    skew = np.take_along_axis(side["skew"], order, axis=1)
    walk = np.take_along_axis(side["walk"], order, axis=1)
    return arrays, skew, walk


def simulate_events(source, n, cfg: SimConfig, skews, rng, t_start=0.0) -> CoincidenceSet:
    """Batch of ``n`` generated photon pairs as event-aligned coincidence records.

    Records are kept even when a side has no triggered SiPM (``n_hits == 0``);
    the hit-stream path in :func:`simulate_point` drops those naturally.
    """
    source = np.asarray(source, dtype=np.float64)
    if n == 0:
        return _empty_set()
    e1, e2 = _sample_lors(source, n, cfg, rng)
    d1 = e1 - source
    d1 /= np.linalg.norm(d1, axis=1, keepdims=True)
    sides = {
        DetectorKind.SLAB: _detector_side(DetectorKind.SLAB, e1, d1, source, cfg, skews[0], rng),
        DetectorKind.ONE_TO_ONE: _detector_side(DetectorKind.ONE_TO_ONE, e2, -d1, source, cfg, skews[1], rng),
    }
    event_time = t_start + np.cumsum(rng.exponential(cfg.event_spacing_ps, n))
    packed = {k: _pack(v, k, event_time) for k, v in sides.items()}
    s, o = DetectorKind.SLAB, DetectorKind.ONE_TO_ONE
    truth = TruthArrays(
        (packed[s][1], packed[o][1]), (packed[s][2], packed[o][2]),
        (sides[s]["pos"], sides[o]["pos"]), (sides[s]["energy"], sides[o]["energy"]),
        (sides[s]["photopeak"], sides[o]["photopeak"]),
    )
    return CoincidenceSet(
        np.tile(source, (n, 1)), np.full(n, compute_label(source[2], cfg.c_air)),
        packed[s][0], packed[o][0], truth,
    )


def simulate_event(source_pos, cfg: SimConfig = SimConfig(), skews=None, rng=None):
    """Single coincidence (with truth). ``skews`` defaults to the model's draw for seed 0."""
    rng = rng if rng is not None else np.random.default_rng()
    skews = cfg.skew.channel_skews(0) if skews is None else np.asarray(skews)
    while True:
        cs = simulate_events(source_pos, 1, cfg, skews, rng)
        if cs.slab.n_hits[0] > 0 and cs.oto.n_hits[0] > 0:
            return cs.coincidence(0)


def _empty_set() -> CoincidenceSet:
    z = lambda *s: np.zeros(s)
    e16 = lambda: np.zeros((0, MAX_HITS))
    truth = TruthArrays((e16(), e16()), (e16(), e16()), (z(0, 3), z(0, 3)), (z(0), z(0)),
                        (np.zeros(0, bool), np.zeros(0, bool)))
    return CoincidenceSet(z(0, 3), z(0), ClusterArrays.empty(DetectorKind.SLAB),
                          ClusterArrays.empty(DetectorKind.ONE_TO_ONE), truth)


def hit_stream(side: ClusterArrays):
    """Flatten a side into a time-sorted hit stream.

    Returns ``(ts, sipm, counts, record)`` where ``record`` is the originating row.
    """
    rows, slots = np.nonzero(side.sipm >= 0)
    ts = side.ts[rows, slots]
    order = np.argsort(ts, kind="stable")
    rows, slots = rows[order], slots[order]
    return ts[order], side.sipm[rows, slots], side.counts[rows, slots], rows


def simulate_point(source, n, cfg: SimConfig, skews, rng) -> CoincidenceSet:
    """Generate ``n`` events, stream the hits through clustering and pairing."""
    events = simulate_events(source, n, cfg, skews, rng)
    if len(events) == 0:
        return events
    streams = {}
    for kind in DetectorKind:
        ts, sipm, counts, rows = hit_stream(events.side(kind))
        starts = prep.cluster_hits(ts, cfg.cluster_window_ps)
        streams[kind] = (ts, sipm, counts, rows, starts)
    ts_s, _, _, rows_s, st_s = streams[DetectorKind.SLAB]
    ts_o, _, _, rows_o, st_o = streams[DetectorKind.ONE_TO_ONE]
    pairs = prep.find_coincidences(ts_s[st_s], ts_o[st_o], cfg.coincidence_window_ps)
    # every cluster maps back to one generated event; keep pairs from the same event
    ev_s = rows_s[st_s][pairs[:, 0]]
    ev_o = rows_o[st_o][pairs[:, 1]]
    keep = ev_s[ev_s == ev_o]
    if len(keep) != len(pairs):
        log.debug("dropped %d cross-event pairs", len(pairs) - len(keep))
    return events.take(keep)


def simulate_dataset(points, n_per_point, cfg: SimConfig, skews, seed, dataset_key) -> CoincidenceSet:
    parts = []
    for i, p in enumerate(points):
        rng = _stream(seed, dataset_key, i)
        parts.append(simulate_point(p, n_per_point, cfg, skews, rng))
    return concat_sets(parts) if parts else _empty_set()


def simulate_campaign(plan: CampaignPlan, cfg: SimConfig = SimConfig()) -> dict:
    """In-memory campaign: train/validation/test pools split per grid point plus
    the iso-centre performance set generated from an independent stream."""
    skews = cfg.skew.channel_skews(plan.rng_seed)
    z_all = plan.z_positions_mm + (0.0,)
    for g in (cfg.slab_geometry, cfg.oto_geometry):
        g.check_source_range(max(abs(z) for z in z_all))
    splits = {k: [] for k in DATASETS[:3]}
    f_train, f_val, _ = plan.split_fractions
    for i, p in enumerate(plan.grid_points):
        cs = simulate_point(p, plan.events_per_point, cfg, skews, _stream(plan.rng_seed, 1, i))
        m = len(cs)
        a = int(round(f_train * m))
        b = int(round((f_train + f_val) * m))
        splits["train"].append(cs.take(np.arange(0, a)))
        splits["validation"].append(cs.take(np.arange(a, b)))
        splits["test"].append(cs.take(np.arange(b, m)))
    out = {k: (concat_sets(v) if v else _empty_set()) for k, v in splits.items()}
    out["performance"] = simulate_point(
        (0.0, 0.0, 0.0), plan.performance_events, cfg, skews, _stream(plan.rng_seed, 2, 0)
    )
    return out


def run_campaign(plan: CampaignPlan, out_dir, cfg: SimConfig = SimConfig()) -> dict:
    """Simulate and write every dataset plus its truth sidecar into ``out_dir``."""
    from . import dataio

    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out_dir}: {exc}") from exc
    sets = simulate_campaign(plan, cfg)
    paths = {}
    for name, cs in sets.items():
        path = out_dir / f"{name}{dataio.DATASET_SUFFIX}"
        dataio.write_dataset(path, cs)
        dataio.write_truth(dataio.truth_path(path), cs.truth)
        paths[name] = path
        log.info("wrote %s (%d coincidences)", path, len(cs))
    return paths
