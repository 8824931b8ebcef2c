"""Analytical least-squares timing calibration.

Each coincidence contributes to the bin of its channel combination (one
slab-side channel ``a`` and one one-to-one channel ``b``). The label-compensated
mean time difference of a bin estimates ``c_a - c_b``; stacking all populated
bins gives ``M c = dt`` with one ``+1`` and one ``-1`` per row, solved by
weighted damped normal equations. Channels are either SiPMs (every hit pair of
the two clusters is used) or spatial voxels of the estimated interaction
position (first timestamps are used and the whole cluster is shifted).

Only a constant common to *both* detectors is unobservable. Solutions are
stored as per-detector zero-mean corrections plus the slab-minus-one-to-one
offset, which keeps the stored tables gauge fixed without losing information.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import sparse, stats

from . import fitstat
from .core import N_SIPMS, CoincidenceSet, DetectorKind, TruthArrays, geometry_for
from .errors import EmptyCalibration, FitDiverged, IncompleteCluster

log = logging.getLogger(__name__)

MIN_BIN_EVENTS = 50
GAUSS_FIT_MIN = 1000
TABLE_FORMAT = "tofcal-calibration"
TABLE_VERSION = 1


@dataclass(frozen=True)
class Voxelization:
    """Channel definition of one sub-calibration.

    ``mode="sipm"`` uses the 16 SiPMs per detector; ``mode="voxel"`` splits the
    crystal into an axis-aligned grid of estimated positions (x, y[, depth]).
    """

    mode: str = "sipm"
    slab_shape: tuple = (4, 4, 2)
    oto_shape: tuple = (4, 4)

    def __post_init__(self):
        if self.mode not in ("sipm", "voxel"):
            raise ValueError(f"unknown channel mode {self.mode!r}")
        if len(self.slab_shape) != 3 or len(self.oto_shape) != 2:
            raise ValueError("slab voxels are (x, y, depth), one-to-one voxels (x, y)")
        if min(self.slab_shape + self.oto_shape) < 1:
            raise ValueError("voxel grid dimensions must be >= 1")

    def shape(self, kind) -> tuple:
        return self.slab_shape if kind == DetectorKind.SLAB else self.oto_shape

    def n_channels(self, kind) -> int:
        return N_SIPMS if self.mode == "sipm" else int(np.prod(self.shape(kind)))

    def voxel_of(self, kind, pos) -> np.ndarray:
        """Voxel index of estimated positions, row-major over the grid axes."""
        geom = geometry_for(kind)
        shape = self.shape(kind)
        pos = np.asarray(pos, dtype=np.float64)
        w = geom.half_width_mm
        idx = np.zeros(len(pos), np.int64)
        lims = [(-w, w), (-w, w), (0.0, geom.crystal_height_mm)]
        for axis, n in enumerate(shape):
            lo, hi = lims[axis]
            k = np.floor((pos[:, axis] - lo) / (hi - lo) * n).astype(np.int64)
            idx = idx * n + np.clip(k, 0, n - 1)
        return idx

    def to_dict(self) -> dict:
        return {"mode": self.mode, "slab_shape": list(self.slab_shape), "oto_shape": list(self.oto_shape)}

    @classmethod
    def from_dict(cls, d) -> "Voxelization":
        return cls(d["mode"], tuple(d["slab_shape"]), tuple(d["oto_shape"]))


def default_schedule() -> list:
    return [
        Voxelization("sipm"),
        Voxelization("voxel", (4, 4, 2), (4, 4)),
        Voxelization("voxel", (8, 8, 2), (4, 4)),
    ]


@dataclass
class BinEstimates:
    slab_channel: np.ndarray
    oto_channel: np.ndarray
    mean: np.ndarray  # ps
    sem: np.ndarray  # ps
    count: np.ndarray
    n_slab: int
    n_oto: int
    dropped: int = 0

    def __len__(self):
        return len(self.mean)


@dataclass
class CalibrationSolution:
    voxelization: Voxelization
    slab: np.ndarray  # ps, zero mean
    oto: np.ndarray  # ps, zero mean
    detector_offset_ps: float  # slab mean minus one-to-one mean
    residual_norm: float = 0.0
    iteration: int = 0
    n_bins: int = 0

    @property
    def corrections(self) -> np.ndarray:
        return np.concatenate([self.slab, self.oto])

    @property
    def max_abs_ps(self) -> float:
        return float(max(np.max(np.abs(self.slab), initial=0.0), np.max(np.abs(self.oto), initial=0.0),
                         abs(self.detector_offset_ps)))

    def predict(self, M) -> np.ndarray:
        """Predicted bin means ``M c`` of the gauge-fixed solution."""
        c = np.concatenate([self.slab + self.detector_offset_ps, self.oto])
        return M @ c

    def to_dict(self) -> dict:
        return {
            "format": TABLE_FORMAT, "version": TABLE_VERSION, "iteration": self.iteration,
            "voxelization": self.voxelization.to_dict(),
            "detector_offset_ps": float(self.detector_offset_ps),
            "residual_norm": float(self.residual_norm), "n_bins": int(self.n_bins),
            "slab_ps": {str(i): float(v) for i, v in enumerate(self.slab)},
            "oto_ps": {str(i): float(v) for i, v in enumerate(self.oto)},
        }

    @classmethod
    def from_dict(cls, d) -> "CalibrationSolution":
        from .errors import FormatError

        if d.get("format") != TABLE_FORMAT or d.get("version") != TABLE_VERSION:
            raise FormatError("not a version-1 calibration table")
        vox = Voxelization.from_dict(d["voxelization"])
        table = lambda t, n: np.array([t[str(i)] for i in range(n)], dtype=np.float64)
        return cls(vox, table(d["slab_ps"], vox.n_channels(DetectorKind.SLAB)),
                   table(d["oto_ps"], vox.n_channels(DetectorKind.ONE_TO_ONE)),
                   float(d["detector_offset_ps"]), float(d["residual_norm"]), int(d["iteration"]),
                   int(d["n_bins"]))


# --------------------------------------------------------------------------
# bin estimation


def _pair_samples(cset: CoincidenceSet, vox: Voxelization, chunk: int = 200_000):
    """(bin id, label-compensated time difference) for every used sample."""
    n_o = vox.n_channels(DetectorKind.ONE_TO_ONE)
    if vox.mode == "voxel":
        for kind in DetectorKind:
            if cset.side(kind).pos is None:
                raise IncompleteCluster("voxel calibration needs estimated positions")
        a = vox.voxel_of(DetectorKind.SLAB, cset.slab.pos)
        b = vox.voxel_of(DetectorKind.ONE_TO_ONE, cset.oto.pos)
        dt = cset.dt_meas - cset.label
        ok = np.isfinite(dt)
        return (a * n_o + b)[ok], dt[ok]
    bins, vals = [], []
    for s in range(0, len(cset), chunk):
        e = min(s + chunk, len(cset))
        # per-row reference keeps the products small
        ref = cset.oto.ts[s:e, :1]
        ts_s = cset.slab.ts[s:e] - ref
        ts_o = cset.oto.ts[s:e] - ref
        y = cset.label[s:e]
        vs = cset.slab.sipm[s:e] >= 0
        vo = cset.oto.sipm[s:e] >= 0
        rows, i, j = np.nonzero(vs[:, :, None] & vo[:, None, :])
        bins.append(cset.slab.sipm[s:e][rows, i].astype(np.int64) * n_o
                    + cset.oto.sipm[s:e][rows, j].astype(np.int64))
        vals.append(ts_s[rows, i] - ts_o[rows, j] - y[rows])
    if not bins:
        return np.zeros(0, np.int64), np.zeros(0)
    return np.concatenate(bins), np.concatenate(vals)


def _bin_mean(v: np.ndarray, method: str, gauss_min: int):
    n = len(v)
    if method == "gauss" and n >= gauss_min:
        try:
            fit = fitstat.fit_gaussian(v, min_samples=gauss_min)
            return fit.mu, fit.sigma_mu
        except FitDiverged:
            pass
    if method == "mean":
        return float(v.mean()), float(v.std(ddof=1) / math.sqrt(n))
    # truncated mean, 10 % cut on both sides
    m = float(stats.trim_mean(v, 0.1))
    lo, hi = np.quantile(v, [0.1, 0.9])
    inner = v[(v >= lo) & (v <= hi)]
    sd = float(inner.std(ddof=1)) if len(inner) > 1 else float(v.std(ddof=1))
    return m, sd / (0.8 * math.sqrt(n))


def estimate_mean_dt(cset: CoincidenceSet, vox: Voxelization, min_events: int = MIN_BIN_EVENTS,
                     method: str = "gauss", gauss_min: int = GAUSS_FIT_MIN) -> BinEstimates:
    """Per populated channel combination: mean of ``dt_meas - y`` and its error.

    ``method`` is ``"gauss"`` (Gaussian-fit mean, truncated mean below
    ``gauss_min`` samples), ``"trimmed"`` or ``"mean"``.
    """
    if method not in ("gauss", "trimmed", "mean"):
        raise ValueError(f"unknown estimator {method!r}")
    n_s = vox.n_channels(DetectorKind.SLAB)
    n_o = vox.n_channels(DetectorKind.ONE_TO_ONE)
    bins, vals = _pair_samples(cset, vox)
    order = np.argsort(bins, kind="stable")
    bins, vals = bins[order], vals[order]
    ids, starts, counts = np.unique(bins, return_index=True, return_counts=True)
    keep = counts >= max(min_events, 2)
    dropped = int((~keep).sum())
    if dropped:
        warnings.warn(f"{dropped} channel combinations below {min_events} events excluded")
    if not keep.any():
        raise EmptyCalibration("no channel combination reaches the minimum event count")
    means, sems = [], []
    for st, c in zip(starts[keep], counts[keep]):
        m, s = _bin_mean(vals[st:st + c], method, gauss_min)
        means.append(m)
        sems.append(s)
    ids = ids[keep]
    sems = np.maximum(np.asarray(sems), 1e-6)
    return BinEstimates(ids // n_o, ids % n_o, np.asarray(means), sems, counts[keep], n_s, n_o, dropped)


# --------------------------------------------------------------------------
# linear system


def build_matrix(slab_channel, oto_channel, n_slab: int, n_oto: int) -> sparse.csr_matrix:
    """Rows ``+1`` at the slab channel column, ``-1`` at ``n_slab + oto channel``."""
    a = np.asarray(slab_channel, dtype=np.int64)
    b = np.asarray(oto_channel, dtype=np.int64)
    if a.shape != b.shape:
        raise ValueError("channel index arrays differ in length")
    if len(a) and (a.min() < 0 or a.max() >= n_slab or b.min() < 0 or b.max() >= n_oto):
        raise ValueError("channel index out of range")
    r = np.arange(len(a))
    data = np.concatenate([np.ones(len(a)), -np.ones(len(a))])
    return sparse.csr_matrix((data, (np.concatenate([r, r]), np.concatenate([a, n_slab + b]))),
                             shape=(len(a), n_slab + n_oto))


def gauge_fix(c: np.ndarray, n_slab: int):
    """Split a raw correction vector into zero-mean halves and the detector offset."""
    s, o = c[:n_slab], c[n_slab:]
    ms = float(s.mean()) if len(s) else 0.0
    mo = float(o.mean()) if len(o) else 0.0
    return s - ms, o - mo, ms - mo


def solve_corrections(M, dt, weights=None, n_slab: Optional[int] = None, damping: float = 1e-6,
                      refine: int = 50, vox: Optional[Voxelization] = None, iteration: int = 0
                      ) -> CalibrationSolution:
    """Weighted least squares by damped normal equations with iterative refinement.

    The damping ``lambda = damping * mean(diag(N))`` makes the system regular;
    refinement steps remove its bias inside the range of ``M`` so exact data
    are reproduced, while the unobservable direction stays at zero.
    """
    M = sparse.csr_matrix(M)
    dt = np.asarray(dt, dtype=np.float64)
    if M.shape[0] == 0:
        raise EmptyCalibration("no populated bins to solve")
    if M.shape[0] != len(dt):
        raise ValueError("matrix rows and time differences differ in length")
    w = np.ones(len(dt)) if weights is None else np.asarray(weights, dtype=np.float64)
    n_ch = M.shape[1]
    if n_slab is None:
        n_slab = n_ch // 2
    N = (M.T @ sparse.diags(w) @ M).toarray()
    rhs = M.T @ (w * dt)
    lam = damping * max(float(np.mean(np.diag(N))), 1e-300)
    A = N + lam * np.eye(n_ch)
    L = np.linalg.cholesky(A)

    def solve(b):
        return np.linalg.solve(L.T, np.linalg.solve(L, b))

    c = solve(rhs)
    for _ in range(refine):
        r = rhs - N @ c
        step = solve(r)
        c = c + step
        if np.max(np.abs(step)) <= 1e-13 * max(np.max(np.abs(c)), 1.0):
            break
    resid = dt - M @ c
    s, o, off = gauge_fix(c, n_slab)
    vox = vox if vox is not None else Voxelization("sipm")
    return CalibrationSolution(vox, s, o, off, float(np.sqrt(np.sum(w * resid ** 2))), iteration, M.shape[0])


# --------------------------------------------------------------------------
# application


def _permute_truth(truth: Optional[TruthArrays], kind, order):
    if truth is None:
        return truth
    k = int(kind)
    skew = list(truth.skew)
    walk = list(truth.timewalk)
    skew[k] = np.take_along_axis(skew[k], order, axis=1)
    walk[k] = np.take_along_axis(walk[k], order, axis=1)
    return TruthArrays(tuple(skew), tuple(walk), truth.pos, truth.energy, truth.photopeak)


def apply_solution(cset: CoincidenceSet, sol: CalibrationSolution) -> CoincidenceSet:
    """Subtract the corrections from the hit timestamps; returns a new set."""
    out = cset.copy()
    vox = sol.voxelization
    for kind in DetectorKind:
        side = out.side(kind)
        table = sol.slab + sol.detector_offset_ps if kind == DetectorKind.SLAB else sol.oto
        if vox.mode == "sipm":
            valid = side.sipm >= 0
            shift = np.where(valid, table[np.where(valid, side.sipm, 0)], 0.0)
            side.ts = side.ts - shift
            order = side.sort_hits()
            out.truth = _permute_truth(out.truth, kind, order)
        else:
            if side.pos is None:
                raise IncompleteCluster("voxel corrections need estimated positions")
            side.ts = side.ts - table[vox.voxel_of(kind, side.pos)][:, None]
    return out


def apply_calibration(cset: CoincidenceSet, solutions: Sequence[CalibrationSolution]) -> CoincidenceSet:
    for sol in solutions:
        cset = apply_solution(cset, sol)
    return cset


def calibrate_once(cset: CoincidenceSet, vox: Voxelization, min_events: int = MIN_BIN_EVENTS,
                   method: str = "gauss", iteration: int = 0) -> CalibrationSolution:
    est = estimate_mean_dt(cset, vox, min_events, method)
    M = build_matrix(est.slab_channel, est.oto_channel, est.n_slab, est.n_oto)
    return solve_corrections(M, est.mean, 1.0 / est.sem ** 2, est.n_slab, vox=vox, iteration=iteration)


def timing_ctr(cset: CoincidenceSet):
    """CTR of the label-compensated time differences, NaN when unfittable."""
    try:
        return fitstat.ctr(cset.dt_meas - cset.label)
    except FitDiverged:
        return float("nan"), float("nan")


@dataclass
class ScheduleResult:
    solutions: list
    corrected: CoincidenceSet
    history: list = field(default_factory=list)


def run_subcalibration_schedule(cset: CoincidenceSet, schedule: Optional[Sequence[Voxelization]] = None,
                                min_events: int = MIN_BIN_EVENTS, method: str = "gauss") -> ScheduleResult:
    """Run the sub-calibrations in order, each on the output of the previous one."""
    schedule = list(schedule) if schedule is not None else default_schedule()
    ctr0, err0 = timing_ctr(cset)
    history = [{"iteration": 0, "mode": "none", "ctr_ps": ctr0, "ctr_err_ps": err0, "max_abs_ps": 0.0,
                "n_bins": 0}]
    solutions = []
    cur = cset
    for k, vox in enumerate(schedule, start=1):
        sol = calibrate_once(cur, vox, min_events, method, iteration=k)
        cur = apply_solution(cur, sol)
        ctr, err = timing_ctr(cur)
        history.append({"iteration": k, "mode": vox.mode, "ctr_ps": ctr, "ctr_err_ps": err,
                        "max_abs_ps": sol.max_abs_ps, "n_bins": sol.n_bins})
        log.info("sub-calibration %d (%s): %d bins, max|c|=%.2f ps, CTR=%.1f ps", k, vox.mode,
                 sol.n_bins, sol.max_abs_ps, ctr)
        solutions.append(sol)
    return ScheduleResult(solutions, cur, history)
