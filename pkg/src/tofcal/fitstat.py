"""Evaluation statistics: MAE, Gaussian fits, CTR and linearity regression."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import odr, special, stats

from .core import C_VACUUM_M_PER_S, c_air_mm_per_ps
from .errors import FitDegenerate, FitDiverged

FWHM_FACTOR = 2.0 * math.sqrt(2.0 * math.log(2.0))
LINEARITY_WINDOW_MM = (-75.0, 45.0)
MIN_FIT_SAMPLES = 1000


def mae(labels, predictions) -> float:
    labels = np.asarray(labels, dtype=float)
    predictions = np.asarray(predictions, dtype=float)
    if labels.shape != predictions.shape:
        raise ValueError("labels and predictions differ in length")
    if labels.size == 0:
        raise ValueError("mae of an empty set")
    return float(np.mean(np.abs(predictions - labels)))


def mae_by_position(z_mm, labels, predictions) -> list:
    """Rows of ``{"z_mm", "n", "mae_ps"}`` sorted by source position."""
    z_mm = np.asarray(z_mm, dtype=float)
    labels = np.asarray(labels, dtype=float)
    predictions = np.asarray(predictions, dtype=float)
    if len(z_mm) == 0:
        raise ValueError("mae of an empty set")
    rows = []
    for z in np.unique(z_mm):
        sel = z_mm == z
        rows.append({"z_mm": float(z), "n": int(sel.sum()), "mae_ps": mae(labels[sel], predictions[sel])})
    return rows


@dataclass(frozen=True)
class GaussianFit:
    mu: float
    sigma: float
    amplitude: float
    sigma_mu: float
    sigma_sigma: float
    chi2_ndf: float
    chi2: float = 0.0
    ndf: int = 0
    bin_width: float = 0.0
    n_samples: int = 0

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def _gauss_binned(edges, amp, mu, sigma):
    # expected counts per bin: amp is the total number of entries
    cdf = special.ndtr((edges - mu) / sigma)
    return amp * np.diff(cdf)


def _expected(centres, width, p):
    amp, mu, sigma = p
    return amp * width / (sigma * math.sqrt(2 * math.pi)) * np.exp(-0.5 * ((centres - mu) / sigma) ** 2)


def fit_histogram(centres, counts, p0, max_iter: int = 200, tol: float = 1e-10,
                  sigma_max: Optional[float] = None) -> GaussianFit:
    """Poisson-weighted Gaussian fit to a histogram by damped Gauss-Newton.

    ``p0`` is ``(peak height, mu, sigma)``; the model is integrated over each
    bin. Weights use the current model expectation (Pearson chi2).
    """
    centres = np.asarray(centres, dtype=float)
    counts = np.asarray(counts, dtype=float)
    if len(centres) < 3:
        raise FitDiverged("fewer than three bins", {"n_bins": len(centres)})
    width = float(centres[1] - centres[0])
    edges = np.concatenate([centres - width / 2, [centres[-1] + width / 2]])
    h0, mu, sigma = (float(v) for v in p0)
    if sigma <= 0 or not np.isfinite(sigma):
        sigma = width
    amp = max(h0 * sigma * math.sqrt(2 * math.pi) / width, 1.0)
    p = np.array([amp, mu, sigma])
    if sigma_max is None:
        sigma_max = 2.0 * (edges[-1] - edges[0])

    def residual(p):
        f = _gauss_binned(edges, *p)
        w = 1.0 / np.maximum(f, 1.0)
        return f, w, float(np.sum(w * (counts - f) ** 2))

    def jacobian(p):
        amp, mu, sigma = p
        z = (edges - mu) / sigma
        phi = np.exp(-0.5 * z * z) / math.sqrt(2 * math.pi)
        d_amp = np.diff(special.ndtr(z))
        d_mu = -amp / sigma * np.diff(phi)
        d_sig = -amp / sigma * np.diff(z * phi)
        return np.column_stack([d_amp, d_mu, d_sig])

    lam = 1e-3
    f, w, chi2 = residual(p)
    converged = False
    for it in range(max_iter):
        J = jacobian(p)
        A = J.T @ (w[:, None] * J)
        g = J.T @ (w * (counts - f))
        improved = False
        for _ in range(30):
            step = np.linalg.solve(A + lam * np.diag(np.diag(A) + 1e-300), g)
            trial = p + step
            if trial[2] > 0 and trial[0] > 0:
                f2, w2, chi2_2 = residual(trial)
                if chi2_2 <= chi2:
                    improved = True
                    break
            lam *= 10.0
        if not improved:
            converged = True  # no downhill step left: at the minimum
            break
        rel = abs(chi2 - chi2_2) / max(chi2, 1e-300)
        small = np.all(np.abs(step) <= 1e-9 * (np.abs(p) + 1e-9 * width))
        p, f, w, chi2 = trial, f2, w2, chi2_2
        lam = max(lam / 10.0, 1e-12)
        if rel < tol or small:
            converged = True
            break
    amp, mu, sigma = p
    diag = {"iterations": it + 1, "params": p.tolist(), "chi2": chi2}
    if not converged or not np.all(np.isfinite(p)):
        raise FitDiverged("Gaussian fit did not converge", diag)
    if sigma > sigma_max or not (edges[0] - sigma_max <= mu <= edges[-1] + sigma_max):
        raise FitDiverged("Gaussian fit ran outside the data range", diag)
    J = jacobian(p)
    try:
        cov = np.linalg.inv(J.T @ (w[:, None] * J))
    except np.linalg.LinAlgError as exc:
        raise FitDiverged("singular fit covariance", diag) from exc
    valid = f >= 5.0
    chi2_v = float(np.sum((counts[valid] - f[valid]) ** 2 / f[valid]))
    ndf = int(valid.sum()) - 3
    chi2_ndf = chi2_v / ndf if ndf > 0 else float("nan")
    return GaussianFit(float(mu), float(abs(sigma)), float(amp), float(math.sqrt(max(cov[1, 1], 0.0))),
                       float(math.sqrt(max(cov[2, 2], 0.0))), chi2_ndf, chi2_v, ndf, width,
                       int(counts.sum()))


def fd_bin_width(samples) -> float:
    samples = np.asarray(samples, dtype=float)
    q75, q25 = np.percentile(samples, [75, 25])
    return 2.0 * (q75 - q25) / len(samples) ** (1.0 / 3.0)


def histogram(samples, bin_width: Optional[float] = None, fit_range=None):
    """Fixed-width histogram anchored at the sample minimum (or range start)."""
    samples = np.asarray(samples, dtype=float)
    if fit_range is not None:
        lo, hi = fit_range
        samples = samples[(samples >= lo) & (samples < hi)]
    else:
        lo, hi = float(samples.min()), float(samples.max())
    width = bin_width if bin_width is not None else fd_bin_width(samples)
    if not width > 0:
        raise FitDiverged("zero bin width (degenerate sample)", {"n": len(samples)})
    n_bins = max(int(math.floor((hi - lo) / width)) + 1, 1)
    idx = np.floor((samples - lo) / width).astype(np.int64)
    idx = np.clip(idx, 0, n_bins - 1)
    counts = np.bincount(idx, minlength=n_bins).astype(float)
    centres = lo + (np.arange(n_bins) + 0.5) * width
    return centres, counts


def fit_gaussian(samples, bin_width: Optional[float] = None, min_samples: int = MIN_FIT_SAMPLES,
                 fit_range=None, max_iter: int = 200) -> GaussianFit:
    """Histogram the samples and fit a Gaussian.

    Binning is Freedman-Diaconis unless ``bin_width`` is given. The fit is
    seeded with the sample mean and standard deviation.
    """
    samples = np.asarray(samples, dtype=float)
    samples = samples[np.isfinite(samples)]
    if len(samples) < min_samples:
        raise FitDiverged(f"need at least {min_samples} samples, got {len(samples)}",
                          {"n": len(samples)})
    centres, counts = histogram(samples, bin_width, fit_range)
    mu0 = float(samples.mean())
    s0 = float(samples.std())
    width = centres[1] - centres[0] if len(centres) > 1 else 1.0
    h0 = len(samples) * width / (s0 * math.sqrt(2 * math.pi)) if s0 > 0 else counts.max()
    span = float(samples.max() - samples.min())
    return fit_histogram(centres, counts, (h0, mu0, s0), max_iter=max_iter, sigma_max=span)


def ctr_fwhm(fit: GaussianFit):
    """``(FWHM, uncertainty)`` of a fitted Gaussian in ps."""
    return FWHM_FACTOR * fit.sigma, FWHM_FACTOR * fit.sigma_sigma


def ctr(samples, **kw):
    return ctr_fwhm(fit_gaussian(samples, **kw))


@dataclass
class LinearityFit:
    epsilon: float
    intercept: float
    sigma_epsilon: float
    sigma_intercept: float
    slope: float
    z_mm: np.ndarray
    mu_ps: np.ndarray
    sigma_mu_ps: np.ndarray
    residuals_ps: np.ndarray
    runs_p: float = float("nan")
    extra: dict = field(default_factory=dict)

    def within(self, n_sigma: float = 3.0) -> bool:
        return abs(self.epsilon - 1.0) <= n_sigma * self.sigma_epsilon

    def residual_rows(self) -> list:
        return [{"z_mm": float(z), "mu_ps": float(m), "sigma_mu_ps": float(s), "residual_ps": float(r)}
                for z, m, s, r in zip(self.z_mm, self.mu_ps, self.sigma_mu_ps, self.residuals_ps)]


def sign_runs_test(residuals) -> float:
    """Two-sided Wald-Wolfowitz p-value for the sequence of residual signs."""
    s = np.sign(np.asarray(residuals, dtype=float))
    s = s[s != 0]
    n1 = int((s > 0).sum())
    n2 = int((s < 0).sum())
    if n1 == 0 or n2 == 0:
        return 0.0 if len(s) > 1 else 1.0
    runs = 1 + int(np.sum(s[1:] != s[:-1]))
    n = n1 + n2
    mean = 2.0 * n1 * n2 / n + 1.0
    var = 2.0 * n1 * n2 * (2.0 * n1 * n2 - n) / (n * n * (n - 1.0))
    if var <= 0:
        return 1.0
    z = (runs - mean) / math.sqrt(var)
    return float(2.0 * stats.norm.sf(abs(z)))


def fit_linearity(z_mm, mu_ps, sigma_mu_ps, sigma_z_mm: float = 0.1,
                  window=LINEARITY_WINDOW_MM, c_air: float = C_VACUUM_M_PER_S) -> LinearityFit:
    """Errors-in-variables line ``mu = (-2/c) * eps * z + b`` over the window."""
    z_mm = np.asarray(z_mm, dtype=float)
    mu_ps = np.asarray(mu_ps, dtype=float)
    sigma_mu_ps = np.broadcast_to(np.asarray(sigma_mu_ps, dtype=float), z_mm.shape)
    if window is not None:
        sel = (z_mm >= window[0]) & (z_mm <= window[1])
        z_mm, mu_ps, sigma_mu_ps = z_mm[sel], mu_ps[sel], sigma_mu_ps[sel]
    order = np.argsort(z_mm, kind="stable")
    z_mm, mu_ps, sigma_mu_ps = z_mm[order], mu_ps[order], sigma_mu_ps[order]
    if len(z_mm) < 3 or np.ptp(z_mm) <= 0:
        raise FitDegenerate(f"need >= 3 distinct positions, got {len(np.unique(z_mm))}")
    if np.any(sigma_mu_ps <= 0):
        raise FitDegenerate("point uncertainties must be positive")
    k = -2.0 / c_air_mm_per_ps(c_air)
    # ordinary weighted fit as the starting point
    wls = np.polyfit(z_mm, mu_ps, 1, w=1.0 / sigma_mu_ps)
    data = odr.RealData(z_mm, mu_ps, sx=np.full_like(z_mm, sigma_z_mm), sy=sigma_mu_ps)
    model = odr.Model(lambda beta, x: beta[0] * x + beta[1])
    out = odr.ODR(data, model, beta0=wls, maxit=200).run()
    slope, b = (float(v) for v in out.beta)
    s_slope, s_b = (float(v) for v in out.sd_beta)
    if not np.all(np.isfinite(out.beta)):
        raise FitDegenerate("orthogonal distance fit failed")
    resid = mu_ps - (slope * z_mm + b)
    return LinearityFit(slope / k, b, s_slope / abs(k), s_b, slope, z_mm, mu_ps, sigma_mu_ps, resid,
                        sign_runs_test(resid), {"res_var": float(out.res_var), "info": int(out.info)})


def position_means(z_mm, values, min_samples: int = MIN_FIT_SAMPLES, use_fit: bool = True) -> list:
    """Per-position ``(z, mu, sigma_mu, n)`` with a Gaussian-fit mean where possible."""
    z_mm = np.asarray(z_mm, dtype=float)
    values = np.asarray(values, dtype=float)
    rows = []
    for z in np.unique(z_mm):
        v = values[z_mm == z]
        mu, s = float(np.mean(v)), float(np.std(v) / math.sqrt(max(len(v), 1)))
        if use_fit and len(v) >= min_samples:
            try:
                fit = fit_gaussian(v, min_samples=min_samples)
                mu, s = fit.mu, fit.sigma_mu
            except FitDiverged:
                pass
        rows.append((float(z), mu, s, len(v)))
    return rows


def goodness_by_position(z_mm, predictions, min_samples: int = 200) -> list:
    """Per-position Gaussian chi2/ndf of the predicted time differences."""
    z_mm = np.asarray(z_mm, dtype=float)
    predictions = np.asarray(predictions, dtype=float)
    rows = []
    for z in np.unique(z_mm):
        v = predictions[z_mm == z]
        row = {"z_mm": float(z), "n": int(len(v)), "mu_ps": float("nan"), "sigma_ps": float("nan"),
               "chi2_ndf": float("nan"), "ndf": 0, "valid": False}
        try:
            fit = fit_gaussian(v, min_samples=min_samples)
        except FitDiverged:
            rows.append(row)
            continue
        row.update(mu_ps=fit.mu, sigma_ps=fit.sigma, chi2_ndf=fit.chi2_ndf, ndf=fit.ndf,
                   valid=fit.ndf > 0)
        rows.append(row)
    return rows


@dataclass
class GlobalLinearity:
    """Per transverse grid point fits and their average.

    ``sigma_epsilon`` is the sample spread of the per-point slope factors,
    ``sem_epsilon`` the standard error of their mean.
    """

    epsilon: float
    sigma_epsilon: float
    sem_epsilon: float
    points: list
    z_mm: np.ndarray
    mean_residuals_ps: np.ndarray
    runs_p: float

    def within(self, n_sigma: float = 3.0) -> bool:
        return abs(self.epsilon - 1.0) <= n_sigma * self.sigma_epsilon

    def point_rows(self) -> list:
        return [{"x_mm": x, "y_mm": y, "epsilon": f.epsilon, "sigma_epsilon": f.sigma_epsilon,
                 "intercept_ps": f.intercept, "runs_p": f.runs_p} for (x, y), f in self.points]


def fit_linearity_grid(xy_mm, z_mm, values, c_air: float = C_VACUUM_M_PER_S,
                       window=LINEARITY_WINDOW_MM, min_samples: int = MIN_FIT_SAMPLES) -> GlobalLinearity:
    """One errors-in-variables fit per ``(x, y)`` grid point, averaged."""
    xy_mm = np.asarray(xy_mm, dtype=float)
    z_mm = np.asarray(z_mm, dtype=float)
    values = np.asarray(values, dtype=float)
    keys = np.unique(xy_mm, axis=0)
    points = []
    for x, y in keys:
        sel = (xy_mm[:, 0] == x) & (xy_mm[:, 1] == y)
        rows = position_means(z_mm[sel], values[sel], min_samples=min_samples)
        z, mu, s, _ = (np.array(c) for c in zip(*rows))
        try:
            points.append(((float(x), float(y)), fit_linearity(z, mu, s, c_air=c_air, window=window)))
        except FitDegenerate:
            continue
    if not points:
        raise FitDegenerate("no grid point has enough positions for a linearity fit")
    eps = np.array([f.epsilon for _, f in points])
    n = len(eps)
    spread = float(np.std(eps, ddof=1)) if n > 1 else points[0][1].sigma_epsilon
    zs = np.unique(np.concatenate([f.z_mm for _, f in points]))
    mean_res = np.array([np.mean([f.residuals_ps[f.z_mm == z][0] for _, f in points if np.any(f.z_mm == z)])
                         for z in zs])
    return GlobalLinearity(float(eps.mean()), spread, spread / math.sqrt(n), points, zs, mean_res,
                           sign_runs_test(mean_res))
