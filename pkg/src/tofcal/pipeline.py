"""Stage functions behind the command line.

Every stage reads its inputs from the output directory, writes versioned
artifacts plus a summary JSON, and keeps the summaries free of timings and
absolute paths so reruns are byte-identical.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import anacal, boost, dataio, detsim, explain, fitstat, prep, schemas
from .config import ALL_WINDOW, EnergyWindow, PipelineConfig, window_from_bounds
from .core import FEATURE_SCHEMA, CoincidenceSet, feature_matrix
from .errors import FitDegenerate, FitDiverged

log = logging.getLogger(__name__)

DATASETS = detsim.DATASETS
SUMMARY_VERSION = 1


class MissingInput(FileNotFoundError):
    """An upstream artifact does not exist."""

    def __init__(self, path):
        super().__init__(f"missing input: {path}")
        self.path = Path(path)


@dataclass(frozen=True)
class Layout:
    root: Path

    def dataset(self, stage: str, name: str) -> Path:
        return self.root / stage / f"{name}{dataio.DATASET_SUFFIX}"

    @property
    def prep_models(self) -> Path:
        return self.root / "prep" / "prep_models.json"

    @property
    def calibration(self) -> Path:
        return self.root / "calib" / "calibration.json"

    def model(self, name: str) -> Path:
        return self.root / "models" / f"{name}.json"

    def summary(self, stage: str) -> Path:
        return self.root / f"{stage}_summary.json"

    def rel(self, path: Path) -> str:
        return Path(path).relative_to(self.root).as_posix()


def model_name(hp) -> str:
    return f"d{hp.max_depth}_lr{hp.learning_rate:g}"


def _require(path: Path) -> Path:
    if not Path(path).exists():
        raise MissingInput(path)
    return Path(path)


def _write_summary(layout: Layout, stage: str, body: dict) -> dict:
    summary = {"format": f"tofcal-{stage}-summary", "version": SUMMARY_VERSION, **body}
    schemas.validate(summary, schemas.SCHEMAS[stage])
    dataio.write_json(layout.summary(stage), summary)
    return summary


def _finite(v) -> Optional[float]:
    v = float(v)
    return v if math.isfinite(v) else None


def _write_set(path: Path, cs: CoincidenceSet) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    dataio.write_dataset(path, cs)
    if cs.truth is not None:
        dataio.write_truth(dataio.truth_path(path), cs.truth)


def _read_set(path: Path) -> CoincidenceSet:
    path = _require(path)
    return dataio.read_dataset(path, with_truth=dataio.truth_path(path).exists())


# --------------------------------------------------------------------------
# in-memory building blocks


def simulate(cfg: PipelineConfig) -> dict:
    return detsim.simulate_campaign(cfg.plan(), cfg.sim)


def fit_preprocessing(train: CoincidenceSet, cfg: PipelineConfig) -> prep.PrepModels:
    return prep.fit_prep_models(train, cfg.prep.energy_min_events)


def preprocess_all(sets: dict, models: prep.PrepModels, cfg: PipelineConfig) -> dict:
    return {k: prep.preprocess(v, models, cfg.prep.min_photons, cfg.prep.max_photons) for k, v in sets.items()}


def calibrate(train: CoincidenceSet, cfg: PipelineConfig) -> anacal.ScheduleResult:
    return anacal.run_subcalibration_schedule(train, cfg.anacal.schedule, cfg.anacal.min_events,
                                              cfg.anacal.estimator)


def window_mask(cs: CoincidenceSet, window: EnergyWindow) -> np.ndarray:
    return window.mask(cs.slab.energy, cs.oto.energy)


def ctr_row(window: EnergyWindow, stage: str, residual) -> dict:
    try:
        fwhm, err = fitstat.ctr(residual)
    except FitDiverged as exc:
        log.warning("CTR fit failed for %s / %s: %s", stage, window, exc)
        fwhm, err = float("nan"), float("nan")
    return {"window": window.name, "model": stage, "n": int(len(residual)),
            "CTR_ps": _finite(fwhm), "CTR_err_ps": _finite(err)}


LINEARITY_ENERGY = window_from_bounds(300, 700)


def linearity(cs: CoincidenceSet, predictions, c_air, energy: Optional[EnergyWindow] = LINEARITY_ENERGY
              ) -> fitstat.GlobalLinearity:
    """Global slope factor of ``predictions`` on the test set, per grid point then averaged."""
    m = window_mask(cs, energy) if energy is not None else np.ones(len(cs), dtype=bool)
    return fitstat.fit_linearity_grid(cs.source[m, :2], cs.source[m, 2], np.asarray(predictions)[m], c_air=c_air)


# --------------------------------------------------------------------------
# file stages


def stage_simulate(cfg: PipelineConfig) -> dict:
    layout = Layout(Path(cfg.out_dir))
    paths = detsim.run_campaign(cfg.plan(), layout.root / "data", cfg.sim)
    rows = []
    for name in DATASETS:
        p = paths[name]
        rows.append({"dataset": name, "path": layout.rel(p), "sha256": dataio.sha256_file(p),
                     "truth_sha256": dataio.sha256_file(dataio.truth_path(p)),
                     "n": int(len(dataio.read_dataset(p)))})
    return _write_summary(layout, "simulate", {"seed": cfg.seed, "datasets": rows})


def stage_preprocess(cfg: PipelineConfig) -> dict:
    layout = Layout(Path(cfg.out_dir))
    raw = {k: _read_set(layout.dataset("data", k)) for k in DATASETS}
    models = fit_preprocessing(raw["train"], cfg)
    layout.prep_models.parent.mkdir(parents=True, exist_ok=True)
    dataio.write_json(layout.prep_models, dataio.prep_models_to_dict(models))
    rows = []
    for k, cs in preprocess_all(raw, models, cfg).items():
        path = layout.dataset("prep", k)
        _write_set(path, cs)
        rows.append({"dataset": k, "n_in": int(len(raw[k])), "n_out": int(len(cs)),
                     "sha256": dataio.sha256_file(path)})
    fallback = {kind.name: int(c.fallback.sum()) for kind, c in models.energy_cal.items()}
    return _write_summary(layout, "preprocess", {
        "datasets": rows, "energy_fallback_voxels": fallback,
        "prep_models_sha256": dataio.sha256_file(layout.prep_models),
    })


def stage_calibrate(cfg: PipelineConfig) -> dict:
    layout = Layout(Path(cfg.out_dir))
    sets = {k: _read_set(layout.dataset("prep", k)) for k in DATASETS}
    res = calibrate(sets["train"], cfg)
    layout.calibration.parent.mkdir(parents=True, exist_ok=True)
    dataio.write_json(layout.calibration, dataio.calibration_to_dict(res.solutions))
    rows = []
    for k, cs in sets.items():
        out = res.corrected if k == "train" else anacal.apply_calibration(cs, res.solutions)
        path = layout.dataset("calib", k)
        _write_set(path, out)
        rows.append({"dataset": k, "n": int(len(out)), "sha256": dataio.sha256_file(path)})
    history = [{k: (_finite(v) if isinstance(v, float) else v) for k, v in h.items()} for h in res.history]
    return _write_summary(layout, "calibrate", {
        "history": history, "datasets": rows, "calibration_sha256": dataio.sha256_file(layout.calibration),
    })


def _features(cs: CoincidenceSet) -> np.ndarray:
    return feature_matrix(cs)


def stage_train(cfg: PipelineConfig) -> dict:
    layout = Layout(Path(cfg.out_dir))
    tr = _read_set(layout.dataset("calib", "train"))
    va = _read_set(layout.dataset("calib", "validation"))
    te = _read_set(layout.dataset("calib", "test"))
    X, Xv, Xt = _features(tr), _features(va), _features(te)
    entries, best = boost.grid_search(X, tr.label, Xv, va.label, cfg.boost.grid(),
                                      FEATURE_SCHEMA.names, FEATURE_SCHEMA.hash)
    layout.model("x").parent.mkdir(parents=True, exist_ok=True)
    rows = []
    for e in entries:
        name = model_name(e.params)
        boost.save(e.model, layout.model(name))
        rows.append({
            "model": name, "max_depth": e.params.max_depth, "learning_rate": e.params.learning_rate,
            "n_trees": e.model.n_trees, "stopped_early": bool(e.log.stopped_early),
            "val_mse_ps2": e.val_loss, "test_mae_ps": fitstat.mae(te.label, e.model.predict(Xt)),
            "sha256": dataio.sha256_file(layout.model(name)),
        })
    boost.save(best.model, layout.model("best"))
    return _write_summary(layout, "train", {
        "grid": rows, "best": model_name(best.params), "n_train": int(len(tr)), "n_validation": int(len(va)),
    })


def _load_models(layout: Layout) -> dict:
    summary = dataio.read_json(_require(layout.summary("train")))
    return {r["model"]: boost.load(_require(layout.model(r["model"])), FEATURE_SCHEMA.hash)
            for r in summary["grid"]}, summary["best"]


def stage_evaluate(cfg: PipelineConfig, windows=None) -> dict:
    layout = Layout(Path(cfg.out_dir))
    windows = tuple(windows or cfg.windows)
    models, best = _load_models(layout)
    raw = _read_set(layout.dataset("prep", "performance"))
    perf = _read_set(layout.dataset("calib", "performance"))
    test = _read_set(layout.dataset("calib", "test"))
    Xp, Xt = _features(perf), _features(test)
    pred_p = {k: m.predict(Xp) for k, m in models.items()}
    pred_t = {k: m.predict(Xt) for k, m in models.items()}
    ctr_rows, mae_rows = [], []
    for w in windows:
        mr, mp, mt = window_mask(raw, w), window_mask(perf, w), window_mask(test, w)
        ctr_rows.append(ctr_row(w, "raw", (raw.dt_meas - raw.label)[mr]))
        ctr_rows.append(ctr_row(w, "before_ml", (perf.dt_meas - perf.label)[mp]))
        for k in models:
            ctr_rows.append(ctr_row(w, k, (pred_p[k] - perf.label)[mp]))
            mae_rows.append({"window": w.name, "model": k, "n": int(mt.sum()),
                             "MAE_ps": _finite(fitstat.mae(test.label[mt], pred_t[k][mt]) if mt.any() else float("nan"))})
    lin_rows = []
    for k in models:
        row = {"model": k, "epsilon": None, "sigma_epsilon": None, "sem_epsilon": None, "n_points": 0,
               "runs_p": None, "within_3sigma": False}
        try:
            fit = linearity(test, pred_t[k], cfg.sim.c_air)
            row.update(epsilon=fit.epsilon, sigma_epsilon=fit.sigma_epsilon, sem_epsilon=fit.sem_epsilon,
                       n_points=len(fit.points), runs_p=_finite(fit.runs_p),
                       within_3sigma=bool(fit.within(3.0)))
        except (FitDegenerate, FitDiverged, ValueError) as exc:
            log.warning("linearity fit failed for %s: %s", k, exc)
        lin_rows.append(row)
    return _write_summary(layout, "evaluate", {"best": best, "ctr": ctr_rows, "mae": mae_rows,
                                                "linearity": lin_rows})


def explain_subset(n_total: int, n_samples: int, seed: int) -> np.ndarray:
    if n_samples >= n_total:
        return np.arange(n_total)
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(11,))))
    return np.sort(rng.choice(n_total, n_samples, replace=False))


def stage_explain(cfg: PipelineConfig, window: Optional[EnergyWindow] = None) -> dict:
    layout = Layout(Path(cfg.out_dir))
    model_path = _require(layout.model("best"))
    ens = boost.load(model_path, FEATURE_SCHEMA.hash)
    perf = _read_set(layout.dataset("calib", "performance"))
    window = window or ALL_WINDOW
    idx = np.nonzero(window_mask(perf, window))[0]
    idx = idx[explain_subset(len(idx), cfg.explain.n_samples, cfg.seed)]
    X = _features(perf)[idx]
    expl = explain.shap_values(ens, X)
    gap = float(np.max(np.abs(expl.output - ens.predict(X)), initial=0.0))
    out = layout.root / "explain"
    out.mkdir(parents=True, exist_ok=True)
    groups = explain.group_importance(expl)
    explain.write_importance(out / "importance.csv", groups)
    feats = explain.feature_importance(expl)
    scans = {}
    for side in ("o", "s"):
        table = explain.dependence_scan(expl, "dt_meas", explain.first_sipm_photons(X, side))
        explain.write_dependence(out / f"dependence_{side}.csv", table)
        scans[side] = explain.stratified_rank_correlation(table, cfg.explain.scan_bins, cfg.explain.scan_min_count)
    return _write_summary(layout, "explain", {
        "model_sha256": dataio.sha256_file(model_path), "window": window.name, "n_samples": int(len(idx)),
        "base_value_ps": expl.base_value, "max_local_accuracy_gap_ps": gap,
        "group_importance": [{"group": g, "mean_abs_sv_ps": v} for g, v in groups.items()],
        "feature_importance": [{"feature": f, "mean_abs_sv_ps": v} for f, v in feats.items()],
        "count_separation_rho": {"one_to_one": _finite(scans["o"]), "slab": _finite(scans["s"])},
    })


def _fmt(v, nd=1):
    return "n/a" if v is None else f"{v:.{nd}f}"


def stage_report(cfg: PipelineConfig) -> str:
    layout = Layout(Path(cfg.out_dir))
    lines = ["# tofcal report", ""]
    cal = layout.summary("calibrate")
    if cal.exists():
        lines += ["## Analytical calibration", "", "| iteration | mode | CTR (ps) | max abs correction (ps) |",
                  "|---|---|---|---|"]
        for h in dataio.read_json(cal)["history"]:
            lines.append(f"| {h['iteration']} | {h['mode']} | {_fmt(h['ctr_ps'])} | {_fmt(h['max_abs_ps'])} |")
        lines.append("")
    tr = layout.summary("train")
    if tr.exists():
        s = dataio.read_json(tr)
        lines += [f"## Grid search (best: {s['best']})", "", "| model | trees | val MSE (ps^2) | test MAE (ps) |",
                  "|---|---|---|---|"]
        for r in s["grid"]:
            lines.append(f"| {r['model']} | {r['n_trees']} | {_fmt(r['val_mse_ps2'])} | {_fmt(r['test_mae_ps'], 2)} |")
        lines.append("")
    ev = layout.summary("evaluate")
    if ev.exists():
        s = dataio.read_json(ev)
        wins = list(dict.fromkeys(r["window"] for r in s["ctr"]))
        stages = list(dict.fromkeys(r["model"] for r in s["ctr"]))
        table = {(r["window"], r["model"]): r for r in s["ctr"]}
        lines += ["## CTR (ps)", "", "| model | " + " | ".join(wins) + " |", "|---|" + "---|" * len(wins)]
        for st in stages:
            cells = [f"{_fmt(table[w, st]['CTR_ps'])} ± {_fmt(table[w, st]['CTR_err_ps'])}" for w in wins]
            lines.append(f"| {st} | " + " | ".join(cells) + " |")
        lines += ["", "## Linearity", "", "| model | epsilon | spread | std. error | runs p |", "|---|---|---|---|---|"]
        for r in s["linearity"]:
            lines.append(f"| {r['model']} | {_fmt(r['epsilon'], 4)} | {_fmt(r['sigma_epsilon'], 4)} | "
                         f"{_fmt(r.get('sem_epsilon'), 4)} | {_fmt(r['runs_p'], 3)} |")
        lines.append("")
    ex = layout.summary("explain")
    if ex.exists():
        s = dataio.read_json(ex)
        lines += ["## Mean |SHAP| per feature group (ps)", "", "| group | value |", "|---|---|"]
        for r in s["group_importance"]:
            lines.append(f"| {r['group']} | {_fmt(r['mean_abs_sv_ps'], 2)} |")
        lines.append("")
    text = "\n".join(lines) + "\n"
    (layout.root / "report.md").write_text(text)
    return text


# --------------------------------------------------------------------------
# whole experiment in memory


@dataclass
class Experiment:
    cfg: PipelineConfig
    raw: dict  # preprocessed, not timing calibrated
    calibrated: dict
    features: dict
    schedule: anacal.ScheduleResult
    entries: list
    best: object

    def model(self, name: str):
        return next(e.model for e in self.entries if model_name(e.params) == name)

    def residual(self, stage: str, dataset: str = "performance") -> np.ndarray:
        """Predicted minus true time difference of ``stage``: raw, before_ml or a model name."""
        cs = self.raw[dataset] if stage == "raw" else self.calibrated[dataset]
        if stage in ("raw", "before_ml"):
            return cs.dt_meas - cs.label
        return self.model(stage).predict(self.features[dataset]) - cs.label

    def ctr_table(self, windows=None) -> list:
        rows = []
        for w in windows or self.cfg.windows:
            for stage in ["raw", "before_ml"] + [model_name(e.params) for e in self.entries]:
                cs = self.raw["performance"] if stage == "raw" else self.calibrated["performance"]
                rows.append(ctr_row(w, stage, self.residual(stage)[window_mask(cs, w)]))
        return rows


def run_experiment(cfg: PipelineConfig, train_models: bool = True) -> Experiment:
    sets = simulate(cfg)
    models = fit_preprocessing(sets["train"], cfg)
    raw = preprocess_all(sets, models, cfg)
    del sets
    res = calibrate(raw["train"], cfg)
    cal = {k: (res.corrected if k == "train" else anacal.apply_calibration(v, res.solutions))
           for k, v in raw.items()}
    feats = {k: _features(v) for k, v in cal.items()}
    entries, best = [], None
    if train_models:
        entries, best = boost.grid_search(feats["train"], cal["train"].label, feats["validation"],
                                          cal["validation"].label, cfg.boost.grid(),
                                          FEATURE_SCHEMA.names, FEATURE_SCHEMA.hash)
    return Experiment(cfg, raw, cal, feats, res, entries, best)
