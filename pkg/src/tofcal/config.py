"""Pipeline configuration.

The file format is flat ``section.key = value [unit]`` text; ``#`` starts a
comment. Physical quantities must carry a unit, dimensionless ones must not.
Lists are comma separated and ``a:b:step`` expands to an inclusive range::

    run.seed = 7
    skew.timewalk_scale = 50 ps
    campaign.z_positions = -130:100:5 mm
    eval.windows = all; 300-700; 450-550 keV

Unknown keys are rejected with a :class:`ConfigError` naming the key.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .anacal import Voxelization, default_schedule
from .boost import DEPTH_GRID, LR_GRID, HyperParams
from .core import C_VACUUM_M_PER_S, ONE_TO_ONE_GEOMETRY, SLAB_GEOMETRY
from .detsim import DEFAULT_OTO_RESPONSE, DEFAULT_SLAB_RESPONSE, CampaignPlan, SimConfig, SkewModel
from .errors import ConfigError
from .prep import MAX_PHOTONS, MIN_PHOTONS

# unit -> factor to the internal unit of its dimension
UNITS = {
    "time": {"ps": 1.0, "ns": 1e3, "us": 1e6},
    "length": {"mm": 1.0, "cm": 10.0, "m": 1e3},
    "speed": {"m/s": 1.0, "mm/ps": 1e9},
    "delay": {"ps/mm": 1.0, "ns/m": 1.0},
    "energy": {"keV": 1.0, "MeV": 1e3},
    "photons": {"photons": 1.0},
}


@dataclass(frozen=True)
class EnergyWindow:
    name: str
    lo: Optional[float] = None  # keV, None = unbounded
    hi: Optional[float] = None

    def mask(self, e_slab, e_oto) -> np.ndarray:
        keep = np.ones(len(e_slab), bool)
        if self.lo is not None:
            keep &= (e_slab >= self.lo) & (e_oto >= self.lo)
        if self.hi is not None:
            keep &= (e_slab <= self.hi) & (e_oto <= self.hi)
        return keep

    def __str__(self):
        return self.name


ALL_WINDOW = EnergyWindow("all")


def window_from_bounds(lo: float, hi: float) -> EnergyWindow:
    if not lo < hi:
        raise ConfigError(f"energy window needs LO < HI, got {lo},{hi}")
    return EnergyWindow(f"{lo:g}-{hi:g}", float(lo), float(hi))


def default_windows() -> tuple:
    return (ALL_WINDOW, window_from_bounds(300, 700), window_from_bounds(450, 550))


@dataclass(frozen=True)
class PrepSettings:
    min_photons: float = MIN_PHOTONS
    max_photons: float = MAX_PHOTONS
    energy_min_events: int = 50


@dataclass(frozen=True)
class AnacalSettings:
    schedule: tuple = field(default_factory=lambda: tuple(default_schedule()))
    min_events: int = 50
    estimator: str = "gauss"


@dataclass(frozen=True)
class BoostSettings:
    depths: tuple = DEPTH_GRID
    learning_rates: tuple = LR_GRID
    n_max: int = 500
    early_stopping_rounds: int = 10
    min_samples_leaf: int = 20
    histogram_bins: int = 256
    reg_lambda: float = 0.0

    def grid(self) -> list:
        return [
            HyperParams(max_depth=d, learning_rate=lr, n_max=self.n_max,
                        early_stopping_rounds=self.early_stopping_rounds,
                        min_samples_leaf=self.min_samples_leaf, histogram_bins=self.histogram_bins,
                        reg_lambda=self.reg_lambda)
            for d in self.depths for lr in self.learning_rates
        ]


@dataclass(frozen=True)
class ExplainSettings:
    n_samples: int = 100_000
    scan_bins: int = 20
    scan_min_count: int = 50


@dataclass(frozen=True)
class PipelineConfig:
    sim: SimConfig = SimConfig()
    campaign: CampaignPlan = CampaignPlan()
    prep: PrepSettings = PrepSettings()
    anacal: AnacalSettings = AnacalSettings()
    boost: BoostSettings = BoostSettings()
    windows: tuple = field(default_factory=default_windows)
    explain: ExplainSettings = ExplainSettings()
    seed: int = 0
    threads: int = 1
    out_dir: str = "tofcal_out"

    def plan(self) -> CampaignPlan:
        """Campaign plan with the run seed applied."""
        return replace(self.campaign, rng_seed=self.seed)


# --------------------------------------------------------------------------
# value parsing


def _split_unit(text: str):
    m = re.fullmatch(r"(.*?)\s+([A-Za-z][A-Za-z/]*)", text.strip())
    if m and not re.fullmatch(r"(all|sipm|voxel|gauss|trimmed)", m.group(2)):
        return m.group(1).strip(), m.group(2)
    return text.strip(), None


def _number(tok: str, key: str) -> float:
    try:
        return float(tok)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {tok!r} as a number") from None


def _numbers(text: str, key: str) -> list:
    out = []
    for part in (p.strip() for p in text.split(",")):
        if not part:
            continue
        if ":" in part:
            a, b, step = (_number(t, key) for t in part.split(":"))
            if step <= 0:
                raise ConfigError(f"{key}: range step must be positive")
            out.extend(np.arange(a, b + step * 1e-9, step).round(9).tolist())
        else:
            out.append(_number(part, key))
    return out


def _scale(unit, dim, key) -> float:
    if dim is None:
        if unit is not None:
            raise ConfigError(f"{key} is dimensionless but has unit {unit!r}")
        return 1.0
    if unit is None:
        raise ConfigError(f"{key} needs a unit, one of {sorted(UNITS[dim])}")
    if unit not in UNITS[dim]:
        raise ConfigError(f"{key}: unit {unit!r} not allowed, use one of {sorted(UNITS[dim])}")
    return UNITS[dim][unit]


def _parse_schedule(text: str, key: str) -> tuple:
    out = []
    for item in (s.strip() for s in text.split(";")):
        if not item:
            continue
        parts = item.split()
        if parts == ["sipm"]:
            out.append(Voxelization("sipm"))
        elif len(parts) == 2 and parts[0] == "voxel" and "/" in parts[1]:
            slab, oto = parts[1].split("/")
            try:
                out.append(Voxelization("voxel", tuple(int(v) for v in slab.split("x")),
                                        tuple(int(v) for v in oto.split("x"))))
            except ValueError as exc:
                raise ConfigError(f"{key}: bad voxel grid {parts[1]!r}: {exc}") from None
        else:
            raise ConfigError(f"{key}: cannot parse schedule entry {item!r}")
    if not out:
        raise ConfigError(f"{key}: empty schedule")
    return tuple(out)


def _format_schedule(schedule) -> str:
    parts = []
    for v in schedule:
        if v.mode == "sipm":
            parts.append("sipm")
        else:
            parts.append("voxel " + "x".join(map(str, v.slab_shape)) + "/" + "x".join(map(str, v.oto_shape)))
    return "; ".join(parts)


def _parse_windows(text: str, key: str) -> tuple:
    out = []
    for item in (s.strip() for s in text.split(";")):
        if not item:
            continue
        if item == "all":
            out.append(ALL_WINDOW)
            continue
        m = re.fullmatch(r"([0-9.eE+]+)\s*-\s*([0-9.eE+]+)", item)
        if not m:
            raise ConfigError(f"{key}: cannot parse energy window {item!r}")
        out.append(window_from_bounds(_number(m.group(1), key), _number(m.group(2), key)))
    return tuple(out)


# key -> (section attribute, field, kind, dimension); kinds: float, int, list, ilist, str, schedule, windows, grid
_SKEW = [
    ("channel_skew_sigma", "channel_skew_sigma_ps", "float", "time"),
    ("timewalk_scale", "timewalk_scale_ps", "float", "time"),
    ("timewalk_ref_count", "timewalk_ref_count", "float", "photons"),
    ("timewalk_exponent", "timewalk_exponent", "float", None),
    ("photon_jitter", "photon_jitter_ps", "float", "time"),
    ("photon_jitter_ref_count", "photon_jitter_ref_count", "float", "photons"),
    ("rise_jitter", "scintillator_rise_jitter_ps", "float", "time"),
    ("optical_delay", "optical_delay_ps_per_mm", "float", "delay"),
    ("lateral_delay", "lateral_delay_ps_per_mm", "float", "delay"),
]
_RESPONSE = [
    ("photopeak_photons", "photopeak_photons", "float", "photons"),
    ("energy_resolution", "energy_resolution", "float", None),
    ("attenuation_length", "attenuation_length_mm", "float", "length"),
    ("photopeak_fraction", "photopeak_fraction", "float", None),
    ("compton_min", "compton_min_kev", "float", "energy"),
    ("multi_scatter_fraction", "multi_scatter_fraction", "float", None),
    ("trigger_threshold_mean", "trigger_threshold_mean", "float", "photons"),
    ("trigger_threshold_sigma", "trigger_threshold_sigma", "float", "photons"),
    ("main_pixel_fraction", "main_pixel_fraction", "float", None),
    ("spread_sigma_min", "spread_sigma_min_mm", "float", "length"),
    ("spread_sigma_per_mm", "spread_sigma_per_mm", "float", None),
    ("pair_share", "pair_share", "float", None),
]

KEYS = {}
for _k, _f, _t, _d in _SKEW:
    KEYS[f"skew.{_k}"] = (("sim", "skew"), _f, _t, _d)
for _side, _attr in (("slab", "slab_response"), ("oto", "oto_response")):
    for _k, _f, _t, _d in _RESPONSE:
        KEYS[f"{_side}.{_k}"] = (("sim", _attr), _f, _t, _d)
KEYS.update({
    "geometry.detector_spacing": (("sim", "*geometry"), "detector_spacing_mm", "float", "length"),
    "geometry.crystal_height": (("sim", "*geometry"), "crystal_height_mm", "float", "length"),
    "sim.c_air": (("sim",), "c_air", "float", "speed"),
    "sim.event_spacing": (("sim",), "event_spacing_ps", "float", "time"),
    "sim.cluster_window": (("sim",), "cluster_window_ps", "float", "time"),
    "sim.coincidence_window": (("sim",), "coincidence_window_ps", "float", "time"),
    "campaign.z_positions": (("campaign",), "z_positions_mm", "list", "length"),
    "campaign.xy_grid": (("campaign",), "xy_grid_mm", "grid", "length"),
    "campaign.events_per_point": (("campaign",), "events_per_point", "int", None),
    "campaign.performance_events": (("campaign",), "performance_events", "int", None),
    "campaign.split_fractions": (("campaign",), "split_fractions", "list", None),
    "prep.min_photons": (("prep",), "min_photons", "float", "photons"),
    "prep.max_photons": (("prep",), "max_photons", "float", "photons"),
    "prep.energy_min_events": (("prep",), "energy_min_events", "int", None),
    "anacal.schedule": (("anacal",), "schedule", "schedule", None),
    "anacal.min_events": (("anacal",), "min_events", "int", None),
    "anacal.estimator": (("anacal",), "estimator", "str", None),
    "boost.depths": (("boost",), "depths", "ilist", None),
    "boost.learning_rates": (("boost",), "learning_rates", "list", None),
    "boost.n_max": (("boost",), "n_max", "int", None),
    "boost.early_stopping_rounds": (("boost",), "early_stopping_rounds", "int", None),
    "boost.min_samples_leaf": (("boost",), "min_samples_leaf", "int", None),
    "boost.histogram_bins": (("boost",), "histogram_bins", "int", None),
    "boost.reg_lambda": (("boost",), "reg_lambda", "float", None),
    "eval.windows": ((), "windows", "windows", "energy"),
    "explain.n_samples": (("explain",), "n_samples", "int", None),
    "explain.scan_bins": (("explain",), "scan_bins", "int", None),
    "explain.scan_min_count": (("explain",), "scan_min_count", "int", None),
    "run.seed": ((), "seed", "int", None),
    "run.threads": ((), "threads", "int", None),
    "run.out": ((), "out_dir", "str", None),
})


def _convert(key: str, text: str):
    _, _, kind, dim = KEYS[key]
    if kind in ("str", "schedule"):
        if kind == "schedule":
            return _parse_schedule(text, key)
        return text.strip()
    if kind == "windows":
        body, unit = _split_unit(text)
        if unit is not None:
            s = _scale(unit, dim, key)
            ws = _parse_windows(body, key)
            return tuple(w if w.lo is None else window_from_bounds(w.lo * s, w.hi * s) for w in ws)
        if "-" in body:
            raise ConfigError(f"{key} needs a unit, one of {sorted(UNITS[dim])}")
        return _parse_windows(body, key)
    body, unit = _split_unit(text)
    s = _scale(unit, dim, key)
    if kind == "float":
        return _number(body, key) * s
    if kind == "int":
        v = _number(body, key)
        if v != int(v):
            raise ConfigError(f"{key} must be an integer")
        return int(v)
    vals = [v * s for v in _numbers(body, key)]
    if kind == "ilist":
        if any(v != int(v) for v in vals):
            raise ConfigError(f"{key} must hold integers")
        return tuple(int(v) for v in vals)
    if kind == "grid":
        return tuple((float(x), float(y)) for x in vals for y in vals)
    return tuple(float(v) for v in vals)


def _set(cfg: PipelineConfig, key: str, value) -> PipelineConfig:
    path, name, _, _ = KEYS[key]
    if not path:
        return replace(cfg, **{name: value})
    if path == ("sim", "*geometry"):
        sim = cfg.sim
        return replace(cfg, sim=replace(sim, slab_geometry=replace(sim.slab_geometry, **{name: value}),
                                        oto_geometry=replace(sim.oto_geometry, **{name: value})))
    objs = [cfg]
    for attr in path:
        objs.append(getattr(objs[-1], attr))
    new = replace(objs[-1], **{name: value})
    for parent, attr in zip(reversed(objs[:-1]), reversed(path)):
        new = replace(parent, **{attr: new})
    return new


def parse_pairs(pairs, base: Optional[PipelineConfig] = None) -> PipelineConfig:
    """Apply ``(key, value_text)`` pairs on top of ``base``."""
    cfg = base or PipelineConfig()
    for key, text in pairs:
        if key not in KEYS:
            raise ConfigError(f"unknown config key {key!r}")
        try:
            cfg = _set(cfg, key, _convert(key, text))
        except ConfigError:
            raise
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"{key}: {exc}") from None
    return cfg


def parse_text(text: str, base: Optional[PipelineConfig] = None) -> PipelineConfig:
    pairs = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        pairs.append((key, value))
    return parse_pairs(pairs, base)


def load(path, base: Optional[PipelineConfig] = None) -> PipelineConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from None
    return parse_text(text, base)


def _get(cfg: PipelineConfig, key: str):
    path, name, _, _ = KEYS[key]
    obj = cfg
    for attr in path:
        obj = getattr(obj, "slab_geometry" if attr == "*geometry" else attr)
    return getattr(obj, name)


def _unit_of(dim):
    return None if dim is None else next(iter(UNITS[dim]))


def dump(cfg: PipelineConfig) -> str:
    """Every key with its value in the canonical unit; parses back to ``cfg``."""
    lines = []
    for key in sorted(KEYS):
        _, _, kind, dim = KEYS[key]
        v = _get(cfg, key)
        unit = _unit_of(dim)
        if kind == "schedule":
            text = _format_schedule(v)
        elif kind == "windows":
            text = "; ".join("all" if w.lo is None else f"{w.lo!r}-{w.hi!r}" for w in v)
        elif kind == "grid":
            text = ", ".join(repr(float(x)) for x in sorted({p[0] for p in v}))
        elif kind in ("list", "ilist"):
            text = ", ".join(repr(x) for x in v)
        elif kind == "float":
            text = repr(float(v))
        else:
            text = str(v)
        lines.append(f"{key} = {text}" + (f" {unit}" if unit else ""))
    return "\n".join(lines) + "\n"


__all__ = [
    "ALL_WINDOW", "AnacalSettings", "BoostSettings", "EnergyWindow", "ExplainSettings", "KEYS",
    "PipelineConfig", "PrepSettings", "default_windows", "dump", "load", "parse_pairs", "parse_text",
    "window_from_bounds",
]
