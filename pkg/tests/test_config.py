import pytest
from hypothesis import given
from hypothesis import strategies as st

from tofcal.anacal import Voxelization
from tofcal.config import KEYS, PipelineConfig, dump, load, parse_pairs, parse_text, window_from_bounds
from tofcal.errors import ConfigError


def test_defaults():
    cfg = PipelineConfig()
    assert len(cfg.boost.grid()) == 12
    assert [w.name for w in cfg.windows] == ["all", "300-700", "450-550"]
    assert cfg.plan().rng_seed == cfg.seed


def test_units_convert():
    cfg = parse_text("""
        skew.timewalk_scale = 0.05 ns   # comment
        campaign.z_positions = -2:2:1 cm
        sim.c_air = 0.299792458 mm/ps
        eval.windows = all; 0.3-0.7 MeV
    """)
    assert cfg.sim.skew.timewalk_scale_ps == pytest.approx(50.0)
    assert cfg.campaign.z_positions_mm == (-20.0, -10.0, 0.0, 10.0, 20.0)
    assert cfg.sim.c_air == pytest.approx(299_792_458.0)
    assert cfg.windows[1].lo == pytest.approx(300.0) and cfg.windows[1].hi == pytest.approx(700.0)


def test_schedule_syntax():
    cfg = parse_pairs([("anacal.schedule", "sipm; voxel 8x8x2/4x4")])
    assert cfg.anacal.schedule == (Voxelization("sipm"), Voxelization("voxel", (8, 8, 2), (4, 4)))


@pytest.mark.parametrize("pairs, match", [
    ([("skew.bogus", "1 ps")], "unknown config key 'skew.bogus'"),
    ([("skew.timewalk_scale", "50")], "unit"),
    ([("campaign.events_per_point", "10 ps")], None),
    ([("campaign.events_per_point", "1.5")], "integer"),
    ([("skew.timewalk_scale", "fast ps")], None),
    ([("slab.photopeak_photons", "0 photons")], None),
])
def test_rejections(pairs, match):
    with pytest.raises(ConfigError, match=match):
        parse_pairs(pairs)


def test_bad_lines_and_files(tmp_path):
    with pytest.raises(ConfigError, match="line 1"):
        parse_text("nonsense")
    with pytest.raises(ConfigError):
        load(tmp_path / "missing.cfg")
    with pytest.raises(ConfigError):
        window_from_bounds(5, 5)


def test_dump_round_trip(tmp_path):
    cfg = parse_text("""
        run.seed = 42
        boost.depths = 4, 6
        boost.learning_rates = 0.3
        campaign.xy_grid = -6:6:6 mm
        anacal.schedule = sipm; voxel 2x2x1/2x2
        eval.windows = all; 450-550 keV
    """)
    p = tmp_path / "c.cfg"
    p.write_text(dump(cfg))
    assert load(p) == cfg
    assert dump(PipelineConfig()).count("\n") == len(KEYS)


@given(st.integers(0, 2**31 - 1), st.floats(0, 500, allow_nan=False), st.integers(1, 8))
def test_round_trip_property(seed, tw, n_max):
    cfg = parse_pairs([("run.seed", str(seed)), ("skew.timewalk_scale", f"{tw!r} ps"), ("boost.n_max", str(n_max))])
    assert parse_text(dump(cfg)) == cfg
