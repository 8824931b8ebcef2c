import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from tofcal.core import (
    FEATURE_SCHEMA, Cluster, Coincidence, DetectorGeometry, DetectorKind, Hit, build_features, compute_label,
    feature_matrix, process_timestamps, timestamp_cap,
)
from tofcal.errors import EmptyCluster, IncompleteCluster

C_MM_PER_PS = 0.299792458


def make_cluster(kind, times, energy=511.0, sipms=None):
    sipms = sipms or list(range(len(times)))
    hits = tuple(Hit(s, float(t), (10, 20, 30, 40)) for s, t in zip(sipms, times))
    pos = (0.0, 0.0, 5.0) if kind == DetectorKind.SLAB else (2.0, -2.0)
    return Cluster(kind, hits, energy, pos, 1000.0)


def test_label_examples():
    assert compute_label(0.0) == 0.0
    # -2 z / c with c = 299792458 m/s
    assert compute_label(-130.0) == pytest.approx(2 * 130 / C_MM_PER_PS, abs=1e-9)
    assert compute_label(-130.0) == pytest.approx(867.27, abs=5e-3)
    assert compute_label(100.0) == pytest.approx(-667.13, abs=5e-3)


@given(st.floats(-200, 200, allow_nan=False))
def test_label_is_odd(z):
    assert compute_label(-z) == -compute_label(z)


def test_label_custom_speed():
    assert compute_label(-10.0, c_air=2.0e8) == pytest.approx(100.0)


def test_process_timestamps_examples():
    c = make_cluster(DetectorKind.ONE_TO_ONE, [1000, 1003, 1010])
    assert process_timestamps(c) == [0, 3, 10]
    c = make_cluster(DetectorKind.ONE_TO_ONE, [500])
    out = process_timestamps(c)
    assert out[0] == 0 and all(math.isnan(v) for v in out[1:])


def test_slab_cap_and_missing():
    six = make_cluster(DetectorKind.SLAB, [0, 1, 2, 3, 4, 5])
    assert len(process_timestamps(six)) == 4
    two = process_timestamps(make_cluster(DetectorKind.SLAB, [0, 7]))
    assert two[:2] == [0, 7] and sum(math.isnan(v) for v in two) == 2


def test_empty_cluster_rejected():
    with pytest.raises(EmptyCluster):
        process_timestamps(Cluster(DetectorKind.SLAB, ()))


@given(st.lists(st.floats(0, 1e4), min_size=1, max_size=16), st.sampled_from(list(DetectorKind)))
def test_processed_timestamps_monotone(times, kind):
    times = sorted(times)
    out = process_timestamps(make_cluster(kind, times))
    vals = [v for v in out if not math.isnan(v)]
    assert vals[0] == 0.0
    assert all(v >= 0 for v in vals)
    assert all(b >= a for a, b in zip(vals, vals[1:]))
    cap = timestamp_cap(kind)
    assert len(out) == cap
    assert sum(math.isnan(v) for v in out) == max(cap - len(times), 0)


def test_dt_sign_convention():
    co = Coincidence(make_cluster(DetectorKind.SLAB, [1000]), make_cluster(DetectorKind.ONE_TO_ONE, [900]),
                     (0.0, 0.0, 0.0), 0.0)
    fv = build_features(co)
    assert co.delta_t_meas_ps == 100.0
    assert fv["dt_meas"] == 100.0


def test_feature_count():
    k_e_slab = 4 * 4 + 1  # four pixel counts per used SiPM plus energy
    k_e_oto = 3 * 4 + 1
    expected = 1 + (4 + 4 + 1 + 1 + k_e_slab + 3) + (3 + 3 + 1 + 1 + k_e_oto + 2)
    assert FEATURE_SCHEMA.n_features == expected == 54
    assert sum(len(v) for v in FEATURE_SCHEMA.groups.values()) == expected


@given(st.integers(1, 16), st.integers(1, 16))
def test_missing_slots_never_zero_filled(ns, no):
    co = Coincidence(make_cluster(DetectorKind.SLAB, list(range(ns))),
                     make_cluster(DetectorKind.ONE_TO_ONE, list(range(no))), (0.0, 0.0, 0.0), 0.0)
    fv = build_features(co)
    per_slot_s = 1 + 1 + 4  # timestamp, sipm id, four counts
    per_slot_o = 1 + 1 + 4
    assert fv.n_missing() == per_slot_s * max(4 - ns, 0) + per_slot_o * max(3 - no, 0)


def test_incomplete_cluster():
    bare = Cluster(DetectorKind.SLAB, (Hit(0, 0.0, (1, 1, 1, 1)),))
    co = Coincidence(bare, make_cluster(DetectorKind.ONE_TO_ONE, [0]), (0, 0, 0), 0.0)
    with pytest.raises(IncompleteCluster):
        build_features(co)


def test_geometry_invariants():
    g = DetectorGeometry(DetectorKind.SLAB)
    assert g.n_sipms == 16 and g.pixels_per_sipm == 4
    g.check_source_range(130.0)
    with pytest.raises(ValueError):
        g.check_source_range(250.0)
    with pytest.raises(ValueError):
        DetectorGeometry(DetectorKind.SLAB, n_sipms=8)


def test_vectorized_features_match_scalar(small_prepared):
    _, sets = small_prepared
    cs = sets["test"]
    X = feature_matrix(cs)
    for i in np.linspace(0, len(cs) - 1, 40).astype(int):
        ref = build_features(cs.coincidence(i)).values
        np.testing.assert_array_equal(np.isnan(X[i]), np.isnan(ref))
        np.testing.assert_allclose(X[i][~np.isnan(ref)], ref[~np.isnan(ref)], rtol=0, atol=1e-9)


def test_stored_labels_match_formula(small_sets):
    cs = small_sets["train"]
    np.testing.assert_allclose(cs.label, compute_label(cs.source[:, 2]), rtol=0, atol=1e-12)
