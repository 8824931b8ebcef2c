import csv
import json

import numpy as np
import pytest

from tofcal import dataio
from tofcal.errors import FormatError


def _same(a, b):
    np.testing.assert_array_equal(a.source, b.source)
    np.testing.assert_array_equal(a.label, b.label)
    for sa, sb in ((a.slab, b.slab), (a.oto, b.oto)):
        np.testing.assert_array_equal(sa.sipm, sb.sipm)
        np.testing.assert_array_equal(sa.ts, sb.ts)
        np.testing.assert_array_equal(sa.counts, sb.counts)
        for f in ("photons", "energy", "pos"):
            va, vb = getattr(sa, f), getattr(sb, f)
            assert (va is None) == (vb is None)
            if va is not None:
                np.testing.assert_array_equal(va, vb)


def test_raw_round_trip_with_truth(small_sets, tmp_path):
    cs = small_sets["test"]
    p = tmp_path / f"test{dataio.DATASET_SUFFIX}"
    dataio.write_dataset(p, cs)
    dataio.write_truth(dataio.truth_path(p), cs.truth)
    back = dataio.read_dataset(p, with_truth=True)
    _same(cs, back)
    for f in ("skew", "timewalk", "pos", "energy", "photopeak"):
        for x, y in zip(getattr(cs.truth, f), getattr(back.truth, f)):
            np.testing.assert_array_equal(x, y)
    assert dataio.truth_path(p).name == "test.tofd.truth"


def test_derived_round_trip(small_prepared):
    _, sets = small_prepared
    cs = sets["performance"]
    data = dataio.dataset_bytes(cs)
    back = dataio.dataset_from_bytes(data)
    _same(cs, back)
    assert dataio.dataset_bytes(back) == data


def test_corrupt_inputs_rejected(small_sets, tmp_path):
    data = dataio.dataset_bytes(small_sets["test"])
    with pytest.raises(FormatError):
        dataio.dataset_from_bytes(b"NOTMAGIC" + data[8:])
    with pytest.raises(FormatError):
        dataio.dataset_from_bytes(data[: len(data) // 2])


def test_csv_export(small_sets, tmp_path):
    cs = small_sets["test"].take(np.arange(20))
    p = tmp_path / "x.csv"
    dataio.export_csv(cs, p)
    rows = list(csv.reader(p.open()))
    assert len(rows) == 21
    assert "np." not in p.read_text()


def test_json_helpers(tmp_path):
    p = tmp_path / "a.json"
    dataio.write_json(p, {"format": "x", "version": 1, "v": [1.5, None]})
    assert json.loads(p.read_text())["v"] == [1.5, None]
    assert dataio.read_json(p, "x", 1)["version"] == 1
    with pytest.raises(FormatError):
        dataio.read_json(p, "y", 1)
    assert len(dataio.sha256_file(p)) == 64


def test_prep_models_round_trip(small_prepared):
    models, sets = small_prepared
    back = dataio.prep_models_from_dict(json.loads(dataio.dumps_json(dataio.prep_models_to_dict(models))))
    from tofcal import prep

    a = prep.preprocess(sets["test"], models)
    b = prep.preprocess(sets["test"], back)
    _same(a, b)
