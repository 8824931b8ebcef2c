"""On-disk formats.

Dataset file (``.tofd``), all little-endian::

    magic  b"TOFCALDS"  | u32 version | u32 flags | u64 n_records
    n x record:
        f64[3] source xyz (mm) | f64 label (ps)
        u8 n_slab_hits | n_slab_hits x hit
        u8 n_oto_hits  | n_oto_hits  x hit
    hit = u8 sipm | f64 timestamp (ps) | u16[4] pixel counts
    if flags & DERIVED, column blocks follow the records:
        slab photons f64[n], energy f64[n], pos f64[n,3]
        oto  photons f64[n], energy f64[n], pos f64[n,2]

Truth sidecar (``.tofd.truth``): magic b"TOFCALTR", u32 version, u64 n, then
column blocks per side (slab first) of skew f64[n,16], timewalk f64[n,16],
pos f64[n,3], energy f64[n], photopeak u8[n].

Model, calibration and preprocessing artifacts are JSON with sorted keys and
a ``format``/``version`` pair.
"""

from __future__ import annotations

import hashlib
import io
import json
from pathlib import Path

import numba
import numpy as np

from .core import MAX_HITS, PIXELS_PER_SIPM, ClusterArrays, CoincidenceSet, DetectorKind, TruthArrays, position_dim
from .errors import FormatError

DATASET_MAGIC = b"TOFCALDS"
TRUTH_MAGIC = b"TOFCALTR"
DATASET_VERSION = 1
DATASET_SUFFIX = ".tofd"
TRUTH_SUFFIX = ".truth"
FLAG_DERIVED = 1

_HEADER = np.dtype([("magic", "S8"), ("version", "<u4"), ("flags", "<u4"), ("n", "<u8")])
_HIT = np.dtype([("sipm", "u1"), ("ts", "<f8"), ("counts", "<u2", (PIXELS_PER_SIPM,))])
_REC = np.dtype([("source", "<f8", (3,)), ("label", "<f8")])
_HIT_SIZE = _HIT.itemsize  # 17
_REC_SIZE = _REC.itemsize  # 32


def truth_path(dataset_path) -> Path:
    p = Path(dataset_path)
    return p.with_name(p.name + TRUTH_SUFFIX)


def _hits_bytes(side: ClusterArrays):
    rows, slots = np.nonzero(side.sipm >= 0)
    hits = np.empty(len(rows), _HIT)
    hits["sipm"] = side.sipm[rows, slots]
    hits["ts"] = side.ts[rows, slots]
    hits["counts"] = side.counts[rows, slots]
    return hits.view(np.uint8).reshape(-1, _HIT_SIZE), slots


def encode_records(cs: CoincidenceSet) -> np.ndarray:
    """The record section of a dataset file as a flat byte array."""
    n = len(cs)
    ns = cs.slab.n_hits.astype(np.int64)
    no = cs.oto.n_hits.astype(np.int64)
    size = _REC_SIZE + 1 + _HIT_SIZE * ns + 1 + _HIT_SIZE * no
    start = np.zeros(n, np.int64)
    if n:
        start[1:] = np.cumsum(size)[:-1]
    buf = np.zeros(int(size.sum()), np.uint8)
    rec = np.empty(n, _REC)
    rec["source"] = cs.source
    rec["label"] = cs.label
    buf[start[:, None] + np.arange(_REC_SIZE)] = rec.view(np.uint8).reshape(n, _REC_SIZE)
    s_cnt = start + _REC_SIZE
    buf[s_cnt] = ns
    o_cnt = s_cnt + 1 + _HIT_SIZE * ns
    buf[o_cnt] = no
    for side, base in ((cs.slab, s_cnt + 1), (cs.oto, o_cnt + 1)):
        hb, slots = _hits_bytes(side)
        rows = np.repeat(np.arange(n), side.n_hits.astype(np.int64))
        off = base[rows] + _HIT_SIZE * slots
        buf[off[:, None] + np.arange(_HIT_SIZE)] = hb
    return buf


@numba.njit(cache=True)
def _scan(buf, n, pos0, rec_size, hit_size):
    """Offsets of every record plus its per-side hit counts."""
    starts = np.empty(n, np.int64)
    ns = np.empty(n, np.int64)
    no = np.empty(n, np.int64)
    p = pos0
    for i in range(n):
        starts[i] = p
        p += rec_size
        if p >= buf.shape[0]:
            return starts, ns, no, -1
        ns[i] = buf[p]
        p += 1 + hit_size * ns[i]
        if p >= buf.shape[0]:
            return starts, ns, no, -1
        no[i] = buf[p]
        p += 1 + hit_size * no[i]
        if p > buf.shape[0]:
            return starts, ns, no, -1
    return starts, ns, no, p


def _decode_side(buf, base, counts, kind) -> ClusterArrays:
    n = len(counts)
    if np.any(counts > MAX_HITS):
        raise FormatError("hit count exceeds the 16 SiPMs of a detector")
    side = ClusterArrays.empty(kind, n)
    side.n_hits[:] = counts
    rows = np.repeat(np.arange(n), counts)
    if len(rows):
        first = np.zeros(n, np.int64)
        first[1:] = np.cumsum(counts)[:-1]
        slots = np.arange(len(rows)) - first[rows]
        off = base[rows] + _HIT_SIZE * slots
        raw = np.ascontiguousarray(buf[off[:, None] + np.arange(_HIT_SIZE)])
        hits = raw.view(_HIT).reshape(-1)
        side.sipm[rows, slots] = hits["sipm"]
        side.ts[rows, slots] = hits["ts"]
        side.counts[rows, slots] = hits["counts"]
    return side


def decode_records(buf: np.ndarray, n: int, pos0: int = 0):
    """Inverse of :func:`encode_records`; returns the set and the end offset."""
    starts, ns, no, end = _scan(buf, n, pos0, _REC_SIZE, _HIT_SIZE)
    if end < 0:
        raise FormatError("dataset file is truncated")
    rec = np.ascontiguousarray(buf[starts[:, None] + np.arange(_REC_SIZE)]).view(_REC).reshape(-1)
    s_cnt = starts + _REC_SIZE
    o_cnt = s_cnt + 1 + _HIT_SIZE * ns
    slab = _decode_side(buf, s_cnt + 1, ns, DetectorKind.SLAB)
    oto = _decode_side(buf, o_cnt + 1, no, DetectorKind.ONE_TO_ONE)
    cs = CoincidenceSet(rec["source"].astype(np.float64), rec["label"].astype(np.float64), slab, oto)
    return cs, end


def _has_derived(cs: CoincidenceSet) -> bool:
    return all(getattr(s, a) is not None for s in (cs.slab, cs.oto) for a in ("photons", "energy", "pos"))


def dataset_bytes(cs: CoincidenceSet) -> bytes:
    derived = _has_derived(cs)
    head = np.array([(DATASET_MAGIC, DATASET_VERSION, FLAG_DERIVED if derived else 0, len(cs))], _HEADER)
    out = io.BytesIO()
    out.write(head.tobytes())
    out.write(encode_records(cs).tobytes())
    if derived:
        for side in (cs.slab, cs.oto):
            for a in (side.photons, side.energy, side.pos):
                out.write(np.ascontiguousarray(a, dtype="<f8").tobytes())
    return out.getvalue()


def dataset_from_bytes(data: bytes) -> CoincidenceSet:
    buf = np.frombuffer(data, np.uint8)
    if len(buf) < _HEADER.itemsize:
        raise FormatError("dataset file is truncated")
    head = buf[: _HEADER.itemsize].view(_HEADER)[0]
    if head["magic"] != DATASET_MAGIC:
        raise FormatError("not a tofcal dataset (bad magic)")
    if int(head["version"]) != DATASET_VERSION:
        raise FormatError(f"unsupported dataset version {int(head['version'])}")
    n = int(head["n"])
    cs, end = decode_records(buf, n, _HEADER.itemsize)
    if int(head["flags"]) & FLAG_DERIVED:
        for side in (cs.slab, cs.oto):
            cols = []
            for width in (1, 1, position_dim(side.kind)):
                nbytes = 8 * n * width
                if end + nbytes > len(buf):
                    raise FormatError("dataset file is truncated")
                a = buf[end:end + nbytes].view("<f8").astype(np.float64)
                cols.append(a.reshape(n, width) if width > 1 else a)
                end += nbytes
            side.photons, side.energy, side.pos = cols
    if end != len(buf):
        raise FormatError("trailing bytes after dataset content")
    return cs


def write_dataset(path, cs: CoincidenceSet) -> None:
    path = Path(path)
    try:
        path.write_bytes(dataset_bytes(cs))
    except OSError as exc:
        raise OSError(f"cannot write dataset {path}: {exc}") from exc


def read_dataset(path, with_truth: bool = False) -> CoincidenceSet:
    path = Path(path)
    cs = dataset_from_bytes(path.read_bytes())
    if with_truth:
        cs.truth = read_truth(truth_path(path), len(cs))
    return cs


_TRUTH_HEAD = np.dtype([("magic", "S8"), ("version", "<u4"), ("n", "<u8")])


def write_truth(path, truth: TruthArrays) -> None:
    n = len(truth.energy[0])
    out = io.BytesIO()
    out.write(np.array([(TRUTH_MAGIC, DATASET_VERSION, n)], _TRUTH_HEAD).tobytes())
    for k in range(2):
        for a in (truth.skew[k], truth.timewalk[k], truth.pos[k], truth.energy[k]):
            out.write(np.ascontiguousarray(a, dtype="<f8").tobytes())
        out.write(np.asarray(truth.photopeak[k], np.uint8).tobytes())
    Path(path).write_bytes(out.getvalue())


def read_truth(path, n_expected=None) -> TruthArrays:
    buf = np.frombuffer(Path(path).read_bytes(), np.uint8)
    head = buf[: _TRUTH_HEAD.itemsize].view(_TRUTH_HEAD)[0]
    if head["magic"] != TRUTH_MAGIC:
        raise FormatError("not a tofcal truth file (bad magic)")
    n = int(head["n"])
    if n_expected is not None and n != n_expected:
        raise FormatError(f"truth file holds {n} records, dataset {n_expected}")
    p = _TRUTH_HEAD.itemsize
    parts = {f: [] for f in ("skew", "timewalk", "pos", "energy", "photopeak")}
    for _ in range(2):
        for f, width in (("skew", MAX_HITS), ("timewalk", MAX_HITS), ("pos", 3), ("energy", 1)):
            nbytes = 8 * n * width
            a = buf[p:p + nbytes].view("<f8").astype(np.float64)
            parts[f].append(a.reshape(n, width) if width > 1 else a)
            p += nbytes
        parts["photopeak"].append(buf[p:p + n].astype(bool))
        p += n
    if p != len(buf):
        raise FormatError("truth file size does not match its header")
    return TruthArrays(*(tuple(parts[f]) for f in ("skew", "timewalk", "pos", "energy", "photopeak")))


def export_csv(cs: CoincidenceSet, path) -> None:
    """Human-readable dump, one coincidence per line.

    Hits are written ``sipm:timestamp:c0/c1/c2/c3`` and joined by ``;``.
    """
    def hits(side, i):
        return ";".join(
            f"{side.sipm[i, j]}:{float(side.ts[i, j])!r}:" + "/".join(str(int(c)) for c in side.counts[i, j])
            for j in range(side.n_hits[i])
        )

    with open(path, "w") as fh:
        fh.write("x_mm,y_mm,z_mm,label_ps,dt_meas_ps,slab_hits,oto_hits\n")
        dt = cs.dt_meas
        for i in range(len(cs)):
            x, y, z = (float(v) for v in cs.source[i])
            fh.write(f"{x!r},{y!r},{z!r},{float(cs.label[i])!r},{float(dt[i])!r},"
                     f"{hits(cs.slab, i)},{hits(cs.oto, i)}\n")


# --------------------------------------------------------------------------
# JSON artifacts


def dumps_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=1) + "\n"


def write_json(path, obj) -> None:
    Path(path).write_text(dumps_json(obj))


def read_json(path, fmt=None, version=None) -> dict:
    try:
        d = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path} is not valid JSON: {exc}") from exc
    if fmt is not None and d.get("format") != fmt:
        raise FormatError(f"{path}: expected format {fmt!r}, found {d.get('format')!r}")
    if version is not None and d.get("version") != version:
        raise FormatError(f"{path}: unsupported version {d.get('version')}")
    return d


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


PREP_FORMAT = "tofcal-prep"


def prep_models_to_dict(models) -> dict:
    from .boost.io import ensemble_to_dict

    return {
        "format": PREP_FORMAT,
        "version": 1,
        "positioner": [ensemble_to_dict(m) for m in models.positioner.models],
        "energy": {k.name: models.energy_cal[k].to_dict() for k in DetectorKind},
    }


def prep_models_from_dict(d: dict):
    from .boost.io import ensemble_from_dict
    from .prep import EnergyCalibration, PrepModels, SlabPositioner

    if d.get("format") != PREP_FORMAT or d.get("version") != 1:
        raise FormatError("not a tofcal preprocessing model file")
    pos = SlabPositioner(tuple(ensemble_from_dict(m) for m in d["positioner"]))
    cals = {DetectorKind[k]: EnergyCalibration.from_dict(v) for k, v in d["energy"].items()}
    return PrepModels(pos, cals)


def calibration_to_dict(solutions) -> dict:
    from .anacal import TABLE_FORMAT, TABLE_VERSION

    return {"format": TABLE_FORMAT, "version": TABLE_VERSION,
            "solutions": [s.to_dict() for s in solutions]}


def calibration_from_dict(d: dict) -> list:
    from .anacal import TABLE_FORMAT, TABLE_VERSION, CalibrationSolution

    if d.get("format") != TABLE_FORMAT or d.get("version") != TABLE_VERSION:
        raise FormatError("not a tofcal calibration table")
    return [CalibrationSolution.from_dict(s) for s in d["solutions"]]
