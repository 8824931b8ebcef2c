"""Versioned text dump of tree ensembles.

Layout (JSON, keys sorted)::

    {"format": "tofcal-model", "version": 1, "base_score": ..., "learning_rate": ...,
     "max_depth": ..., "n_features": ..., "feature_names": [...] | null,
     "schema_hash": "..." | null,
     "trees": [{"nodes": [[feature, threshold, default_left, left, right, value, cover], ...]}]}

Floats are written with Python's shortest round-trip repr, so a reload
reproduces every prediction bit for bit.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from ..errors import FormatError, SchemaError
from .engine import Tree, TreeEnsemble

FORMAT = "tofcal-model"
VERSION = 1


def ensemble_to_dict(ens: TreeEnsemble) -> dict:
    trees = []
    for t in ens.trees:
        nodes = [
            [int(t.feature[i]), float(t.threshold[i]), bool(t.default_left[i]), int(t.left[i]),
             int(t.right[i]), float(t.value[i]), float(t.cover[i])]
            for i in range(t.n_nodes)
        ]
        trees.append({"nodes": nodes})
    return {
        "format": FORMAT,
        "version": VERSION,
        "base_score": float(ens.base_score),
        "learning_rate": float(ens.learning_rate),
        "max_depth": int(ens.max_depth),
        "n_features": int(ens.n_features),
        "feature_names": list(ens.feature_names) if ens.feature_names is not None else None,
        "schema_hash": ens.schema_hash,
        "trees": trees,
    }


def ensemble_from_dict(d: dict, expect_schema_hash=None) -> TreeEnsemble:
    if d.get("format") != FORMAT:
        raise FormatError("not a tofcal model dump")
    if d.get("version") != VERSION:
        raise FormatError(f"unsupported model version {d.get('version')}")
    if expect_schema_hash is not None and d.get("schema_hash") != expect_schema_hash:
        raise SchemaError(
            f"model schema hash {d.get('schema_hash')} does not match expected {expect_schema_hash}"
        )
    trees = []
    for td in d["trees"]:
        nodes = td["nodes"]
        cols = list(zip(*nodes)) if nodes else [[]] * 7
        trees.append(Tree(
            np.asarray(cols[0], np.int32), np.asarray(cols[1], np.float64),
            np.asarray(cols[2], bool), np.asarray(cols[3], np.int32), np.asarray(cols[4], np.int32),
            np.asarray(cols[5], np.float64), np.asarray(cols[6], np.float64),
        ))
    names = d.get("feature_names")
    return TreeEnsemble(float(d["base_score"]), trees, float(d["learning_rate"]), int(d["max_depth"]),
                        int(d["n_features"]), tuple(names) if names is not None else None,
                        d.get("schema_hash"))


def dumps(ens: TreeEnsemble) -> str:
    return json.dumps(ensemble_to_dict(ens), sort_keys=True, separators=(",", ":"))


def loads(text: str, expect_schema_hash=None) -> TreeEnsemble:
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(f"model file is not valid JSON: {exc}") from exc
    return ensemble_from_dict(d, expect_schema_hash)


def save(ens: TreeEnsemble, path) -> None:
    Path(path).write_text(dumps(ens) + "\n")


def load(path, expect_schema_hash=None) -> TreeEnsemble:
    return loads(Path(path).read_text(), expect_schema_hash)
