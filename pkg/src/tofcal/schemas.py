"""Schemas of the stage summary files and a validator for the small subset of
JSON-schema keywords they use (type, required, properties, items, enum)."""

from __future__ import annotations

from .errors import FormatError

_TYPES = {
    "object": dict, "array": list, "string": str, "boolean": bool, "null": type(None),
    "integer": int, "number": (int, float),
}

NUM = {"type": ["number", "null"]}
INT = {"type": "integer"}
STR = {"type": "string"}


def _obj(props: dict, required=None) -> dict:
    return {"type": "object", "properties": props, "required": list(required if required is not None else props)}


def _arr(item: dict) -> dict:
    return {"type": "array", "items": item}


def _summary(stage: str, props: dict) -> dict:
    return _obj({"format": {"type": "string", "enum": [f"tofcal-{stage}-summary"]}, "version": INT, **props})


SCHEMAS = {
    "simulate": _summary("simulate", {
        "seed": INT,
        "datasets": _arr(_obj({"dataset": STR, "path": STR, "sha256": STR, "truth_sha256": STR, "n": INT})),
    }),
    "preprocess": _summary("preprocess", {
        "datasets": _arr(_obj({"dataset": STR, "n_in": INT, "n_out": INT, "sha256": STR})),
        "energy_fallback_voxels": {"type": "object"},
        "prep_models_sha256": STR,
    }),
    "calibrate": _summary("calibrate", {
        "history": _arr(_obj({"iteration": INT, "mode": STR, "ctr_ps": NUM, "ctr_err_ps": NUM,
                              "max_abs_ps": NUM, "n_bins": INT})),
        "datasets": _arr(_obj({"dataset": STR, "n": INT, "sha256": STR})),
        "calibration_sha256": STR,
    }),
    "train": _summary("train", {
        "grid": _arr(_obj({"model": STR, "max_depth": INT, "learning_rate": {"type": "number"},
                           "n_trees": INT, "stopped_early": {"type": "boolean"}, "val_mse_ps2": NUM,
                           "test_mae_ps": NUM, "sha256": STR})),
        "best": STR, "n_train": INT, "n_validation": INT,
    }),
    "evaluate": _summary("evaluate", {
        "best": STR,
        "ctr": _arr(_obj({"window": STR, "model": STR, "n": INT, "CTR_ps": NUM, "CTR_err_ps": NUM})),
        "mae": _arr(_obj({"window": STR, "model": STR, "n": INT, "MAE_ps": NUM})),
        "linearity": _arr(_obj({"model": STR, "epsilon": NUM, "sigma_epsilon": NUM, "sem_epsilon": NUM,
                                "n_points": INT, "runs_p": NUM,
                                "within_3sigma": {"type": "boolean"}})),
    }),
    "explain": _summary("explain", {
        "model_sha256": STR, "window": STR, "n_samples": INT, "base_value_ps": NUM,
        "max_local_accuracy_gap_ps": NUM,
        "group_importance": _arr(_obj({"group": STR, "mean_abs_sv_ps": NUM})),
        "feature_importance": _arr(_obj({"feature": STR, "mean_abs_sv_ps": NUM})),
        "count_separation_rho": _obj({"one_to_one": NUM, "slab": NUM}),
    }),
}


def _is(value, name: str) -> bool:
    if name in ("integer", "number") and isinstance(value, bool):
        return False
    return isinstance(value, _TYPES[name])


def validate(doc, schema: dict, where: str = "$") -> None:
    """Raise :class:`FormatError` naming the first offending location."""
    t = schema.get("type")
    if t is not None:
        names = t if isinstance(t, list) else [t]
        if not any(_is(doc, n) for n in names):
            raise FormatError(f"{where}: expected {t}, got {type(doc).__name__}")
    if "enum" in schema and doc not in schema["enum"]:
        raise FormatError(f"{where}: {doc!r} not in {schema['enum']}")
    if isinstance(doc, dict):
        for key in schema.get("required", ()):
            if key not in doc:
                raise FormatError(f"{where}: missing key {key!r}")
        for key, sub in schema.get("properties", {}).items():
            if key in doc:
                validate(doc[key], sub, f"{where}.{key}")
    if isinstance(doc, list) and "items" in schema:
        for i, item in enumerate(doc):
            validate(item, schema["items"], f"{where}[{i}]")
