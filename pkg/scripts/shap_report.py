"""SHAP group and feature importance of the best model of an in-memory experiment.

    python3 scripts/shap_report.py [--set key=value ...] [--samples 20000] [--top 15]
"""

import argparse
import time
import warnings

import numpy as np

from tofcal import config, explain, pipeline


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--config")
    ap.add_argument("--set", action="append", default=[])
    ap.add_argument("--samples", type=int, default=20_000)
    ap.add_argument("--top", type=int, default=15)
    args = ap.parse_args()
    warnings.simplefilter("ignore")
    cfg = config.load(args.config) if args.config else config.PipelineConfig()
    cfg = config.parse_pairs([tuple(s.split("=", 1)) for s in args.set], cfg)
    exp = pipeline.run_experiment(cfg)
    X = exp.features["performance"][: args.samples]
    t0 = time.perf_counter()
    expl = explain.shap_values(exp.best.model, X)
    gap = np.max(np.abs(expl.output - exp.best.model.predict(X)))
    print(f"best {pipeline.model_name(exp.best.params)}: {len(X)} samples in {time.perf_counter() - t0:.0f} s, "
          f"base {expl.base_value:.2f} ps, local accuracy gap {gap:.1e} ps")
    for g, v in sorted(explain.group_importance(expl).items(), key=lambda kv: -kv[1]):
        print(f"  {g:8s} {v:8.2f} ps")
    feats = sorted(explain.feature_importance(expl).items(), key=lambda kv: -kv[1])[: args.top]
    for f, v in feats:
        print(f"    {f:14s} {v:8.2f} ps")


if __name__ == "__main__":
    main()
