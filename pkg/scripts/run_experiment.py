"""Run the full in-memory experiment and print CTR, MAE and linearity tables.

    python3 scripts/run_experiment.py [--config FILE] [--set key=value ...]
"""

import argparse
import logging
import pickle
import time

import numpy as np

from tofcal import config, fitstat, pipeline


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--config")
    ap.add_argument("--set", action="append", default=[])
    ap.add_argument("--pickle", help="store the experiment object here")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s: %(message)s")
    cfg = config.load(args.config) if args.config else config.PipelineConfig()
    cfg = config.parse_pairs([tuple(s.split("=", 1)) for s in args.set], cfg)
    t0 = time.time()
    exp = pipeline.run_experiment(cfg)
    print(f"experiment took {time.time() - t0:.0f} s; best model {pipeline.model_name(exp.best.params)}")
    print({k: len(v) for k, v in exp.calibrated.items()})
    for h in exp.schedule.history:
        print("calibration", h)
    for r in exp.ctr_table():
        print(f"CTR {r['window']:>8} {r['model']:>12} {r['CTR_ps']:7.1f} +- {r['CTR_err_ps']:.1f}  (n={r['n']})")
    test = exp.calibrated["test"]
    for e in exp.entries:
        name = pipeline.model_name(e.params)
        pred = e.model.predict(exp.features["test"])
        fit = pipeline.linearity(test, pred, cfg.sim.c_air)
        print(f"{name:>12} trees={e.model.n_trees:3d} val_mse={e.val_loss:8.1f} "
              f"mae={fitstat.mae(test.label, pred):6.2f} eps={fit.epsilon:.4f}+-{fit.sigma_epsilon:.4f} (sem {fit.sem_epsilon:.4f}) "
              f"runs_p={fit.runs_p:.3f}")
    if args.pickle:
        with open(args.pickle, "wb") as fh:
            pickle.dump(exp, fh)


if __name__ == "__main__":
    main()
