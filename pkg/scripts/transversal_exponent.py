"""Median maximal deviation against n, the fitted exponent, and c* per n.

    python scripts/transversal_exponent.py --n 32 64 128 256 512 --trials 200
"""
import argparse
import json

from fpp_lab.cli import ExperimentConfig, default_workers, run


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--n", type=int, nargs="+", default=[32, 64, 128, 256, 512])
    p.add_argument("--trials", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=None)
    args = p.parse_args()
    cfg = ExperimentConfig.from_dict({"kind": "fluctuation", "n_grid": args.n, "trials": args.trials,
                                      "master_seed": args.seed, "ell_grid": [1.0], "r_grid": [0.5, 1, 2, 4]})
    report = run(cfg, args.workers or default_workers())
    print(json.dumps({"deviation": report.tables["deviation"], "c_star": report.tables["c_star"],
                      "fit": report.fits.get("max_dev vs n"), "verdicts": report.verdicts}, indent=2))


if __name__ == "__main__":
    main()
