"""|A_eps| against 1/eps at several n, with full-range and local slopes.

    python scripts/influence_scaling.py --n 32 64 128 --trials 20000
"""
import argparse
import json

from fpp_lab.cli import default_workers
from fpp_lab.fluctuations import fit_exponent
from fpp_lab.influence import DEFAULT_EPS_GRID, estimate_influence, influence_set, proposition_ratio, smooth_envelope
from fpp_lab.weights import Uniform


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--n", type=int, nargs="+", default=[32, 64, 128])
    p.add_argument("--trials", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=None)
    args = p.parse_args()
    workers = args.workers or default_workers()
    eps = sorted(DEFAULT_EPS_GRID, reverse=True)
    out = []
    for n in args.n:
        f = estimate_influence(Uniform(1.0, 2.0), (n, 0), args.trials, args.seed, workers=workers)
        sizes = [len(influence_set(f, e)) for e in eps]
        full = fit_exponent([(1 / e, s) for e, s in zip(eps, sizes)])
        # eps above the saturation scale (n/2)^(-2/3)
        coarse = [(1 / e, s) for e, s in zip(eps, sizes) if e >= (n / 2) ** (-2 / 3)]
        local = fit_exponent(coarse).slope if len(coarse) >= 3 else None
        q = smooth_envelope(influence_set(f, 0.05).edges, float(n))
        out.append({"n": n, "trials": f.trials, "sizes": dict(zip(eps, sizes)), "slope": full.slope,
                    "slope_above_saturation": local, "R": proposition_ratio(q, f, 2)})
        print(json.dumps(out[-1]), flush=True)


if __name__ == "__main__":
    main()
