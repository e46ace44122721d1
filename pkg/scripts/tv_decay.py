"""Binned TV distance between two conditioned laws and its bootstrap noise floor.

Prints one row per checkpoint.  Useful to see where the binned distance
reaches the sampling floor.
"""
import argparse

from kinetic_exit.dynamics import SimConfig
from kinetic_exit.qsd import conditional_tv_decay
from kinetic_exit.specfun import ModelParams


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--paths", type=int, default=1_000_000)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--bins", type=int, default=50)
    ap.add_argument("--checkpoints", default="1,2,3,4,5")
    args = ap.parse_args()

    ts = [float(x) for x in args.checkpoints.split(",")]
    cfg = SimConfig(dt=0.01, t_horizon=1.0, n_paths=args.paths, seed=args.seed)
    pts = conditional_tv_decay(ModelParams(), (0.2, 0.0), (0.8, 0.0), ts, cfg, bins=args.bins,
                               min_survivors=100)
    print(f"{'t':>5} {'tv':>10} {'floor':>10} {'tv/floor':>9} survivors")
    for p in pts:
        print(f"{p.t:5g} {p.tv:10.5f} {p.noise_floor:10.5f} {p.tv / p.noise_floor:9.2f} "
              f"{p.survivors}")


if __name__ == "__main__":
    main()
