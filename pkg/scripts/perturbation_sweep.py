"""Feasibility and sigma margins over a grid of magnetic amplitude and damping.

    python3 scripts/perturbation_sweep.py --b-amp 0 0.05 0.1 0.2 --kappa 0 0.01 0.05
"""
import argparse

from qpmanifold import hypotheses as hy
from qpmanifold.sphere_case import SphereParams, feasibility, make_spec


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--b-amp", type=float, nargs="+", default=[0.0, 0.05, 0.1, 0.2])
    ap.add_argument("--kappa", type=float, nargs="+", default=[0.0, 0.01, 0.05])
    ap.add_argument("--e-amp", type=float, default=0.05)
    ap.add_argument("--grid", type=int, default=12, help="torus points per frequency")
    args = ap.parse_args()
    opts = hy.GridOptions(torus_points=args.grid, domain_samples=800, refine_iters=100)

    print(f"{'B_amp':>6} {'kappa':>6} {'display1':>10} {'display2':>10} {'combined':>10} "
          f"{'sigma':>10} {'z_star':>10} all")
    for b in args.b_amp:
        for k in args.kappa:
            params = SphereParams(B_amp=b, kappa=k, E_amp=args.e_amp)
            feas = {v.name: v.margin for v in feasibility(params)}
            chk = hy.check_all(make_spec(params), opts=opts)
            marg = {v.name: v.margin for v in chk.verdicts}
            sigma = marg.get("perturbed.sigma", marg["H3.monotone"])
            print(f"{b:6.3f} {k:6.3f} {feas['perturbed.display1']:10.4f} "
                  f"{feas['perturbed.display2']:10.4f} {feas['perturbed.combined']:10.4f} "
                  f"{sigma:10.4f} {chk.constants.z_star:10.4f} {chk.all_hold}")


if __name__ == "__main__":
    main()
