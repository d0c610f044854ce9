"""Running Lyapunov estimates along the demo bounded solution.

The finite-time QR estimates approach their limits like 1/T; this prints them at
a few averaging spans together with the final dichotomy verdict.

    python3 scripts/horizon_study.py --horizon 1000
"""
import argparse

import numpy as np

from qpmanifold import dichotomy, finder, hypotheses as hy
from qpmanifold.sphere_case import SphereParams, make_spec


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--horizon", type=float, default=1000.0)
    ap.add_argument("--b-amp", type=float, default=0.0)
    ap.add_argument("--kappa", type=float, default=0.0)
    args = ap.parse_args()

    spec = make_spec(SphereParams(B_amp=args.b_amp, kappa=args.kappa))
    opts = hy.GridOptions(torus_points=12, domain_samples=800, refine_iters=100)
    consts, _ = hy.compute_constants(spec, opts)
    traj = finder.bounded_solution(spec, (0.0, args.horizon), z_plus=consts.z_plus,
                                   z_star=consts.z_star)
    cert = dichotomy.certify(spec, traj, opts=opts)
    spans = cert.running_times - traj.t[0]
    for span in (10, 50, 100, 250, 500, 1000, 2000, 5000):
        i = int(np.searchsorted(spans, span))
        if i >= spans.size:
            break
        est = np.sort(cert.running[i])[::-1]
        print(f"T = {spans[i]:7.1f}  " + "  ".join(f"{e:+.5f}" for e in est))
    print("final", " ".join(f"{e:+.5f}" for e in cert.exponents),
          f" alpha1 {cert.alpha1_estimate:.5g}  verdict {cert.verdict}")


if __name__ == "__main__":
    main()
