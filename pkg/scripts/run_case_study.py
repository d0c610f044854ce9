"""Run the sphere case study and print a stage summary.

    python3 scripts/run_case_study.py                   # default demo
    python3 scripts/run_case_study.py --b-amp 0.05 --kappa 0.01
    python3 scripts/run_case_study.py --horizon 1000 --out out/short
"""
import argparse
import json
import time

from qpmanifold.cli import dumps
from qpmanifold.sphere_case import CaseStudyBudget, SphereParams, run_case_study


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--b-amp", type=float, default=0.0)
    ap.add_argument("--kappa", type=float, default=0.0)
    ap.add_argument("--e-amp", type=float, default=0.05)
    ap.add_argument("--coulomb-sign", type=float, default=1.0)
    ap.add_argument("--horizon", type=float, default=5000.0)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default=None, help="directory for report.json and CSVs")
    args = ap.parse_args()

    params = SphereParams(B_amp=args.b_amp, kappa=args.kappa, E_amp=args.e_amp,
                          coulomb_sign=args.coulomb_sign)
    budget = CaseStudyBudget(horizon=args.horizon, seed=args.seed)
    t0 = time.perf_counter()
    rep = run_case_study(params, budget)
    wall = time.perf_counter() - t0

    print(f"verdict {rep.verdict}  failed_stage {rep.failed_stage}  wall {wall:.1f} s")
    for name, stage in rep.stages.items():
        holds = stage.get("holds") if isinstance(stage, dict) else None
        secs = rep.artifacts.get("timings", {}).get(name)
        print(f"  {name:18s} holds={holds!s:5s} {'' if secs is None else f'{secs:8.1f} s'}")
    dich = rep.artifacts.get("dichotomy")
    if dich is not None:
        print("  exponents", ", ".join(f"{e:+.5f}" for e in dich.exponents),
              f" alpha1 {dich.alpha1_estimate:.5g}")
    mon = rep.stages.get("bounded_solution", {}).get("monitors")
    if mon:
        print("  monitors", json.dumps({k: mon[k] for k in ("sup_speed", "sup_v_U",
                                                            "min_height")}))
    if args.out:
        import os
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "report.json"), "w") as fh:
            fh.write(dumps(rep.summary()) + "\n")
        if "trajectory" in rep.artifacts:
            rep.artifacts["trajectory"].to_csv(os.path.join(args.out, "trajectory.csv"))
        if "hull" in rep.artifacts:
            rep.artifacts["hull"].to_csv(os.path.join(args.out, "hull.csv"))


if __name__ == "__main__":
    main()
