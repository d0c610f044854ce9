"""Command-line front end: configuration, stage orchestration and report files."""
import argparse
import dataclasses
import json
from dataclasses import dataclass, field
import math
import os
import platform
import sys
import time

import numpy as np
import scipy
from threadpoolctl import threadpool_limits

from . import __version__
from .errors import ConfigurationError, ToolkitError

SUBCOMMANDS = ("check", "constants", "solve", "dichotomy", "case-study")
BUILTINS = ("sphere",)


@dataclass
class SphereSection:
    a: float = 1.0
    rho: float = 0.6
    kappa: float = 0.0
    omega: tuple = (1.0, math.sqrt(2.0))
    E_amp: float = 0.05
    E_k: float = 0.0
    B_amp: float = 0.0
    coulomb_sign: float = 1.0


@dataclass
class GridSection:
    torus_points: int = 24
    domain_samples: int = 2000
    boundary_samples: int = 256
    refine_iters: int = 400


@dataclass
class RunSection:
    seed: int = 0
    horizon: float = 5000.0
    burn: float = 50.0
    hull_grid: int = 64
    search_horizon: float = 60.0
    search_seeds: int = 200
    window_tol: float = 1e-6
    gap_tol: float = 0.01
    renorm_dt: float = 1.0
    dt_out: float = 0.05
    second_seed: int = 1
    threads: int = 0  # 0 = available parallelism


@dataclass
class TolSection:
    on_manifold_tol: float = 1e-9
    tangency_tol: float = 1e-9
    grid_refine_tol: float = 1e-8
    root_tol: float = 1e-13
    integrator_rel_tol: float = 1e-10
    integrator_abs_tol: float = 1e-12
    boundary_tol: float = 1e-10
    transport_tol: float = 1e-9


@dataclass
class RunConfig:
    subcommand: str = "case-study"
    spec_source: str = "sphere"
    out: str = "out"
    sphere: SphereSection = field(default_factory=SphereSection)
    grid: GridSection = field(default_factory=GridSection)
    run: RunSection = field(default_factory=RunSection)
    tol: TolSection = field(default_factory=TolSection)

    SECTIONS = ("sphere", "grid", "run", "tol")

    def flat(self):
        """Every knob as dotted key -> value, in a fixed order."""
        out = {"spec.source": self.spec_source}
        for sec in self.SECTIONS:
            for f in dataclasses.fields(getattr(self, sec)):
                out[f"{sec}.{f.name}"] = getattr(getattr(self, sec), f.name)
        return out

    @property
    def threads(self):
        return self.run.threads or os.cpu_count() or 1


def _field_types():
    cfg = RunConfig()
    types = {"spec.source": str}
    for sec in RunConfig.SECTIONS:
        for f in dataclasses.fields(getattr(cfg, sec)):
            types[f"{sec}.{f.name}"] = type(getattr(getattr(cfg, sec), f.name))
    return types


def _convert(key, raw, typ, where):
    raw = raw.strip()
    try:
        if typ is tuple:
            return tuple(float(v) for v in raw.strip("()").split(",") if v.strip())
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigurationError(f"{where}: malformed value {raw!r} for {key}") from None


def apply_setting(cfg, key, raw, where="<flag>"):
    types = _field_types()
    if key not in types:
        raise ConfigurationError(f"{where}: unknown key {key!r}")
    val = _convert(key, raw, types[key], where)
    if key == "spec.source":
        cfg.spec_source = val
    else:
        sec, name = key.split(".", 1)
        setattr(getattr(cfg, sec), name, val)


def parse_config_text(text, cfg=None, source="<config>"):
    """Flat `section.key = value` lines; `#` starts a comment."""
    cfg = cfg or RunConfig()
    for lineno, line in enumerate(text.splitlines(), 1):
        body = line.split("#", 1)[0]
        if not body.strip():
            continue
        if "=" not in body:
            col = len(body) - len(body.lstrip()) + 1
            raise ConfigurationError(f"{source}:{lineno}:{col}: expected 'key = value'")
        key, raw = body.split("=", 1)
        key_col = len(key) - len(key.lstrip()) + 1
        val_col = len(key) + 2 + len(raw) - len(raw.lstrip())
        key = key.strip()
        col = val_col if key in _field_types() else key_col
        where = f"{source}:{lineno}:{col}"
        apply_setting(cfg, key, raw, where)
    return cfg


FLAG_KEYS = {"seed": "run.seed", "grid": "grid.torus_points", "horizon": "run.horizon",
             "threads": "run.threads", "gap_tol": "run.gap_tol",
             "refine_iters": "grid.refine_iters", "domain_samples": "grid.domain_samples",
             "burn": "run.burn", "hull_grid": "run.hull_grid",
             "a": "sphere.a", "rho": "sphere.rho", "kappa": "sphere.kappa",
             "e_amp": "sphere.E_amp", "b_amp": "sphere.B_amp",
             "coulomb_sign": "sphere.coulomb_sign"}


def build_parser():
    ap = argparse.ArgumentParser(prog="qpmanifold",
                                 description="Quasiperiodic solutions of constrained systems")
    sub = ap.add_subparsers(dest="subcommand", required=True)
    for name in SUBCOMMANDS:
        sp = sub.add_parser(name)
        if name == "case-study":
            sp.add_argument("case", choices=BUILTINS)
        sp.add_argument("--config", help="flat key = value file")
        sp.add_argument("--out", default="out")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
        for flag, key in FLAG_KEYS.items():
            sp.add_argument("--" + flag.replace("_", "-"), dest=flag, default=None,
                            help=f"sets {key}")
    return ap


def validate(cfg):
    if cfg.subcommand not in SUBCOMMANDS:
        raise ConfigurationError(f"unknown subcommand {cfg.subcommand!r}")
    if cfg.spec_source not in BUILTINS:
        raise ConfigurationError(f"spec.source must be one of {BUILTINS}, got {cfg.spec_source!r}")
    sphere_params(cfg)
    grid_options(cfg)
    tolerances(cfg)
    r = cfg.run
    if r.horizon <= 0 or r.burn <= 0 or r.search_horizon <= 0:
        raise ConfigurationError("horizon, burn and search_horizon must be positive")
    if r.threads < 0:
        raise ConfigurationError("threads must be >= 0")
    return cfg


def parse_config(argv=None, path=None):
    """RunConfig from CLI arguments (argv) or a config file (path)."""
    cfg = RunConfig()
    if argv is None:
        if path is not None:
            with open(path) as fh:
                parse_config_text(fh.read(), cfg, str(path))
        return validate(cfg)
    args = build_parser().parse_args(argv)
    cfg.subcommand = args.subcommand
    if args.subcommand == "case-study":
        cfg.spec_source = args.case
    if args.config:
        with open(args.config) as fh:
            parse_config_text(fh.read(), cfg, args.config)
    for item in args.set:
        key, _, raw = item.partition("=")
        apply_setting(cfg, key.strip(), raw, f"--set {item}")
    for flag, key in FLAG_KEYS.items():
        val = getattr(args, flag)
        if val is not None:
            apply_setting(cfg, key, val, "--" + flag.replace("_", "-"))
    cfg.out = args.out
    return validate(cfg)


def sphere_params(cfg):
    from .sphere_case import SphereParams
    s = cfg.sphere
    return SphereParams(a=s.a, rho=s.rho, kappa=s.kappa, omega=tuple(s.omega), E_amp=s.E_amp,
                        E_k=s.E_k, B_amp=s.B_amp, coulomb_sign=s.coulomb_sign)


def grid_options(cfg):
    from .hypotheses import GridOptions
    g = cfg.grid
    if min(g.torus_points, g.domain_samples, g.boundary_samples) < 2 or g.refine_iters < 0:
        raise ConfigurationError("grid sizes must be >= 2 and refine_iters >= 0")
    return GridOptions(torus_points=g.torus_points, domain_samples=g.domain_samples,
                       boundary_samples=g.boundary_samples, refine_iters=g.refine_iters,
                       seed=cfg.run.seed)


def tolerances(cfg):
    from .system import ToleranceSet
    return ToleranceSet(**dataclasses.asdict(cfg.tol))


def case_budget(cfg):
    from .sphere_case import CaseStudyBudget
    g, r = cfg.grid, cfg.run
    return CaseStudyBudget(grid=g.torus_points, domain_samples=g.domain_samples,
                           refine_iters=g.refine_iters, horizon=r.horizon, hull_grid=r.hull_grid,
                           search_horizon=r.search_horizon, search_seeds=r.search_seeds,
                           burn=r.burn, window_tol=r.window_tol, gap_tol=r.gap_tol,
                           renorm_dt=r.renorm_dt, dt_out=r.dt_out, seed=r.seed,
                           second_seed=r.second_seed if r.second_seed >= 0 else None)


# -- serialization --------------------------------------------------------------------

def _num(x):
    x = float(x)
    if math.isfinite(x):
        s = format(x, ".17g")
        return s if any(c in s for c in ".en") else s + ".0"
    return '"nan"' if math.isnan(x) else ('"inf"' if x > 0 else '"-inf"')


def dumps(obj, indent=0):
    """Deterministic JSON: sorted keys, floats with 17 significant digits."""
    pad, inner = "  " * indent, "  " * (indent + 1)
    if isinstance(obj, (bool, np.bool_)):
        return "true" if obj else "false"
    if obj is None:
        return "null"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        return _num(obj)
    if isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, np.ndarray):
        obj = obj.tolist()
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f'{inner}{dumps(str(k))}: {dumps(obj[k], indent + 1)}'
                 for k in sorted(obj, key=str)]
        return "{\n" + ",\n".join(items) + "\n" + pad + "}"
    if isinstance(obj, (list, tuple)):
        if not obj:
            return "[]"
        if all(isinstance(v, (int, float, np.number, bool)) or v is None for v in obj):
            return "[" + ", ".join(dumps(v) for v in obj) + "]"
        return "[\n" + ",\n".join(inner + dumps(v, indent + 1) for v in obj) + "\n" + pad + "]"
    if dataclasses.is_dataclass(obj):
        return dumps(dataclasses.asdict(obj), indent)
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def manifest_text(cfg, timings):
    lines = [f"# qpmanifold {__version__}", f"# python {platform.python_version()}",
             f"# numpy {np.__version__}", f"# scipy {scipy.__version__}",
             f"# subcommand {cfg.subcommand}", f"# threads_effective {cfg.threads}"]
    for name, sec in timings.items():
        lines.append(f"# wall_clock.{name} = {sec:.3f}")
    for key, val in cfg.flat().items():
        if isinstance(val, tuple):
            val = ", ".join(format(v, ".17g") for v in val)
        elif isinstance(val, float):
            val = format(val, ".17g")
        lines.append(f"{key} = {val}")
    return "\n".join(lines) + "\n"


def emit_report(out_dir, report, cfg, timings, trajectory=None, hull=None):
    """Write report.json, MANIFEST.txt and the CSV artifacts that exist."""
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "report.json"), "w") as fh:
        fh.write(dumps(report) + "\n")
    with open(os.path.join(out_dir, "MANIFEST.txt"), "w") as fh:
        fh.write(manifest_text(cfg, timings))
    if trajectory is not None:
        trajectory.to_csv(os.path.join(out_dir, "trajectory.csv"))
    if hull is not None:
        hull.to_csv(os.path.join(out_dir, "hull.csv"))


# -- subcommands ----------------------------------------------------------------------

class _Timer:
    def __init__(self):
        self.timings = {}

    def __call__(self, name, fn, *args, **kw):
        t0 = time.perf_counter()
        try:
            return fn(*args, **kw)
        finally:
            self.timings[name] = time.perf_counter() - t0


def _failed(stage, exc):
    return {"stage": "failed", "name": stage, "error": f"{type(exc).__name__}: {exc}",
            "diagnostics": getattr(exc, "diagnostics", {})}


def _check_payload(check):
    return {"verdicts": [v.as_dict() for v in check.verdicts], "holds": check.all_hold,
            "Z": check.extras["Z"], "extremes": check.extras["extremes"]}


def _constants_payload(consts):
    return {"values": consts.scalars(), "flags": consts.flags, "witnesses": consts.witnesses,
            "grid_meta": consts.grid_meta}


def run_subcommand(cfg):
    """Returns (report dict, timings, trajectory, hull, exit code)."""
    from . import dichotomy, finder, hypotheses
    from .sphere_case import closed_form_constants, make_spec, run_case_study
    timer = _Timer()
    params = sphere_params(cfg)
    report = {"subcommand": cfg.subcommand, "config": cfg.flat(), "stages": {}}
    stages = report["stages"]

    if cfg.subcommand == "case-study":
        rep = timer("case_study", run_case_study, params, case_budget(cfg))
        timer.timings.update(rep.artifacts.get("timings", {}))
        stages.update(rep.stages)
        report["verdict"] = rep.verdict
        report["failed_stage"] = rep.failed_stage
        report["params"] = rep.params
        numerical = any(isinstance(s, dict) and s.get("stage") == "failed"
                        for s in rep.stages.values())
        code = 0 if rep.verdict else (3 if numerical else 2)
        return report, timer.timings, rep.artifacts.get("trajectory"), rep.artifacts.get("hull"), code

    spec = make_spec(params, tolerances(cfg))
    opts = grid_options(cfg)
    if cfg.subcommand == "constants":
        consts, _ = timer("constants", hypotheses.compute_constants, spec, opts)
        stages["constants"] = _constants_payload(consts)
        closed, extra = closed_form_constants(params)
        stages["closed_form"] = dict(_constants_payload(closed), extra=extra)
        report["verdict"] = True
        return report, timer.timings, None, None, 0

    check = timer("check", hypotheses.check_all, spec, opts=opts)
    stages["check"] = _check_payload(check)
    stages["constants"] = _constants_payload(check.constants)
    if cfg.subcommand == "check":
        report["verdict"] = check.all_hold
        return report, timer.timings, None, None, 0 if check.all_hold else 2

    consts = check.constants
    r = cfg.run
    wopts = finder.WindowOptions(dt_out=r.dt_out, search_horizon=r.search_horizon, seed=r.seed)
    sbud = finder.SearchBudget(seeds=r.search_seeds, seed=r.seed)
    try:
        traj = timer("bounded_solution", finder.bounded_solution, spec, (0.0, r.horizon), r.burn,
                     r.window_tol, wopts, sbud, z_plus=consts.z_plus, z_star=consts.z_star)
    except ToolkitError as exc:
        stages["bounded_solution"] = _failed("bounded_solution", exc)
        report["verdict"] = False
        return report, timer.timings, None, None, 3
    meta = traj.step_meta
    stages["bounded_solution"] = {
        "levels": meta.get("levels"), "sup_speed": meta.get("sup_speed"),
        "max_G": meta.get("max_G"), "inside": meta.get("inside"),
        "speed_bound_ok": meta.get("speed_bound_ok"), "eps": meta.get("eps"),
        "window": meta.get("window")}
    ok = bool(meta.get("inside") and meta.get("speed_bound_ok"))
    hull = None
    try:
        hull = timer("hull", finder.hull_extract, traj, spec.omega, r.hull_grid)
        stages["hull"] = hull.summary()
    except ToolkitError as exc:
        stages["hull"] = _failed("hull", exc)
    if cfg.subcommand == "dichotomy":
        try:
            cert = timer("dichotomy", dichotomy.certify, spec, traj, gap_tol=r.gap_tol,
                         renorm_dt=r.renorm_dt, opts=opts)
            stages["dichotomy"] = cert.summary()
            ok = ok and cert.verdict
        except ToolkitError as exc:
            stages["dichotomy"] = _failed("dichotomy", exc)
            report["verdict"] = False
            return report, timer.timings, traj, hull, 3
    report["verdict"] = ok
    return report, timer.timings, traj, hull, 0 if ok else 2


def main(argv=None):
    argv = sys.argv[1:] if argv is None else argv
    try:
        cfg = parse_config(argv)
    except SystemExit as exc:
        # argparse exits with 2 on bad flags, which would read as a false verdict
        return 0 if exc.code in (0, None) else 4
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 4
    except OSError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 4
    try:
        with threadpool_limits(limits=cfg.threads):
            report, timings, traj, hull, code = run_subcommand(cfg)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 4
    except ToolkitError as exc:
        print(f"numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3
    emit_report(cfg.out, report, cfg, timings, traj, hull)
    print(f"{cfg.subcommand}: verdict {report.get('verdict')} -> {cfg.out} (exit {code})")
    return code


if __name__ == "__main__":
    sys.exit(main())
