"""Command-line entry points.

Subcommands:
  mesh      generate a surface mesh and export it as legacy VTK
  simulate  run the time stepper and export the final field + norm trace
  converge  run a coupled convergence study from a config file or preset
  oracle    run the quadrature and noise-law validation suites

Exit codes: 0 success, 1 validation/config/I-O error, 2 numerical failure.
"""

import argparse
import math
import os
import sys
from dataclasses import asdict

import numpy as np

from .assembly import assemble_operator_set
from .coefficients import builtin_field
from .errors import NumericalError, ValidationError
from .fractional import apply_fractional, dense_fractional_oracle, fractional_spec
from .geometry import surface_by_name
from .harness import StudyConfig, run_study
from .mesh import coarse_to_fine_matrix, generate_mesh, mesh_metrics
from .noise import NoiseStream, coarsen_space, sample_increment, write_rho_dump
from .stepper import StateVector, StepOperator, step
from .vtkio import write_vtk

_FLOAT_FMT = "%.12g"


class _Parser(argparse.ArgumentParser):
    # argparse exits with code 2 on bad flags; route through ValidationError
    # so all usage problems share exit code 1
    def error(self, message):
        raise ValidationError(message)


def parse_number(text):
    """Float literal, also accepting power notation like 2^-14."""
    text = text.strip()
    if "^" in text:
        base, _, exp = text.partition("^")
        try:
            return float(base) ** float(exp)
        except ValueError as exc:
            raise ValidationError(f"cannot parse number {text!r}") from exc
    try:
        return float(text)
    except ValueError as exc:
        raise ValidationError(f"cannot parse number {text!r}") from exc


_CONFIG_KEYS = {
    "surface": str,
    "field1": str,
    "field2": str,
    "gammas": "floats",
    "k": "k",
    "k_max": "float",
    "ref_level": int,
    "ref_dt": "float",
    "ref_run_dt": "float",
    "coarse_levels": "ints",
    "coarse_dts": "floats",
    "realizations": int,
    "seed": int,
    "t_final": "float",
    "coupling": str,
    "fractional_mode": str,
    "threads": int,
}


def _convert(key, raw):
    kind = _CONFIG_KEYS[key]
    try:
        if kind is str:
            return raw
        if kind is int:
            return int(raw)
        if kind == "float":
            return parse_number(raw)
        if kind == "k":
            return "auto" if raw == "auto" else parse_number(raw)
        if kind == "floats":
            return tuple(parse_number(tok) for tok in raw.split(",") if tok.strip())
        if kind == "ints":
            return tuple(int(tok) for tok in raw.split(",") if tok.strip())
    except (ValueError, ValidationError) as exc:
        raise ValidationError(f"config field {key!r}: {exc}") from exc
    raise ValidationError(f"unhandled config key {key!r}")


def parse_config_text(text):
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValidationError(f"config line {lineno}: expected 'key = value'")
        key, _, raw = line.partition("=")
        key, raw = key.strip(), raw.strip()
        if key not in _CONFIG_KEYS:
            raise ValidationError(f"config line {lineno}: unknown key {key!r}")
        values[key] = _convert(key, raw)
    return StudyConfig(**values)


def load_config(path):
    try:
        with open(path) as f:
            text = f.read()
    except OSError as exc:
        raise ValidationError(f"cannot read config file {path!r}: {exc}") from exc
    return parse_config_text(text)


def study_presets():
    """Desk-scale reruns of the two rate experiments."""
    return {
        "example1-space-mini": StudyConfig(
            surface="circle", gammas=(0.25, 0.75), k=0.5,
            ref_level=9, ref_dt=2.0 ** -14,
            coarse_levels=(4, 5, 6, 7), coarse_dts=(2.0 ** -14,),
            realizations=8, seed=1),
        "example1-time-mini": StudyConfig(
            surface="circle", gammas=(0.5,), k=0.5,
            ref_level=8, ref_dt=2.0 ** -14,
            coarse_levels=(8,),
            coarse_dts=(2.0 ** -6, 2.0 ** -7, 2.0 ** -8, 2.0 ** -9, 2.0 ** -10),
            realizations=8, seed=1),
        "example2-space-mini": StudyConfig(
            surface="sphere", gammas=(1.0,), k=0.5,
            ref_level=5, ref_dt=2.0 ** -10,
            coarse_levels=(1, 2, 3), coarse_dts=(2.0 ** -10,),
            realizations=4, seed=1),
    }


def _write_config_echo(path, config):
    lines = []
    for key, value in asdict(config).items():
        if isinstance(value, tuple):
            value = ",".join(_FLOAT_FMT % v if isinstance(v, float) else str(v)
                             for v in value)
        elif isinstance(value, float):
            value = _FLOAT_FMT % value
        lines.append(f"{key} = {value}")
    with open(path, "w", newline="\n") as f:
        f.write("\n".join(lines) + "\n")


def _ensure_outdir(path):
    try:
        os.makedirs(path, exist_ok=True)
        probe = os.path.join(path, ".write-probe")
        with open(probe, "w"):
            pass
        os.remove(probe)
    except OSError as exc:
        raise ValidationError(f"output directory {path!r} is not writable: {exc}") from exc


def cmd_mesh(args):
    surface = surface_by_name(args.surface)
    mesh = generate_mesh(surface, args.level)
    metrics = mesh_metrics(mesh)
    try:
        write_vtk(args.out, mesh, title=f"{args.surface} level {args.level}")
    except OSError as exc:
        raise ValidationError(f"cannot write {args.out!r}: {exc}") from exc
    print(f"surface={args.surface} level={args.level} "
          f"n_vertices={metrics.n_vertices} n_elements={mesh.n_elements}")
    print(f"h={metrics.h:.6g} quasi_uniformity_ratio={metrics.quasi_uniformity_ratio:.4f} "
          f"total_measure={metrics.total_measure:.6g}")
    return 0


def cmd_simulate(args):
    surface = surface_by_name(args.surface)
    mesh = generate_mesh(surface, args.level)
    field1 = builtin_field(args.field1, surface)
    field2 = builtin_field(args.field2, surface)
    ops = assemble_operator_set(mesh, field1, field2)
    dt = parse_number(args.dt)
    n_steps = round(args.t_final / dt)
    if n_steps < 1 or abs(n_steps * dt - args.t_final) > 1e-12 * max(1.0, args.t_final):
        raise ValidationError("t_final is not an integer number of time steps")
    spec = fractional_spec(args.gamma, args.k)
    op = StepOperator(ops, spec, dt)
    _ensure_outdir(args.out_dir)

    if args.alpha0 is not None:
        alpha0 = np.full(ops.n, args.alpha0)
    else:
        alpha0 = np.zeros(ops.n)

    stream = None
    if not args.zero_noise:
        stream = NoiseStream.for_mass(ops.M, dt, args.seed)

    state = StateVector(alpha0.copy())
    norms = []
    rhos = [] if args.dump_rho else None
    for n in range(n_steps):
        load = None
        if stream is not None:
            inc = sample_increment(stream, args.realization, n, dt)
            load = inc.load
            if rhos is not None:
                rhos.append(inc.rho)
        state = step(op, state, load)
        norms.append(math.sqrt(max(float(state.alpha @ (ops.M @ state.alpha)), 0.0)))
        if args.snapshot_every and (n + 1) % args.snapshot_every == 0:
            write_vtk(os.path.join(args.out_dir, f"u_{n + 1:06d}.vtk"), mesh,
                      point_data={"u": state.alpha},
                      title=f"u(t={n + 1}*dt) gamma={args.gamma}")

    field_path = os.path.join(args.out_dir, "u_final.vtk")
    write_vtk(field_path, mesh, point_data={"u": state.alpha},
              title=f"u(T) gamma={args.gamma}")
    norms_path = os.path.join(args.out_dir, "norms.csv")
    with open(norms_path, "w", newline="\n") as f:
        f.write("step,time,m_norm\n")
        for n, value in enumerate(norms, start=1):
            f.write(f"{n},{_FLOAT_FMT % (n * dt)},{_FLOAT_FMT % value}\n")
    if rhos is not None:
        write_rho_dump(os.path.join(args.out_dir, "rho.bin"), np.array(rhos))
    print(f"wrote {field_path} and {norms_path} "
          f"(n_steps={n_steps}, N_h={ops.n}, gamma={args.gamma})")
    return 0


def cmd_converge(args):
    if args.preset:
        presets = study_presets()
        if args.preset not in presets:
            raise ValidationError(
                f"unknown preset {args.preset!r}; available: {sorted(presets)}")
        config = presets[args.preset]
    elif args.config:
        config = load_config(args.config)
    else:
        raise ValidationError("converge needs --config FILE or --preset NAME")
    if args.seed is not None:
        config.seed = args.seed
    if args.realizations is not None:
        config.realizations = args.realizations
    config.threads = args.threads

    _ensure_outdir(args.out_dir)
    report = run_study(config)

    _write_config_echo(os.path.join(args.out_dir, "study-config.txt"), config)
    report.write_records_csv(os.path.join(args.out_dir, "records.csv"))
    report.write_summary_csv(os.path.join(args.out_dir, "summary.csv"))

    print(f"coupling={report.coupling_mode} fractional_mode={report.mode}")
    for gamma in config.gammas:
        print(f"gamma={gamma}: k={report.resolved_k[gamma]:.6g}")
    for (gamma, axis), fit in sorted(report.fits.items()):
        print(f"gamma={gamma} {axis}: fitted slope {fit.slope:.4f} "
              f"(r^2={fit.r_squared:.4f})")
    for flag in report.flags:
        print(f"flag: {flag}")
    print(f"wrote records.csv and summary.csv to {args.out_dir}")
    return 0


def _oracle_checks(seed=123):
    import scipy.sparse as sp

    checks = []

    spec = fractional_spec(0.5, 0.25)
    value = apply_fractional(sp.csc_matrix([[1.0]]), sp.csc_matrix([[4.0]]),
                             spec, np.array([1.0]))[0]
    err = abs(value - 0.5)
    checks.append(("scalar fractional power 4^-1/2", err <= 1e-7, f"error {err:.3e}"))

    surface = surface_by_name("circle")
    mesh = generate_mesh(surface, 4)  # 64 vertices
    lap = builtin_field("laplace")
    shifted = builtin_field("shifted-laplace")
    ops = assemble_operator_set(mesh, lap, shifted)
    rng = np.random.default_rng(seed)
    b = rng.standard_normal(ops.n)
    exact = dense_fractional_oracle(ops.M, ops.K, 0.75, b)

    errors = {}
    for k in (0.9, 0.45, 0.5):
        approx = apply_fractional(ops.M, ops.K, fractional_spec(0.75, k), b)
        errors[k] = float(np.linalg.norm(approx - exact) / np.linalg.norm(exact))
    checks.append(("quadrature accuracy at k=0.5", errors[0.5] <= 10 * math.exp(-math.pi ** 2),
                   f"error {errors[0.5]:.3e}"))
    checks.append(("quadrature exponential decay", errors[0.45] <= errors[0.9] / 50.0,
                   f"err(0.45)={errors[0.45]:.3e} err(0.9)={errors[0.9]:.3e}"))

    fine = generate_mesh(surface, 1)  # 8 vertices
    ops8 = assemble_operator_set(fine, lap, shifted)
    dt = 2.0 ** -4
    stream = NoiseStream.for_mass(ops8.M, dt, seed)
    n_samples = 10_000
    loads = np.array([sample_increment(stream, r, 0, dt).load for r in range(n_samples)])
    emp = loads.T @ loads / n_samples
    target = dt * ops8.M.toarray()
    rel = np.linalg.norm(emp - target) / np.linalg.norm(target)
    checks.append(("noise load covariance = dt * M", rel <= 0.05, f"rel error {rel:.3%}"))

    coarse = generate_mesh(surface, 0)
    coupling = coarse_to_fine_matrix(coarse, fine, surface)
    coarse_loads = np.array([coarsen_space(coupling, load) for load in loads])
    emp_c = coarse_loads.T @ coarse_loads / n_samples
    A = coupling.matrix.toarray()
    target_c = dt * A @ ops8.M.toarray() @ A.T
    rel_c = np.linalg.norm(emp_c - target_c) / np.linalg.norm(target_c)
    checks.append(("coupled coarse covariance = dt * A M A^T", rel_c <= 0.05,
                   f"rel error {rel_c:.3%}"))
    return checks


def cmd_oracle(args):
    checks = _oracle_checks(seed=args.seed)
    all_ok = True
    for name, ok, detail in checks:
        print(f"{'PASS' if ok else 'FAIL'}  {name}  ({detail})")
        all_ok = all_ok and ok
    return 0 if all_ok else 2


def build_parser():
    parser = _Parser(prog="surfspde", description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("mesh", help="generate and export a surface mesh")
    p.add_argument("--surface", default="sphere",
                   choices=["circle", "sphere", "deformed-sphere"])
    p.add_argument("--level", type=int, default=2)
    p.add_argument("--out", required=True, help="output VTK path")
    p.set_defaults(func=cmd_mesh)

    p = sub.add_parser("simulate", help="run the stepper and export snapshots")
    p.add_argument("--surface", default="sphere",
                   choices=["circle", "sphere", "deformed-sphere"])
    p.add_argument("--level", type=int, default=3)
    p.add_argument("--field1", default="laplace")
    p.add_argument("--field2", default="shifted-laplace")
    p.add_argument("--gamma", type=float, default=0.5)
    p.add_argument("--k", type=float, default=0.5)
    p.add_argument("--dt", default="2^-6", help="time step (supports 2^-n)")
    p.add_argument("--t-final", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--realization", type=int, default=0)
    p.add_argument("--zero-noise", action="store_true")
    p.add_argument("--alpha0", type=float, default=None,
                   help="constant initial nodal value (default zero)")
    p.add_argument("--snapshot-every", type=int, default=0,
                   help="also write a VTK snapshot every this many steps")
    p.add_argument("--dump-rho", action="store_true",
                   help="dump the raw normal draws to rho.bin")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("converge", help="run a convergence study")
    p.add_argument("--config", help="flat key=value study config file")
    p.add_argument("--preset", help="named built-in study")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--realizations", type=int, default=None)
    p.add_argument("--threads", type=int,
                   default=int(os.environ.get("SURFSPDE_THREADS", "1")))
    p.set_defaults(func=cmd_converge)

    p = sub.add_parser("oracle", help="validation suite: quadrature + noise law")
    p.add_argument("--seed", type=int, default=123)
    p.set_defaults(func=cmd_oracle)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
