"""Coupled convergence studies and rate estimation.

A study runs a reference discretization (fine mesh, fine time step) and
a grid of coarser discretizations driven by the same Wiener path: coarse
time increments are sums of the fine ones, coarse space loads are the
fine loads pushed through the vertex-interpolation matrix.  Relative
errors against the reference are summarized by medians over
realizations and fitted log-log slopes, reported next to the envelope
the strong-rate theory predicts.
"""

import concurrent.futures
import math
from dataclasses import dataclass, field

import numpy as np

from .assembly import assemble_operator_set
from .coefficients import builtin_field
from .errors import NumericalError, ValidationError
from .fractional import FractionalApplier, choose_k, fractional_spec
from .geometry import surface_by_name
from .mesh import coarse_to_fine_matrix, generate_mesh, identity_coupling
from .noise import NoiseStream, mass_sqrt_factor, sample_increment
from .stepper import StateVector, StepOperator, commuting_pair, step

_FLOAT_FMT = "%.12g"


def relative_error(alpha_coarse, alpha_ref, coupling, M_ref):
    """Mass-weighted relative difference on the reference vertex set.

    The coarse solution is interpolated onto the reference vertices with
    the coupling transpose; the squared error is the mass-matrix inner
    product of the difference, normalized by the reference norm.
    """
    alpha_ref = np.asarray(alpha_ref, dtype=float)
    if coupling is None:
        interp = np.asarray(alpha_coarse, dtype=float)
    else:
        interp = coupling.interpolate(alpha_coarse)
    if interp.shape != alpha_ref.shape:
        raise ValidationError("interpolated coarse vector does not match the reference")
    ref_sq = float(alpha_ref @ (M_ref @ alpha_ref))
    if ref_sq <= 0.0:
        raise ValidationError("reference solution has zero mass norm")
    diff = interp - alpha_ref
    return math.sqrt(max(float(diff @ (M_ref @ diff)), 0.0) / ref_sq)


@dataclass
class RateFit:
    slope: float
    intercept: float
    r_squared: float


def fit_rate(samples):
    """Least-squares slope of log(error) against log(scale)."""
    if len(samples) < 2:
        raise ValidationError("rate fit needs at least two samples")
    scales = np.array([s for s, _ in samples], dtype=float)
    errors = np.array([e for _, e in samples], dtype=float)
    if len(np.unique(scales)) < 2:
        raise ValidationError("rate fit needs at least two distinct scales")
    if np.any(errors <= 0.0) or not np.all(np.isfinite(errors)):
        raise ValidationError("rate fit requires positive finite errors")
    x, y = np.log(scales), np.log(errors)
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 if ss_tot == 0.0 else 1.0 - float(np.sum(resid ** 2)) / ss_tot
    return RateFit(slope=float(slope), intercept=float(intercept), r_squared=r2)


def theoretical_rate(gamma, d):
    """Supremum of admissible convergence orders in space and time."""
    if not (gamma > d / 4.0 - 0.5 and 0.0 <= gamma <= 1.0):
        raise ValidationError(
            f"gamma={gamma} outside the admissible range (d/4 - 1/2, 1] for d={d}")
    theta = min(2.0 * gamma + 1.0 - d / 2.0, 2.0)
    return {"space": theta, "time": theta / 2.0}


@dataclass
class StudyConfig:
    """Full description of one coupled convergence study."""

    surface: str = "circle"
    field1: str = "laplace"
    field2: str = "shifted-laplace"
    gammas: tuple = (0.5,)
    k: float | str = 0.5           # quadrature resolution, or "auto"
    k_max: float = 0.5             # cap used when k == "auto"
    ref_level: int = 6
    ref_dt: float = 2.0 ** -10     # noise-path granularity and default reference step
    ref_run_dt: float | None = None  # reference integration step (>= ref_dt multiple)
    coarse_levels: tuple = (3, 4, 5)
    coarse_dts: tuple = (2.0 ** -6,)
    realizations: int = 8
    seed: int = 0
    t_final: float = 1.0
    coupling: str = "coupled"      # or "independent"
    fractional_mode: str = "auto"  # "auto" | "per-step" | "final"
    threads: int = 1

    def validate(self):
        if self.surface not in ("circle", "sphere", "deformed-sphere"):
            raise ValidationError(f"surface: unknown surface {self.surface!r}")
        if not self.gammas:
            raise ValidationError("gammas: empty list")
        if self.coupling not in ("coupled", "independent"):
            raise ValidationError(f"coupling: must be 'coupled' or 'independent', got {self.coupling!r}")
        if self.fractional_mode not in ("auto", "per-step", "final"):
            raise ValidationError(f"fractional_mode: unknown mode {self.fractional_mode!r}")
        if self.k != "auto":
            if not isinstance(self.k, (int, float)) or self.k <= 0.0:
                raise ValidationError(f"k: must be positive or 'auto', got {self.k!r}")
        if self.k_max <= 0.0:
            raise ValidationError("k_max: must be positive")
        if self.realizations < 1:
            raise ValidationError("realizations: must be >= 1")
        if self.threads < 1:
            raise ValidationError("threads: must be >= 1")
        if self.t_final <= 0.0 or self.ref_dt <= 0.0:
            raise ValidationError("t_final and ref_dt must be positive")
        n_steps = round(self.t_final / self.ref_dt)
        if n_steps < 1 or abs(n_steps * self.ref_dt - self.t_final) > 1e-12 * max(1.0, self.t_final):
            raise ValidationError("ref_dt: t_final is not an integer number of reference steps")
        if self.ref_run_dt is not None:
            ratio = round(self.ref_run_dt / self.ref_dt)
            if ratio < 1 or abs(ratio * self.ref_dt - self.ref_run_dt) > 1e-9 * self.ref_run_dt:
                raise ValidationError(
                    "ref_run_dt: must be an integer multiple of the path granularity ref_dt")
            n_run = round(self.t_final / self.ref_run_dt)
            if n_run < 1 or abs(n_run * self.ref_run_dt - self.t_final) > 1e-9:
                raise ValidationError(
                    "ref_run_dt: t_final is not an integer number of reference steps")
        if not self.coarse_levels:
            raise ValidationError("coarse_levels: empty list")
        if not self.coarse_dts:
            raise ValidationError("coarse_dts: empty list")
        for level in self.coarse_levels:
            if level > self.ref_level:
                raise ValidationError(
                    f"coarse_levels: level {level} is finer than the reference level {self.ref_level}")
            if level < 0:
                raise ValidationError(f"coarse_levels: negative level {level}")
        ref_step = self.ref_run_dt if self.ref_run_dt is not None else self.ref_dt
        for dt in self.coarse_dts:
            if dt + 1e-15 < ref_step:
                raise ValidationError(
                    f"coarse_dts: dt {dt} is finer than the reference step {ref_step}")
            ratio = round(dt / self.ref_dt)
            if ratio < 1 or abs(ratio * self.ref_dt - dt) > 1e-9 * dt:
                raise ValidationError(
                    f"coarse_dts: dt {dt} is not an integer multiple of the reference dt")
            n_coarse = round(self.t_final / dt)
            if n_coarse < 1 or abs(n_coarse * dt - self.t_final) > 1e-9:
                raise ValidationError(
                    f"coarse_dts: t_final is not an integer number of steps of {dt}")
        return self


@dataclass
class ConvergenceRecord:
    gamma: float
    level: int
    h: float
    dt: float
    realization: int
    rel_error: float


@dataclass
class SummaryRow:
    gamma: float
    axis: str     # "space" | "time"
    scale: float  # measured h or dt
    median_error: float
    fitted_slope: float
    theoretical_slope: float


@dataclass
class ConvergenceReport:
    config: StudyConfig
    records: list
    summaries: list
    fits: dict          # (gamma, axis) -> RateFit
    flags: list
    resolved_k: dict    # gamma -> quadrature resolution used
    mode: str           # fractional mode actually used
    coupling_mode: str

    def median_errors(self):
        """(gamma, level, dt) -> median rel_error over realizations."""
        groups = {}
        for rec in self.records:
            groups.setdefault((rec.gamma, rec.level, rec.dt), []).append(rec.rel_error)
        return {key: (float(np.median(clean)) if (clean := [e for e in vals if np.isfinite(e)])
                      else float("nan"))
                for key, vals in groups.items()}

    def write_records_csv(self, path):
        lines = ["gamma,h,dt,realization,rel_error"]
        for rec in self.records:
            lines.append(",".join([
                _FLOAT_FMT % rec.gamma, _FLOAT_FMT % rec.h, _FLOAT_FMT % rec.dt,
                str(rec.realization), _FLOAT_FMT % rec.rel_error]))
        with open(path, "w", newline="\n") as f:
            f.write("\n".join(lines) + "\n")

    def write_summary_csv(self, path):
        lines = ["gamma,axis,scale,median_error,fitted_slope,theoretical_slope"]
        for row in self.summaries:
            lines.append(",".join([
                _FLOAT_FMT % row.gamma, row.axis, _FLOAT_FMT % row.scale,
                _FLOAT_FMT % row.median_error, _FLOAT_FMT % row.fitted_slope,
                _FLOAT_FMT % row.theoretical_slope]))
        with open(path, "w", newline="\n") as f:
            f.write("\n".join(lines) + "\n")


@dataclass
class _CoarseRun:
    level: int
    dt: float
    ratio: int
    ops: object
    coupling: object
    h: float


@dataclass
class _StudyContext:
    config: StudyConfig
    surface: object
    ref_ops: object
    ref_h: float
    runs: list
    stream: NoiseStream
    n_ref_steps: int   # steps at the path granularity ref_dt
    ref_ratio: int     # reference integration step / path granularity
    ref_step: float
    specs: dict        # gamma -> FractionalSpec
    mode: str
    gamma0_spec: object = None
    ref_steppers: dict = field(default_factory=dict)    # key -> StepOperator
    run_steppers: dict = field(default_factory=dict)    # (key, run index) -> StepOperator
    ref_appliers: dict = field(default_factory=dict)    # gamma -> FractionalApplier
    run_appliers: dict = field(default_factory=dict)    # (gamma, run index) -> applier
    indep_factors: dict = field(default_factory=dict)   # run index -> mass factor


def _build_context(config):
    surface = surface_by_name(config.surface)
    f1 = builtin_field(config.field1, surface)
    f2 = builtin_field(config.field2, surface)

    ref_mesh = generate_mesh(surface, config.ref_level)
    ref_ops = assemble_operator_set(ref_mesh, f1, f2)

    meshes, opsets, couplings = {}, {}, {}
    for level in sorted(set(config.coarse_levels)):
        if level == config.ref_level:
            meshes[level] = ref_mesh
            opsets[level] = ref_ops
            couplings[level] = identity_coupling(ref_mesh)
        else:
            meshes[level] = generate_mesh(surface, level)
            opsets[level] = assemble_operator_set(meshes[level], f1, f2)
            couplings[level] = coarse_to_fine_matrix(meshes[level], ref_mesh, surface)

    runs = []
    for level in sorted(set(config.coarse_levels)):
        for dt in sorted(set(config.coarse_dts)):
            runs.append(_CoarseRun(
                level=level, dt=dt, ratio=round(dt / config.ref_dt),
                ops=opsets[level], coupling=couplings[level], h=meshes[level].h))

    specs = {}
    resolved_k = {}
    for gamma in config.gammas:
        k = config.k
        if k == "auto":
            k = choose_k(gamma, ref_mesh.h, config.k_max) if gamma > 0.0 else config.k_max
        specs[gamma] = fractional_spec(float(gamma), float(k))
        resolved_k[gamma] = float(k)

    mode = config.fractional_mode
    if mode == "auto":
        mode = "final" if commuting_pair(ref_ops) else "per-step"
    if mode == "final" and not commuting_pair(ref_ops):
        raise ValidationError(
            f"fractional_mode 'final' requires commuting fields, got "
            f"({config.field1!r}, {config.field2!r})")

    ref_step = config.ref_run_dt if config.ref_run_dt is not None else config.ref_dt
    ctx = _StudyContext(
        config=config, surface=surface, ref_ops=ref_ops, ref_h=ref_mesh.h,
        runs=runs, stream=NoiseStream.for_mass(ref_ops.M, config.ref_dt, config.seed),
        n_ref_steps=round(config.t_final / config.ref_dt),
        ref_ratio=round(ref_step / config.ref_dt), ref_step=ref_step,
        specs=specs, mode=mode)
    ctx.resolved_k = resolved_k

    if mode == "final":
        ctx.gamma0_spec = fractional_spec(0.0, 1.0)
        ctx.ref_steppers["base"] = StepOperator(ref_ops, ctx.gamma0_spec, ref_step)
        for i, run in enumerate(runs):
            ctx.run_steppers[("base", i)] = StepOperator(run.ops, ctx.gamma0_spec, run.dt)
        for gamma in config.gammas:
            ctx.ref_appliers[gamma] = FractionalApplier(ref_ops.M, ref_ops.K, specs[gamma])
            for i, run in enumerate(runs):
                ctx.run_appliers[(gamma, i)] = FractionalApplier(
                    run.ops.M, run.ops.K, specs[gamma])
    else:
        for gamma in config.gammas:
            ctx.ref_steppers[gamma] = StepOperator(ref_ops, specs[gamma], ref_step)
            for i, run in enumerate(runs):
                ctx.run_steppers[(gamma, i)] = StepOperator(run.ops, specs[gamma], run.dt)

    if config.coupling == "independent":
        for i, run in enumerate(runs):
            ctx.indep_factors[i] = mass_sqrt_factor(run.ops.M)

    return ctx


def _stream_coupled(ctx, realization, stepper_key):
    """Advance reference and all coarse runs on one shared noise path.

    Returns (reference final alpha, list of coarse final alphas).  The
    coarse runs consume the time-window sums of the fine loads pushed
    through their coupling operators.
    """
    config = ctx.config
    ref_state = StateVector(np.zeros(ctx.ref_ops.n))
    run_states = [StateVector(np.zeros(run.ops.n)) for run in ctx.runs]
    ratios = sorted({run.ratio for run in ctx.runs} | {ctx.ref_ratio})
    windows = {ratio: np.zeros(ctx.ref_ops.n) for ratio in ratios}
    ref_stepper = ctx.ref_steppers[stepper_key]

    for n in range(ctx.n_ref_steps):
        load = sample_increment(ctx.stream, realization, n, config.ref_dt).load
        for acc in windows.values():
            acc += load
        if (n + 1) % ctx.ref_ratio == 0:
            ref_state = step(ref_stepper, ref_state, windows[ctx.ref_ratio])
        for i, run in enumerate(ctx.runs):
            if (n + 1) % run.ratio == 0:
                coarse_load = run.coupling.coarsen(windows[run.ratio])
                run_states[i] = step(ctx.run_steppers[(stepper_key, i)],
                                     run_states[i], coarse_load)
        for ratio in ratios:
            if (n + 1) % ratio == 0:
                windows[ratio][:] = 0.0
    return ref_state.alpha, [s.alpha for s in run_states]


def _stream_independent(ctx, realization, stepper_key):
    """Reference and coarse runs each drawing their own noise."""
    config = ctx.config
    ref_state = StateVector(np.zeros(ctx.ref_ops.n))
    ref_stepper = ctx.ref_steppers[stepper_key]
    window = np.zeros(ctx.ref_ops.n)
    for n in range(ctx.n_ref_steps):
        window += sample_increment(ctx.stream, realization, n, config.ref_dt).load
        if (n + 1) % ctx.ref_ratio == 0:
            ref_state = step(ref_stepper, ref_state, window)
            window[:] = 0.0

    finals = []
    for i, run in enumerate(ctx.runs):
        stream = NoiseStream(seed=config.seed + i + 1, dt=run.dt,
                             factor=ctx.indep_factors[i])
        state = StateVector(np.zeros(run.ops.n))
        for n in range(round(config.t_final / run.dt)):
            load = sample_increment(stream, realization, n, run.dt).load
            state = step(ctx.run_steppers[(stepper_key, i)], state, load)
        finals.append(state.alpha)
    return ref_state.alpha, finals


def _realization_records(ctx, realization):
    config = ctx.config
    stream_fn = _stream_coupled if config.coupling == "coupled" else _stream_independent
    records = []

    def failed(gamma):
        return [ConvergenceRecord(gamma, run.level, run.h, run.dt, realization,
                                  float("nan")) for run in ctx.runs]

    if ctx.mode == "final":
        try:
            ref_base, run_bases = stream_fn(ctx, realization, "base")
        except NumericalError:
            for gamma in config.gammas:
                records.extend(failed(gamma))
            return records
        for gamma in config.gammas:
            if ctx.specs[gamma].gamma == 0.0:
                ref_alpha = ref_base
            else:
                ref_alpha = ctx.ref_appliers[gamma].apply(ctx.ref_ops.M @ ref_base)
            for i, run in enumerate(ctx.runs):
                try:
                    if ctx.specs[gamma].gamma == 0.0:
                        coarse_alpha = run_bases[i]
                    else:
                        coarse_alpha = ctx.run_appliers[(gamma, i)].apply(
                            run.ops.M @ run_bases[i])
                    err = relative_error(coarse_alpha, ref_alpha, run.coupling,
                                         ctx.ref_ops.M)
                except (NumericalError, ValidationError):
                    err = float("nan")
                records.append(ConvergenceRecord(gamma, run.level, run.h, run.dt,
                                                 realization, err))
        return records

    for gamma in config.gammas:
        try:
            ref_alpha, run_alphas = stream_fn(ctx, realization, gamma)
        except NumericalError:
            records.extend(failed(gamma))
            continue
        for i, run in enumerate(ctx.runs):
            try:
                err = relative_error(run_alphas[i], ref_alpha, run.coupling,
                                     ctx.ref_ops.M)
            except (NumericalError, ValidationError):
                err = float("nan")
            records.append(ConvergenceRecord(gamma, run.level, run.h, run.dt,
                                             realization, err))
    return records


def run_study(config):
    """Execute a coupled (or independent) convergence study."""
    config.validate()
    ctx = _build_context(config)

    if config.threads > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=config.threads) as pool:
            chunks = list(pool.map(lambda r: _realization_records(ctx, r),
                                   range(config.realizations)))
    else:
        chunks = [_realization_records(ctx, r) for r in range(config.realizations)]

    records = [rec for chunk in chunks for rec in chunk]
    records.sort(key=lambda r: (r.gamma, r.level, r.dt, r.realization))

    report = ConvergenceReport(
        config=config, records=records, summaries=[], fits={}, flags=[],
        resolved_k=ctx.resolved_k, mode=ctx.mode, coupling_mode=config.coupling)
    medians = report.median_errors()

    levels = sorted(set(config.coarse_levels))
    dts = sorted(set(config.coarse_dts))
    finest_dt, finest_level = dts[0], levels[-1]
    run_h = {run.level: run.h for run in ctx.runs}

    for gamma in config.gammas:
        rates = theoretical_rate(gamma, ctx.ref_ops.mesh.d)
        axes = []
        if len(levels) >= 2:
            pts = [(run_h[level], medians[(gamma, level, finest_dt)])
                   for level in levels
                   if np.isfinite(medians[(gamma, level, finest_dt)])
                   and medians[(gamma, level, finest_dt)] > 0.0]
            axes.append(("space", pts))
        if len(dts) >= 2:
            pts = [(dt, medians[(gamma, finest_level, dt)])
                   for dt in dts
                   if np.isfinite(medians[(gamma, finest_level, dt)])
                   and medians[(gamma, finest_level, dt)] > 0.0]
            axes.append(("time", pts))
        for axis, pts in axes:
            if len(pts) < 2:
                report.flags.append(
                    f"gamma={gamma}: not enough valid {axis} samples for a rate fit")
                continue
            fit = fit_rate(pts)
            report.fits[(gamma, axis)] = fit
            for scale, med in pts:
                report.summaries.append(SummaryRow(
                    gamma=gamma, axis=axis, scale=scale, median_error=med,
                    fitted_slope=fit.slope, theoretical_slope=rates[axis]))
            if fit.slope > rates[axis] + 0.5:
                report.flags.append(
                    f"gamma={gamma}: fitted {axis} slope {fit.slope:.3f} exceeds the "
                    f"theoretical envelope {rates[axis]:.3f} by more than 0.5")
            # monotone refinement check over the last two refinements
            ordered = sorted(pts, key=lambda p: p[0], reverse=True)
            (s1, e1), (s2, e2) = ordered[-2], ordered[-1]
            if e2 > e1:
                report.flags.append(
                    f"gamma={gamma}: {axis} median error increased from scale "
                    f"{s1:.4g} to {s2:.4g}")
    report.summaries.sort(key=lambda s: (s.gamma, s.axis, -s.scale))
    return report
