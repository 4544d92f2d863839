"""Synthetic benchmark: paired method comparison with CSV and plot artifacts.

Each instance draws true parameters uniformly on spheres of configured norms,
samples one dataset, perturbs the truth into a shared starting point, and runs
every configured method from that same state.  Relative parameter errors are
reported after aligning out the label-swap symmetry (negating both blocks
jointly leaves the model invariant).  All randomness flows from a single
master seed through per-instance counter-based streams, so reruns are
byte-identical.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
from scipy.stats import t as student_t

from .baselines import DEFAULT_STEP_GRID, StepSizes, select_step_size
from .em import FitTrace, SolverOptions, fit
from .errors import ConfigError, LengthMismatch, WrongKind
from .models import DataSet, ModelKind, MoEParams, sample_dataset

CSV_HEADER = (
    "instance,method,iteration,objective,objective_gap_to_final,"
    "beta_rel_err,w_rel_err,bregman_step,wall_ms"
)

KNOWN_METHODS = ("em", "gradient-em", "gd")


@dataclass(frozen=True)
class ExperimentConfig:
    """Configuration of one benchmark run."""

    kind: str = "sym-linear"
    d: int = 10
    n: int = 1000
    n_iter: int = 50
    instances: int = 50
    beta_norm: float = 4.0
    w_norm: float = 4.0
    init_radius: float = 0.5
    methods: tuple = KNOWN_METHODS
    step_grid: tuple = DEFAULT_STEP_GRID
    probe_iters: int = 10
    master_seed: int = 0
    record_timings: bool = False

    def __post_init__(self):
        if self.instances < 1 or self.n_iter < 1:
            raise ConfigError("instances and n_iter must be at least 1")
        if self.init_radius < 0:
            raise ConfigError("init radius must be nonnegative")
        if min(self.beta_norm, self.w_norm) <= 0:
            raise ConfigError("truth norms must be positive")
        if not self.methods:
            raise ConfigError("need at least one method")
        for m in self.methods:
            if m not in KNOWN_METHODS:
                raise ConfigError(f"unknown method {m!r}")
        ModelKind.parse(self.kind)

    @property
    def model_kind(self) -> ModelKind:
        return ModelKind.parse(self.kind)


@dataclass
class InstanceRun:
    instance: int
    method: str
    trace: FitTrace
    errors: np.ndarray  # (len(thetas), 2) aligned (beta, w) relative errors


@dataclass
class ExperimentBundle:
    config: ExperimentConfig
    runs: list = field(default_factory=list)

    def finals(self, method: str, column: int = 0) -> np.ndarray:
        """Final aligned relative errors per instance (column 0 beta, 1 w)."""
        vals = [r.errors[-1, column] for r in self.runs if r.method == method]
        return np.array(vals)

    def traces(self, method: str) -> list:
        return [r.trace for r in self.runs if r.method == method]


@dataclass(frozen=True)
class TTestResult:
    t_stat: float
    p_value: float
    dof: int
    zero_variance: bool = False


def align_to_truth(
    params: MoEParams, truth: MoEParams, kind: ModelKind
) -> tuple[float, float]:
    """Relative block errors after removing the label-swap ambiguity.

    Symmetric kinds: swapping the latent labels negates both blocks at once,
    so the error is taken at the joint sign flip with the smaller total
    squared distance (both blocks flipped together, never separately).
    General kinds: best simultaneous column permutation of both blocks.
    """
    if truth is None:
        raise ValueError("alignment needs true parameters")
    if kind.symmetric:
        best = None
        for s in (1.0, -1.0):
            d_b = np.linalg.norm(s * params.experts - truth.experts)
            d_w = np.linalg.norm(s * params.gating - truth.gating)
            total = d_b**2 + d_w**2
            if best is None or total < best[0]:
                best = (total, d_b, d_w)
        _, d_b, d_w = best
        return (
            float(d_b / np.linalg.norm(truth.experts)),
            float(d_w / np.linalg.norm(truth.gating)),
        )
    from itertools import permutations

    k = kind.n_experts
    if k > 8:
        raise WrongKind("permutation alignment is only practical for small k")
    best = None
    for perm in permutations(range(k)):
        idx = list(perm)
        d_b = np.linalg.norm(params.experts[:, idx] - truth.experts)
        d_w = np.linalg.norm(params.gating[:, idx] - truth.gating)
        total = d_b**2 + d_w**2
        if best is None or total < best[0]:
            best = (total, d_b, d_w)
    _, d_b, d_w = best
    return (
        float(d_b / np.linalg.norm(truth.experts)),
        float(d_w / np.linalg.norm(truth.gating)),
    )


def _draw_instance(config: ExperimentConfig, instance: int):
    """Truth, dataset, and shared starting point for one instance."""
    kind = config.model_kind
    rng = np.random.Generator(
        np.random.Philox((config.master_seed ^ instance) & (2**64 - 1))
    )
    shape = (config.d,) if kind.symmetric else (config.d, kind.n_experts)
    gate_dir = rng.standard_normal(shape)
    gate = config.w_norm * gate_dir / np.linalg.norm(gate_dir)
    expert_dir = rng.standard_normal(shape)
    expert = config.beta_norm * expert_dir / np.linalg.norm(expert_dir)
    truth = MoEParams(gate, expert)
    data_seed = int(rng.integers(0, 2**63))
    data = sample_dataset(kind, config.n, config.d, truth, data_seed)
    direction = rng.standard_normal(truth.stack().size)
    direction /= np.linalg.norm(direction)
    offset = config.init_radius * truth.norm() * direction
    start = truth.unstack_like(truth.stack() + offset)
    return truth, data, start


def run_experiment(config: ExperimentConfig) -> ExperimentBundle:
    """Run every configured method on every instance from shared states."""
    kind = config.model_kind
    opts = SolverOptions()
    bundle = ExperimentBundle(config=config)
    for instance in range(config.instances):
        truth, data, start = _draw_instance(config, instance)
        for method in config.methods:
            steps = None
            if method in ("gd", "gradient-em"):
                steps = select_step_size(
                    data,
                    start,
                    kind,
                    grid=config.step_grid,
                    probe_iters=config.probe_iters,
                    method=method,
                )
            trace = fit(
                data,
                start,
                kind,
                method=method,
                n_iter=config.n_iter,
                opts=opts,
                steps=steps,
            )
            errors = np.array(
                [align_to_truth(p, truth, kind) for p in trace.thetas]
            )
            bundle.runs.append(InstanceRun(instance, method, trace, errors))
    return bundle


def paired_t_test(a, b) -> TTestResult:
    """Two-sided paired t test on per-instance differences a - b."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape or a.ndim != 1:
        raise LengthMismatch("paired samples must be 1-D and equal length")
    n = a.size
    if n < 2:
        raise LengthMismatch("need at least two pairs")
    diff = a - b
    mean = float(np.mean(diff))
    sd = float(np.std(diff, ddof=1))
    dof = n - 1
    if sd == 0.0:
        if mean == 0.0:
            return TTestResult(0.0, 1.0, dof, zero_variance=True)
        return TTestResult(
            float(np.inf) if mean > 0 else float(-np.inf), 0.0, dof, True
        )
    t_stat = mean / (sd / np.sqrt(n))
    p = 2.0 * float(student_t.sf(abs(t_stat), dof))
    return TTestResult(float(t_stat), p, dof)


# ---------------------------------------------------------------------------
# artifact emission
# ---------------------------------------------------------------------------

def _fmt(value) -> str:
    """Shortest round-trip decimal for floats; empty for missing."""
    if value is None:
        return ""
    return repr(float(value))


def metrics_rows(bundle: ExperimentBundle):
    """Yield CSV rows in the fixed 9-column schema."""
    record = bundle.config.record_timings
    for run in bundle.runs:
        trace = run.trace
        final = trace.objective[-1]
        for t, obj in enumerate(trace.objective):
            breg = None
            if t >= 1 and trace.bregman_steps is not None:
                breg = trace.bregman_steps[t - 1]
            wall = None
            if t >= 1:
                wall = trace.wall_times[t - 1] * 1e3 if record else 0.0
            yield (
                str(run.instance),
                run.method,
                str(t),
                _fmt(obj),
                _fmt(obj - final),
                _fmt(run.errors[t, 0]),
                _fmt(run.errors[t, 1]),
                _fmt(breg),
                _fmt(wall) if t >= 1 else _fmt(0.0),
            )


def render_metrics_csv(bundle: ExperimentBundle) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER.split(","))
    for row in metrics_rows(bundle):
        writer.writerow(row)
    return buf.getvalue()


def summarize(bundle: ExperimentBundle) -> str:
    """Deterministic text summary: medians and paired tests on final errors."""
    lines = []
    cfg = bundle.config
    lines.append(f"kind={cfg.kind} d={cfg.d} n={cfg.n} iterations={cfg.n_iter}")
    lines.append(
        f"instances={cfg.instances} init_radius={cfg.init_radius} "
        f"seed={cfg.master_seed}"
    )
    for method in cfg.methods:
        bete = bundle.finals(method, 0)
        gate = bundle.finals(method, 1)
        lines.append(
            f"{method}: median final beta_rel_err={np.median(bete):.6g} "
            f"w_rel_err={np.median(gate):.6g}"
        )
    ref = "gd"
    if ref in cfg.methods:
        for method in cfg.methods:
            if method == ref:
                continue
            res = paired_t_test(bundle.finals(ref, 0), bundle.finals(method, 0))
            lines.append(
                f"paired t ({ref} minus {method}, final beta_rel_err): "
                f"t={res.t_stat:.4g} p={res.p_value:.3g} dof={res.dof}"
            )
    return "\n".join(lines) + "\n"


def _median_curves(bundle: ExperimentBundle, method: str):
    objs = np.array([r.trace.objective for r in bundle.runs if r.method == method])
    errs = np.array([r.errors for r in bundle.runs if r.method == method])
    gap = objs - objs[:, -1:]
    return (
        np.median(gap, axis=0),
        np.median(errs[:, :, 0], axis=0),
        np.median(errs[:, :, 1], axis=0),
    )


def _write_plots(bundle: ExperimentBundle, out_dir: Path) -> list:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "moefit"
    paths = []
    floor = 1e-16

    fig, ax = plt.subplots(figsize=(6, 4))
    for method in bundle.config.methods:
        gap, _, _ = _median_curves(bundle, method)
        ax.semilogy(np.maximum(gap, floor), label=method)
    ax.set_xlabel("iteration")
    ax.set_ylabel("median objective gap to final")
    ax.legend()
    fig.tight_layout()
    path = out_dir / "objective_gap.svg"
    fig.savefig(path, metadata={"Date": None})
    plt.close(fig)
    paths.append(path)

    fig, ax = plt.subplots(figsize=(6, 4))
    for method in bundle.config.methods:
        _, b_err, w_err = _median_curves(bundle, method)
        line = ax.semilogy(np.maximum(b_err, floor), label=f"{method} experts")[0]
        ax.semilogy(
            np.maximum(w_err, floor),
            linestyle="--",
            color=line.get_color(),
            label=f"{method} gate",
        )
    ax.set_xlabel("iteration")
    ax.set_ylabel("median relative parameter error")
    ax.legend()
    fig.tight_layout()
    path = out_dir / "param_errors.svg"
    fig.savefig(path, metadata={"Date": None})
    plt.close(fig)
    paths.append(path)
    return paths


def emit_report(bundle: ExperimentBundle, out_dir) -> list:
    """Write metrics CSV, summary text, and the two plots; return the paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    csv_path = out_dir / "metrics.csv"
    csv_path.write_text(render_metrics_csv(bundle), encoding="utf-8")
    paths.append(csv_path)
    summary_path = out_dir / "summary.txt"
    summary_path.write_text(summarize(bundle), encoding="utf-8")
    paths.append(summary_path)
    paths.extend(_write_plots(bundle, out_dir))
    return paths


# ---------------------------------------------------------------------------
# flat key = value configuration files
# ---------------------------------------------------------------------------

_CONFIG_ALIASES = {
    "seed": "master_seed",
    "iters": "n_iter",
    "rho": "init_radius",
}


def _parse_value(name: str, raw: str, target_type):
    raw = raw.strip()
    try:
        if target_type is bool:
            lowered = raw.lower()
            if lowered in ("true", "1", "yes", "on"):
                return True
            if lowered in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if target_type is int:
            return int(raw)
        if target_type is float:
            return float(raw)
        if target_type is tuple:
            items = [tok.strip() for tok in raw.split(",") if tok.strip()]
            if name == "methods":
                return tuple(items)
            return tuple(float(tok) for tok in items)
        return raw
    except ValueError as exc:
        raise ConfigError(f"cannot parse value for key {name!r}: {raw!r}") from exc


def parse_config_text(text: str) -> dict:
    """Parse flat key = value lines with # comments; unknown keys are errors."""
    field_types = {f.name: f.type for f in fields(ExperimentConfig)}
    type_map = {
        "str": str, "int": int, "float": float, "bool": bool, "tuple": tuple
    }
    out = {}
    for lineno, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, raw = line.split("=", 1)
        key = key.strip().replace("-", "_")
        key = _CONFIG_ALIASES.get(key, key)
        if key not in field_types:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        target = type_map.get(str(field_types[key]), str)
        out[key] = _parse_value(key, raw, target)
    return out


def load_config(path, overrides: dict | None = None) -> ExperimentConfig:
    values = {}
    if path is not None:
        values.update(parse_config_text(Path(path).read_text(encoding="utf-8")))
    if overrides:
        values.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return ExperimentConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
