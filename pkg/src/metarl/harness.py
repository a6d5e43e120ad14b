"""Experiment plumbing: config files, multi-run comparison, and plots.

Config files are flat `key=value` text with `#` comments; the accepted keys
are exactly the canonical config vocabulary (meta.CONFIG_KEYS). Command-line
overrides win over file values. Comparison reports aggregate per-algorithm
timing and convergence over seeds and print a plain-text table plus pairwise
speedup ratios; curves are emitted as a standalone SVG next to a columnar
data file. Every output is a pure function of its inputs, so identical runs
produce byte-identical files.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import rl
from .envs import Family, Task, make_env
from .errors import ParseError, ValidationError
from .meta import (
    CONFIG_KEYS,
    EMA_FACTOR,
    Algorithm,
    Learner,
    MetaConfig,
    RunConfig,
    fingerprint,
)
from .policy import PolicyNet, actor_arch, init_params
from .rng import Stream
from .runlog import RunLog, detect_convergence, ema_smooth, fmt_float

__all__ = [
    "DEFAULTS",
    "load_config",
    "parse_config_text",
    "build_run_config",
    "AlgorithmSummary",
    "ComparisonReport",
    "summarize",
    "emit_plot",
    "group_key",
    "run_convergence_epoch",
    "AuditResult",
    "audit_oracles",
    "GRAD_TOL",
    "HVP_TOL",
]

GRAD_TOL = 1e-4
HVP_TOL = 1e-3

# Fallbacks for keys a config file omits. Step sizes follow the benchmark
# defaults; the prestep size stays a factor below beta so directed algorithms
# validate out of the box.
DEFAULTS: "dict[str, str]" = {
    "algorithm": "maml",
    "learner": "pg",
    "env": "cartpole",
    "phi_lo": "5.0",
    "phi_hi": "15.0",
    "alpha": "0.001",
    "beta": "0.001",
    "delta": "0.0005",
    "gamma": "0.99",
    "m_tasks": "5",
    "k_trajs": "10",
    "horizon": "200",
    "epochs": "150",
    "seed": "0",
    "eval_every": "1",
    "eval_episodes": "4",
    "conv_tau": "175.0",
    "conv_window": "20",
    "out_dir": "runs",
    "label": "run",
}

_INT_KEYS = {"m_tasks", "k_trajs", "horizon", "epochs", "seed", "eval_every", "eval_episodes", "conv_window"}
_FLOAT_KEYS = {"phi_lo", "phi_hi", "alpha", "beta", "delta", "gamma", "conv_tau"}


def parse_config_text(text: str, source: str = "<config>") -> "dict[str, str]":
    """key=value lines into a dict; '#' starts a comment; blank lines skipped."""
    values: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError(f"{source}:{lineno}: expected key=value, got {line!r}")
        key, _, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if key not in CONFIG_KEYS:
            raise ValidationError(f"{key}: unknown configuration key ({source}:{lineno})")
        if not val:
            raise ParseError(f"{source}:{lineno}: empty value for {key}")
        values[key] = val
    return values


def _convert(key: str, val: str):
    try:
        if key in _INT_KEYS:
            return int(val)
        if key in _FLOAT_KEYS:
            return float(val)
    except ValueError:
        kind = "an integer" if key in _INT_KEYS else "a real number"
        raise ValidationError(f"{key}: expected {kind}, got {val!r}") from None
    if key == "algorithm":
        return Algorithm.parse(val)
    if key == "learner":
        return Learner.parse(val)
    if key == "env":
        try:
            return Family.parse(val)
        except Exception:
            raise ValidationError(f"env: unknown environment family {val!r}") from None
    return val


def build_run_config(values: "dict[str, str]") -> RunConfig:
    """Merge the given string values over the defaults and validate."""
    merged = dict(DEFAULTS)
    for key, val in values.items():
        if key not in CONFIG_KEYS:
            raise ValidationError(f"{key}: unknown configuration key")
        merged[key] = str(val)
    typed = {k: _convert(k, v) for k, v in merged.items()}
    meta_cfg = MetaConfig(
        algorithm=typed["algorithm"],
        learner=typed["learner"],
        env=typed["env"],
        phi_lo=typed["phi_lo"],
        phi_hi=typed["phi_hi"],
        alpha=typed["alpha"],
        beta=typed["beta"],
        delta=typed["delta"],
        gamma=typed["gamma"],
        m_tasks=typed["m_tasks"],
        k_trajs=typed["k_trajs"],
        horizon=typed["horizon"],
        epochs=typed["epochs"],
        seed=typed["seed"],
    )
    return RunConfig(
        meta=meta_cfg,
        eval_every=typed["eval_every"],
        eval_episodes=typed["eval_episodes"],
        conv_tau=typed["conv_tau"],
        conv_window=typed["conv_window"],
        out_dir=typed["out_dir"],
        label=typed["label"],
    )


def load_config(path, overrides: "dict[str, str] | None" = None) -> RunConfig:
    """Config file plus command-line overrides (overrides win)."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ParseError(f"cannot read config {path}: {e}") from None
    values = parse_config_text(text, source=str(path))
    for key, val in (overrides or {}).items():
        if key not in CONFIG_KEYS:
            raise ValidationError(f"{key}: unknown configuration key")
        values[key] = str(val)
    return build_run_config(values)


# ---------------------------------------------------------------------------
# Multi-run comparison
# ---------------------------------------------------------------------------

_SEED_SUFFIX = re.compile(r"-s\d+$")


def group_key(label: str) -> str:
    """Runs labeled `<name>-s<seed>` aggregate under `<name>`."""
    return _SEED_SUFFIX.sub("", label)


@dataclass(frozen=True)
class AlgorithmSummary:
    label: str
    n_runs: int
    epoch_seconds_mean: float
    epoch_seconds_std: float
    eval_seconds_mean: "float | None"
    eval_seconds_std: "float | None"
    convergence_epoch_mean: "float | None"
    convergence_epoch_std: "float | None"
    seconds_to_convergence_mean: "float | None"
    seconds_to_convergence_std: "float | None"
    missing_convergence: int


@dataclass(frozen=True)
class ComparisonReport:
    tau: float
    window: int
    groups: "tuple[AlgorithmSummary, ...]"
    speedups: "tuple[tuple[str, str, float], ...]"  # (numerator, denominator, ratio)

    def render(self) -> str:
        header = (
            f"{'algorithm':<22s} {'runs':>4s} {'epoch s':>16s} {'eval s':>16s} "
            f"{'conv epoch':>16s} {'to-conv s':>18s} {'missing':>7s}"
        )
        lines = [
            f"convergence rule: smoothed return >= {_fmt(self.tau)} "
            f"for {self.window} consecutive evaluated epochs",
            "",
            header,
            "-" * len(header),
        ]
        for g in self.groups:
            lines.append(
                f"{g.label:<22s} {g.n_runs:>4d} "
                f"{_pm(g.epoch_seconds_mean, g.epoch_seconds_std):>16s} "
                f"{_pm(g.eval_seconds_mean, g.eval_seconds_std):>16s} "
                f"{_pm(g.convergence_epoch_mean, g.convergence_epoch_std):>16s} "
                f"{_pm(g.seconds_to_convergence_mean, g.seconds_to_convergence_std):>18s} "
                f"{g.missing_convergence:>7d}"
            )
        if self.speedups:
            lines.append("")
            lines.append("speedup (ratio of mean seconds to convergence):")
            for num, den, ratio in self.speedups:
                lines.append(f"  {num} / {den} = {_fmt(ratio)}x")
        return "\n".join(lines) + "\n"


def _fmt(x: float) -> str:
    return format(float(x), ".4g")


def _pm(mean: "float | None", std: "float | None") -> str:
    if mean is None:
        return "n/a"
    return f"{_fmt(mean)} +- {_fmt(std)}"


def _mean_std(xs: "list[float]") -> "tuple[float, float]":
    arr = np.asarray(xs, dtype=np.float64)
    return float(arr.mean()), float(arr.std())


def run_convergence_epoch(log: RunLog, tau: float, w: int, factor: float = EMA_FACTOR) -> "int | None":
    """Convergence epoch under the smoothing rule, recomputed from the rows
    (evaluated epochs only; the window is counted in evaluated epochs)."""
    evaled = [r for r in log.rows if r.eval_return is not None]
    if not evaled:
        return None
    smoothed = ema_smooth([r.eval_return for r in evaled], factor)
    idx = detect_convergence(smoothed, tau, w)
    return None if idx is None else evaled[idx].epoch


def summarize(runs: "list[RunLog]", tau: float, w: int, factor: float = EMA_FACTOR) -> ComparisonReport:
    """Aggregate runs per algorithm label (seed suffixes stripped): per-epoch
    training seconds, per-evaluation seconds, convergence epoch, and training
    seconds until convergence. Runs that never converge are counted and
    excluded from the convergence statistics."""
    if not runs:
        raise ValidationError("runs: need at least one run log to summarize")
    by_group: "dict[str, list[RunLog]]" = {}
    for log in runs:
        by_group.setdefault(group_key(log.label), []).append(log)

    groups: "list[AlgorithmSummary]" = []
    to_conv_means: "dict[str, float]" = {}
    for label in sorted(by_group):
        members = by_group[label]
        epoch_secs = [r.wall_seconds for log in members for r in log.rows]
        eval_secs = [r.eval_seconds for log in members for r in log.rows if r.eval_seconds is not None]
        conv_epochs: "list[float]" = []
        conv_secs: "list[float]" = []
        missing = 0
        for log in members:
            conv = run_convergence_epoch(log, tau, w, factor)
            if conv is None:
                missing += 1
                continue
            conv_epochs.append(float(conv))
            conv_secs.append(float(sum(r.wall_seconds for r in log.rows if r.epoch <= conv)))
        e_mean, e_std = _mean_std(epoch_secs)
        v_mean, v_std = _mean_std(eval_secs) if eval_secs else (None, None)
        if conv_epochs:
            c_mean, c_std = _mean_std(conv_epochs)
            s_mean, s_std = _mean_std(conv_secs)
            to_conv_means[label] = s_mean
        else:
            c_mean = c_std = s_mean = s_std = None
        groups.append(
            AlgorithmSummary(
                label=label,
                n_runs=len(members),
                epoch_seconds_mean=e_mean,
                epoch_seconds_std=e_std,
                eval_seconds_mean=v_mean,
                eval_seconds_std=v_std,
                convergence_epoch_mean=c_mean,
                convergence_epoch_std=c_std,
                seconds_to_convergence_mean=s_mean,
                seconds_to_convergence_std=s_std,
                missing_convergence=missing,
            )
        )

    speedups: "list[tuple[str, str, float]]" = []
    labels = [g.label for g in groups if g.label in to_conv_means]
    for a in labels:
        for b in labels:
            if a != b:
                speedups.append((a, b, to_conv_means[a] / to_conv_means[b]))
    return ComparisonReport(tau=tau, window=w, groups=tuple(groups), speedups=tuple(speedups))


# ---------------------------------------------------------------------------
# Autodiff audit: reverse-mode and curvature against finite differences
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AuditResult:
    grad_errors: "tuple[float, ...]"
    hvp_errors: "tuple[float, ...]"
    grad_tol: float
    hvp_tol: float

    @property
    def max_grad_error(self) -> float:
        return max(self.grad_errors)

    @property
    def max_hvp_error(self) -> float:
        return max(self.hvp_errors)

    @property
    def passed(self) -> bool:
        return self.max_grad_error <= self.grad_tol and self.max_hvp_error <= self.hvp_tol

    def render(self) -> str:
        lines = ["autodiff audit: policy-gradient surrogate on frozen rollout batches"]
        for i, (ge, he) in enumerate(zip(self.grad_errors, self.hvp_errors)):
            lines.append(f"  seed {i}: grad rel err {ge:.3e}  hvp rel err {he:.3e}")
        verdict = "OK" if self.passed else "FAIL"
        lines.append(
            f"max grad rel err {self.max_grad_error:.3e} (tol {self.grad_tol:g}), "
            f"max hvp rel err {self.max_hvp_error:.3e} (tol {self.hvp_tol:g}): {verdict}"
        )
        return "\n".join(lines) + "\n"


def audit_oracles(
    n_seeds: int = 20,
    k: int = 2,
    horizon: int = 15,
    gamma: float = 0.99,
    phi: float = 10.0,
) -> AuditResult:
    """Check the gradient and Hessian-vector-product paths against central
    finite differences on the policy surrogate over frozen rollout batches,
    one independent policy and batch per seed."""
    if n_seeds < 1:
        raise ValidationError("n_seeds: must be >= 1")
    grad_errors: "list[float]" = []
    hvp_errors: "list[float]" = []
    for s in range(n_seeds):
        stream = Stream(s)
        env = make_env(Task(Family.CARTPOLE, phi))
        env.horizon = horizon
        arch = actor_arch(env)
        theta = init_params(arch, stream.child(0))
        batch = rl.sample_batch(env, PolicyNet(arch, theta), k, stream.child(1))
        obj = rl.policy_objective(batch, gamma)
        g = ad.grad(obj, theta)
        grad_errors.append(ad.rel_err(g, ad.fd_grad(obj, theta)))
        v_raw = stream.child(2).generator().standard_normal(theta.size)
        v = theta.with_values(v_raw / np.linalg.norm(v_raw))
        hv = ad.hvp(obj, theta, v)
        hvp_errors.append(ad.rel_err(hv, ad.fd_hvp(obj, theta, v)))
    return AuditResult(
        grad_errors=tuple(grad_errors),
        hvp_errors=tuple(hvp_errors),
        grad_tol=GRAD_TOL,
        hvp_tol=HVP_TOL,
    )


# ---------------------------------------------------------------------------
# Plotting
# ---------------------------------------------------------------------------

_PALETTE = (
    "#1f77b4",
    "#d62728",
    "#2ca02c",
    "#ff7f0e",
    "#9467bd",
    "#8c564b",
    "#17becf",
    "#7f7f7f",
)

_W, _H = 880.0, 560.0
_ML, _MR, _MT, _MB = 70.0, 30.0, 40.0, 55.0


def _svg_coord(x: float) -> str:
    return format(x, ".2f")


def emit_plot(runs: "list[RunLog]", factor: float, out_path) -> "tuple[Path, Path]":
    """One EMA-smoothed eval-return polyline per run, legend by label, to a
    standalone SVG plus a columnar .dat file of the plotted points. Output
    bytes depend only on the run contents."""
    if not runs:
        raise ValidationError("runs: need at least one run log to plot")
    series: "list[tuple[str, list[int], np.ndarray]]" = []
    for log in runs:
        evaled = [r for r in log.rows if r.eval_return is not None]
        if not evaled:
            raise ValidationError(f"runs: {log.label} has no evaluated epochs to plot")
        xs = [r.epoch for r in evaled]
        ys = ema_smooth([r.eval_return for r in evaled], factor)
        series.append((log.label, xs, ys))

    x_hi = max(max(xs) for _, xs, _ in series)
    x_lo = min(min(xs) for _, xs, _ in series)
    y_all = np.concatenate([ys for _, _, ys in series])
    y_lo = min(0.0, float(y_all.min()))
    y_hi = float(y_all.max())
    y_hi = y_hi + 0.05 * max(y_hi - y_lo, 1.0)
    if x_hi == x_lo:
        x_hi = x_lo + 1
    plot_w = _W - _ML - _MR
    plot_h = _H - _MT - _MB

    def px(e: float) -> float:
        return _ML + (e - x_lo) / (x_hi - x_lo) * plot_w

    def py(v: float) -> float:
        return _MT + (y_hi - v) / (y_hi - y_lo) * plot_h

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{int(_W)}" height="{int(_H)}" '
        f'viewBox="0 0 {int(_W)} {int(_H)}">',
        f'<rect x="0" y="0" width="{int(_W)}" height="{int(_H)}" fill="white"/>',
        f'<rect x="{_svg_coord(_ML)}" y="{_svg_coord(_MT)}" width="{_svg_coord(plot_w)}" '
        f'height="{_svg_coord(plot_h)}" fill="none" stroke="black" stroke-width="1"/>',
    ]
    for i in range(5):
        fx = x_lo + (x_hi - x_lo) * i / 4
        fy = y_lo + (y_hi - y_lo) * i / 4
        parts.append(
            f'<text x="{_svg_coord(px(fx))}" y="{_svg_coord(_H - _MB + 18)}" font-size="12" '
            f'text-anchor="middle" font-family="monospace">{format(fx, ".4g")}</text>'
        )
        parts.append(
            f'<text x="{_svg_coord(_ML - 8)}" y="{_svg_coord(py(fy) + 4)}" font-size="12" '
            f'text-anchor="end" font-family="monospace">{format(fy, ".4g")}</text>'
        )
        parts.append(
            f'<line x1="{_svg_coord(_ML)}" y1="{_svg_coord(py(fy))}" x2="{_svg_coord(_W - _MR)}" '
            f'y2="{_svg_coord(py(fy))}" stroke="#dddddd" stroke-width="1"/>'
        )
    parts.append(
        f'<text x="{_svg_coord(_ML + plot_w / 2)}" y="{_svg_coord(_H - 12)}" font-size="13" '
        f'text-anchor="middle" font-family="monospace">epoch</text>'
    )
    parts.append(
        f'<text x="16" y="{_svg_coord(_MT + plot_h / 2)}" font-size="13" text-anchor="middle" '
        f'font-family="monospace" transform="rotate(-90 16 {_svg_coord(_MT + plot_h / 2)})">'
        "smoothed return</text>"
    )
    for idx, (label, xs, ys) in enumerate(series):
        color = _PALETTE[idx % len(_PALETTE)]
        pts = " ".join(f"{_svg_coord(px(e))},{_svg_coord(py(v))}" for e, v in zip(xs, ys))
        parts.append(
            f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>'
        )
        ly = _MT + 16 + 16 * idx
        parts.append(
            f'<line x1="{_svg_coord(_ML + 10)}" y1="{_svg_coord(ly - 4)}" x2="{_svg_coord(_ML + 34)}" '
            f'y2="{_svg_coord(ly - 4)}" stroke="{color}" stroke-width="1.5"/>'
        )
        parts.append(
            f'<text x="{_svg_coord(_ML + 40)}" y="{_svg_coord(ly)}" font-size="12" '
            f'font-family="monospace">{label}</text>'
        )
    parts.append("</svg>")

    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    out_path.write_text("\n".join(parts) + "\n")

    dat_path = out_path.with_suffix(".dat")
    dat_lines = ["# label epoch eval_return smoothed"]
    for label, xs, ys in series:
        log = next(l for l in runs if l.label == label)
        raw = [r.eval_return for r in log.rows if r.eval_return is not None]
        for e, r0, sm in zip(xs, raw, ys):
            dat_lines.append(f"{label} {e} {fmt_float(r0)} {fmt_float(sm)}")
    dat_path.write_text("\n".join(dat_lines) + "\n")
    return out_path, dat_path
